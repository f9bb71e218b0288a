//! Wall-clock comparison of rectified-flow and DDPM sampling.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::client::GeneratorKind;
use crate::error::{Error, Result};
use crate::flow::{ddpm_sample, sample_features, DdpmConfig, SamplerConfig};
use crate::nets::{Network, VelocityFieldNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub generator: GeneratorKind,
    pub steps: usize,
    pub samples: usize,
    /// Fastest of the repeats.
    pub total_s: f64,
    pub per_sample_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub rfm: TimingRow,
    pub ddpm: TimingRow,
    /// DDPM time over RFM time.
    pub speedup: f64,
}

fn fastest(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        f()?;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Time sampling `labels.len()` items with each generator; the two runs alternate so load affects both.
pub fn timing_report(
    flow_net: &VelocityFieldNet,
    ddpm_net: &VelocityFieldNet,
    labels: &[usize],
    sampler: &SamplerConfig,
    ddpm: &DdpmConfig,
    repeats: usize,
) -> Result<TimingReport> {
    if flow_net.store().num_scalars() != ddpm_net.store().num_scalars() || flow_net.feature_shape() != ddpm_net.feature_shape() {
        return Err(Error::Config("timing compares networks of equal size and feature shape".into()));
    }
    if labels.is_empty() {
        return Err(Error::Config("timing needs at least one sample".into()));
    }
    sampler.validate()?;
    ddpm.validate()?;
    let shape = flow_net.feature_shape();
    let (mut rfm_best, mut ddpm_best) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..repeats.max(1) {
        rfm_best = rfm_best.min(fastest(1, || sample_features(flow_net, labels, shape, sampler).map(drop))?);
        ddpm_best = ddpm_best.min(fastest(1, || ddpm_sample(ddpm_net, labels, shape, ddpm).map(drop))?);
    }
    let n = labels.len();
    let row = |generator, steps, total_s: f64| TimingRow {
        generator,
        steps,
        samples: n,
        total_s,
        per_sample_s: total_s / n as f64,
    };
    Ok(TimingReport {
        rfm: row(GeneratorKind::Rfm, sampler.num_steps, rfm_best),
        ddpm: row(GeneratorKind::Ddpm, ddpm.num_timesteps, ddpm_best),
        speedup: ddpm_best / rfm_best.max(f64::MIN_POSITIVE),
    })
}

impl TimingReport {
    /// Plain-text table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10}{:>8}{:>10}{:>14}{:>16}\n", "generator", "steps", "samples", "total_s", "per_sample_s");
        for r in [&self.rfm, &self.ddpm] {
            let name = match r.generator {
                GeneratorKind::Rfm => "rfm",
                GeneratorKind::Ddpm => "ddpm",
            };
            s.push_str(&format!("{name:<10}{:>8}{:>10}{:>14.6}{:>16.8}\n", r.steps, r.samples, r.total_s, r.per_sample_s));
        }
        s.push_str(&format!("speedup {:.2}x\n", self.speedup));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{VelocityArch, VelocityConfig};

    fn net(hidden: usize) -> VelocityFieldNet {
        let cfg = VelocityConfig {
            arch: VelocityArch::Mlp,
            feature_shape: [1, 8, 8],
            num_classes: 3,
            hidden,
            time_dim: 16,
            depth: 2,
            patch: 4,
        };
        VelocityFieldNet::build(&cfg, 1).unwrap()
    }

    #[test]
    fn equal_step_counts_time_alike() {
        let n = net(64);
        let labels = vec![0, 1, 2, 0, 1, 2, 0, 1];
        let ddpm = DdpmConfig {
            num_timesteps: 50,
            ..DdpmConfig::default()
        };
        let r = timing_report(&n, &n, &labels, &SamplerConfig::default(), &ddpm, 5).unwrap();
        let ratio = r.speedup;
        assert!((0.5..=2.0).contains(&ratio), "ratio {ratio}");
        assert!(r.table().contains("speedup"));
    }

    #[test]
    fn unequal_nets_are_rejected() {
        let r = timing_report(&net(16), &net(32), &[0], &SamplerConfig::default(), &DdpmConfig::default(), 1);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
