//! Memorisation checks: normalised l2 nearest-neighbour distances between
//! generated and training images, and a decoder that maps features back to
//! pixels so both pipelines are compared in image space.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::client::{minibatch_epochs, Trained};
use crate::error::{Error, Result};
use crate::nets::{DecoderConfig, FeatureDecoder, Network};
use crate::params::{Optimizer, OptimizerKind};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_generated")]
    pub num_generated: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_delta() -> f64 {
    0.1
}

fn default_generated() -> usize {
    64
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            delta: default_delta(),
            num_generated: default_generated(),
            seed: 0,
        }
    }
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be > 0, got {}", self.delta)));
        }
        Ok(())
    }
}

/// `sqrt(sum (a_i - b_i)^2 / d)`.
pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("l2 distance between {} and {} elements", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape("l2 distance of empty arrays".into()));
    }
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((ss / a.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportMode {
    Pixel,
    FeatureDecoded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub mode: ReportMode,
    pub delta: f64,
    pub per_generated_min_distance: Vec<f64>,
    pub num_flagged: usize,
    pub mean_nn_distance: f64,
}

/// Nearest training image for each generated image, flagged when within `delta`.
pub fn memorization_report(generated: &Tensor, train: &Tensor, cfg: &PrivacyConfig, mode: ReportMode) -> Result<MemorizationReport> {
    cfg.validate()?;
    if generated.batch() == 0 || train.batch() == 0 || generated.is_empty() || train.is_empty() {
        return Err(Error::Config("memorisation report needs non-empty generated and training sets".into()));
    }
    if generated.item_len() != train.item_len() {
        return Err(Error::Shape(format!(
            "generated items have {} values, training items {}",
            generated.item_len(),
            train.item_len()
        )));
    }
    let mut mins = Vec::with_capacity(generated.batch());
    for i in 0..generated.batch() {
        let g = generated.row(i);
        let mut best = f64::INFINITY;
        for j in 0..train.batch() {
            best = best.min(l2_distance(g, train.row(j))?);
        }
        mins.push(best);
    }
    let num_flagged = mins.iter().filter(|&&d| d <= cfg.delta).count();
    let mean = mins.iter().sum::<f64>() / mins.len() as f64;
    Ok(MemorizationReport {
        mode,
        delta: cfg.delta,
        per_generated_min_distance: mins,
        num_flagged,
        mean_nn_distance: mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineComparison {
    pub pixel: MemorizationReport,
    pub feature: MemorizationReport,
    /// Feature-pipeline mean nearest-neighbour distance is at least the pixel one.
    pub direction_ok: bool,
}

pub fn compare_pipelines(pixel_samples: &Tensor, decoded_feature_samples: &Tensor, train: &Tensor, cfg: &PrivacyConfig) -> Result<PipelineComparison> {
    let pixel = memorization_report(pixel_samples, train, cfg, ReportMode::Pixel)?;
    let feature = memorization_report(decoded_feature_samples, train, cfg, ReportMode::FeatureDecoded)?;
    Ok(PipelineComparison {
        direction_ok: feature.mean_nn_distance >= pixel.mean_nn_distance,
        pixel,
        feature,
    })
}

pub fn write_report(path: &Path, report: &PipelineComparison) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Map `[-1, 1]` samples to `[0, 1]` image space.
pub fn signed_to_unit(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderTrainConfig {
    #[serde(default = "default_decoder_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_decoder_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_adam")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_decoder_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_decoder_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    32
}
fn default_decoder_lr() -> f64 {
    0.01
}
fn default_adam() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_decoder_hidden() -> usize {
    16
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_decoder_epochs(),
            batch_size: default_batch(),
            learning_rate: default_decoder_lr(),
            optimizer: default_adam(),
            hidden: default_decoder_hidden(),
            seed: 0,
        }
    }
}

/// Fit a decoder on `(feature, image)` pairs by pixel mean-squared error.
pub fn train_decoder(features: &Tensor, images: &Tensor, cfg: &DecoderTrainConfig) -> Result<Trained<FeatureDecoder>> {
    if features.batch() != images.batch() || features.batch() == 0 {
        return Err(Error::Config("decoder needs aligned, non-empty feature/image pairs".into()));
    }
    let shape = images.item_shape();
    if shape.len() != 3 || features.item_shape() != shape {
        return Err(Error::Shape("features must match the [C, H, W] image shape".into()));
    }
    let dc = DecoderConfig {
        image_shape: [shape[0], shape[1], shape[2]],
        hidden: cfg.hidden,
    };
    let mut dec = FeatureDecoder::build(&dc, derive_seed(cfg.seed, "decoder/init"))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, dec.store());
    let mut rng = rng_for(cfg.seed, "decoder/batches");
    let losses = minibatch_epochs(features.batch(), cfg.epochs, cfg.batch_size, &mut rng, |batch| {
        let g = Graph::new();
        let p = dec.store().bind(&g);
        let out = dec.forward(&p, g.constant(features.select(batch)))?;
        let loss = out.mse(g.constant(images.select(batch)))?;
        let grads = p.grads(&g.backward(loss)?);
        opt.step(dec.store_mut(), &grads);
        Ok(loss.item())
    })?;
    Ok(Trained { model: dec, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn distance_values() {
        assert_eq!(l2_distance(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap(), 0.5);
        assert_eq!(l2_distance(&[0.3, 0.2], &[0.3, 0.2]).unwrap(), 0.0);
        assert!(matches!(l2_distance(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn report_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let train = Tensor::uniform(&mut rng, &[5, 1, 3, 3], 1.0);
        let r = memorization_report(&train, &train, &PrivacyConfig::default(), ReportMode::Pixel).unwrap();
        assert!(r.per_generated_min_distance.iter().all(|&d| d == 0.0));
        assert_eq!(r.num_flagged, 5);

        let zeros = Tensor::zeros(&[4, 1, 3, 3]);
        let ones = Tensor::full(&[3, 1, 3, 3], 1.0);
        let r = memorization_report(&ones, &zeros, &PrivacyConfig::default(), ReportMode::Pixel).unwrap();
        assert_eq!(r.per_generated_min_distance, vec![1.0; 3]);
        assert_eq!((r.num_flagged, r.mean_nn_distance), (0, 1.0));
        assert!(memorization_report(&Tensor::zeros(&[0, 1, 3, 3]), &zeros, &PrivacyConfig::default(), ReportMode::Pixel).is_err());
    }

    #[test]
    fn comparison_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train = Tensor::uniform(&mut rng, &[6, 1, 2, 2], 1.0);
        let near = train.map(|v| v + 0.01);
        let far = train.map(|v| v + 0.5);
        let cfg = PrivacyConfig::default();
        let same = compare_pipelines(&near, &near, &train, &cfg).unwrap();
        assert!(same.direction_ok);
        assert_eq!(same.pixel.mean_nn_distance, same.feature.mean_nn_distance);
        let ab = compare_pipelines(&near, &far, &train, &cfg).unwrap();
        let ba = compare_pipelines(&far, &near, &train, &cfg).unwrap();
        assert!(ab.direction_ok && !ba.direction_ok);
    }

    #[test]
    fn decoder_learns_identity_like_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let images = Tensor::uniform(&mut rng, &[32, 1, 4, 4], 0.5).map(|v| v + 0.5);
        let feats = images.map(|v| (2.0 * v - 1.0).tanh());
        let t = train_decoder(&feats, &images, &DecoderTrainConfig { epochs: 40, ..Default::default() }).unwrap();
        assert!(t.losses.last().unwrap() < &t.losses[0]);
        let out = t.model.decode(&feats).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    proptest! {
        #[test]
        fn metric_properties(a in prop::collection::vec(-3.0f64..3.0, 6), b in prop::collection::vec(-3.0f64..3.0, 6), c in prop::collection::vec(-3.0f64..3.0, 6)) {
            let ab = l2_distance(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, l2_distance(&b, &a).unwrap());
            prop_assert!(ab <= l2_distance(&a, &c).unwrap() + l2_distance(&c, &b).unwrap() + 1e-9);
            prop_assert_eq!(l2_distance(&a, &a).unwrap(), 0.0);
            if a != b { prop_assert!(ab > 0.0); }
        }

        #[test]
        fn flags_are_thresholded_and_monotone(seed in 0u64..1000, d1 in 0.01f64..0.5, d2 in 0.01f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train = Tensor::uniform(&mut rng, &[5, 1, 2, 2], 0.5);
            let gen = Tensor::uniform(&mut rng, &[7, 1, 2, 2], 0.5);
            let (lo, hi) = (d1.min(d2), d1.max(d2));
            let r_lo = memorization_report(&gen, &train, &PrivacyConfig { delta: lo, ..Default::default() }, ReportMode::Pixel).unwrap();
            let r_hi = memorization_report(&gen, &train, &PrivacyConfig { delta: hi, ..Default::default() }, ReportMode::Pixel).unwrap();
            prop_assert_eq!(r_lo.num_flagged, r_lo.per_generated_min_distance.iter().filter(|&&d| d <= lo).count());
            prop_assert!(r_lo.num_flagged <= r_hi.num_flagged);
        }
    }
}
