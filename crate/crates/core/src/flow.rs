//! Rectified-flow training and sampling, plus a DDPM baseline.
//!
//! The straight path between data `z0` and noise `zT` is
//! `z_t = (1 - t) z0 + t zT`, whose time derivative is the constant
//! `zT - z0`. The velocity network regresses that target, and sampling
//! integrates the learned field from `t = 1` (noise) back to `t = 0` with
//! explicit Euler steps `z <- z - dt * v(z, t, y)`.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{Network, VelocityField, VelocityFieldNet};
use crate::params::{Bound, Optimizer, OptimizerKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_horizon")]
    pub time_horizon: f64,
    /// Decay of an exponential moving average of the weights kept during
    /// training and copied into the net at the end; 0 disables it.
    #[serde(default)]
    pub ema_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    32
}

fn default_horizon() -> f64 {
    1.0
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.time_horizon != 1.0 {
            return Err(Error::Config("time_horizon is fixed at 1.0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must be in [0, 1), got {}", self.ema_decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_steps")]
    pub num_steps: usize,
    #[serde(default = "default_true")]
    pub clamp_output: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    50
}

fn default_true() -> bool {
    true
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: default_steps(),
            clamp_output: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// `(1 - t) z0 + t zT`.
pub fn interpolate(z0: &Tensor, zt: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    z0.zip_map(zt, |a, b| (1.0 - t) * a + t * b)
}

/// Per-sample interpolation for a batch with one time per sample.
fn interpolate_batch(z0: &Tensor, zt: &Tensor, t: &[f64]) -> Result<Tensor> {
    z0.expect_shape(zt.shape())?;
    if t.len() != z0.batch() {
        return Err(Error::Shape(format!("{} times for a batch of {}", t.len(), z0.batch())));
    }
    if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Domain(format!("t = {bad} outside [0, 1]")));
    }
    let n = z0.item_len();
    let mut out = z0.clone();
    for (i, &ti) in t.iter().enumerate() {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        for (j, v) in row.iter_mut().enumerate() {
            *v = (1.0 - ti) * *v + ti * zt.data()[i * n + j];
        }
    }
    Ok(out)
}

/// Mean over elements of `(v(z_t, t, y) - (zT - z0))^2`, evaluated without a tape.
pub fn rfm_loss<F: VelocityField + ?Sized>(field: &F, z0: &Tensor, y: &[usize], t: &[f64], zt: &Tensor) -> Result<f64> {
    let x = interpolate_batch(z0, zt, t)?;
    let target = zt.zip_map(z0, |a, b| a - b)?;
    let v = field.velocity(&x, t, y)?;
    let d = v.zip_map(&target, |a, b| (a - b) * (a - b))?;
    Ok(d.mean())
}

/// Differentiable form of [`rfm_loss`] on a bound network.
pub fn rfm_loss_graph<'g>(
    net: &VelocityFieldNet,
    p: &Bound<'g>,
    graph: &'g Graph,
    z0: &Tensor,
    y: &[usize],
    t: &[f64],
    zt: &Tensor,
) -> Result<Var<'g>> {
    let x = interpolate_batch(z0, zt, t)?;
    let target = graph.constant(zt.zip_map(z0, |a, b| a - b)?);
    net.forward(p, graph.constant(x), t, y)?.mse(target)
}

/// Euler integration from a given `z(1)` down to `t = 0`.
pub fn integrate_from<F: VelocityField + ?Sized>(field: &F, start: Tensor, y: &[usize], cfg: &SamplerConfig) -> Result<Tensor> {
    Ok(integrate(field, start, y, cfg, false)?.0)
}

fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    start: Tensor,
    y: &[usize],
    cfg: &SamplerConfig,
    trace: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    cfg.validate()?;
    let b = start.batch();
    if y.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} samples", y.len())));
    }
    let dt = 1.0 / cfg.num_steps as f64;
    let mut z = start;
    let mut path = Vec::new();
    if trace {
        path.push(z.clone());
    }
    for i in 0..cfg.num_steps {
        let t = 1.0 - i as f64 * dt;
        let v = field.velocity(&z, &vec![t; b], y)?;
        z.add_scaled(&v, -dt);
        if trace {
            path.push(z.clone());
        }
    }
    if cfg.clamp_output {
        z = z.clamp(-1.0, 1.0);
    }
    Ok((z, path))
}

fn initial_noise(n: usize, shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&mut rng, &[n, shape[0], shape[1], shape[2]], 1.0)
}

/// Draw `z(1) ~ N(0, I)` from `cfg.seed` and integrate one sample per label.
pub fn sample_features<F: VelocityField + ?Sized>(field: &F, y: &[usize], shape: [usize; 3], cfg: &SamplerConfig) -> Result<Tensor> {
    integrate_from(field, initial_noise(y.len(), shape, cfg.seed), y, cfg)
}

/// Like [`sample_features`] but also returns every intermediate state.
pub fn sample_trajectory<F: VelocityField + ?Sized>(
    field: &F,
    y: &[usize],
    shape: [usize; 3],
    cfg: &SamplerConfig,
) -> Result<(Tensor, Vec<Tensor>)> {
    integrate(field, initial_noise(y.len(), shape, cfg.seed), y, cfg, true)
}

/// One JSON line per step: `{"step": i, "t": t, "mean": .., "std": .., "values": [...]}`.
pub fn write_trajectory(path: &Path, trajectory: &[Tensor]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let n = trajectory.len().saturating_sub(1).max(1);
    for (i, z) in trajectory.iter().enumerate() {
        let mean = z.mean();
        let std = (z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
        let row = serde_json::json!({
            "step": i,
            "t": 1.0 - i as f64 / n as f64,
            "mean": mean,
            "std": std,
            "values": z.data(),
        });
        writeln!(f, "{row}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn check_labelled(features: &Tensor, labels: &[usize], net: &VelocityFieldNet) -> Result<()> {
    if features.batch() == 0 || labels.is_empty() {
        return Err(Error::Config("cannot train on an empty feature set".into()));
    }
    if features.batch() != labels.len() {
        return Err(Error::Shape(format!("{} features but {} labels", features.batch(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= net.num_classes()) {
        return Err(Error::Data(format!("label {bad} outside {} classes", net.num_classes())));
    }
    Ok(())
}

struct WeightAverage {
    decay: f64,
    avg: Option<ParamStore>,
}

impl WeightAverage {
    fn new(net: &VelocityFieldNet, decay: f64) -> Self {
        Self {
            decay,
            avg: (decay > 0.0).then(|| net.store().clone()),
        }
    }

    fn update(&mut self, net: &VelocityFieldNet) {
        if let Some(avg) = self.avg.as_mut() {
            for (a, w) in avg.tensors_mut().iter_mut().zip(net.store().tensors()) {
                a.scale(self.decay);
                a.add_scaled(w, 1.0 - self.decay);
            }
        }
    }

    fn finish(self, net: &mut VelocityFieldNet) -> Result<()> {
        match self.avg {
            Some(avg) => net.store_mut().copy_from(&avg),
            None => Ok(()),
        }
    }
}

/// Train with fresh noise and uniform times per sample per epoch; returns mean loss per epoch.
pub fn train_flow(net: &mut VelocityFieldNet, features: &Tensor, labels: &[usize], cfg: &FlowTrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_labelled(features, labels, net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, net.store());
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut ema = WeightAverage::new(net, cfg.ema_decay);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let z0 = features.select(batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let zt = Tensor::randn(&mut rng, z0.shape(), 1.0);
            let t: Vec<f64> = (0..batch.len()).map(|_| rng.random::<f64>()).collect();
            let g = Graph::new();
            let p = net.store().bind(&g);
            let loss = rfm_loss_graph(net, &p, &g, &z0, &y, &t, &zt)?;
            total += loss.item() * batch.len() as f64;
            let grads = p.grads(&g.backward(loss)?);
            opt.step(net.store_mut(), &grads);
            ema.update(net);
        }
        history.push(total / labels.len() as f64);
    }
    ema.finish(net)?;
    Ok(history)
}

// ---------------------------------------------------------------------------
// DDPM baseline

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdpmConfig {
    #[serde(default = "default_timesteps")]
    pub num_timesteps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default = "default_true")]
    pub clamp_output: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_timesteps() -> usize {
    1000
}
fn default_beta_start() -> f64 {
    1e-4
}
fn default_beta_end() -> f64 {
    0.02
}

impl Default for DdpmConfig {
    fn default() -> Self {
        Self {
            num_timesteps: default_timesteps(),
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            clamp_output: true,
            seed: 0,
        }
    }
}

/// Linear beta schedule and its cumulative products.
#[derive(Clone, Debug)]
pub struct DdpmSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DdpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_timesteps == 0 {
            return Err(Error::Config("num_timesteps must be at least 1".into()));
        }
        if !(0.0 < self.beta_start && self.beta_start < 1.0 && 0.0 < self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        if self.num_timesteps > 1 && self.beta_start >= self.beta_end {
            return Err(Error::Config("beta_start must be below beta_end".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DdpmSchedule> {
        self.validate()?;
        let n = self.num_timesteps;
        let betas: Vec<f64> = (0..n)
            .map(|i| {
                if n == 1 {
                    self.beta_start
                } else {
                    self.beta_start + (self.beta_end - self.beta_start) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(DdpmSchedule { betas, alphas, alpha_bars })
    }

    /// Continuous time fed to the network for discrete step `k`.
    pub fn time_of(&self, k: usize) -> f64 {
        k as f64 / self.num_timesteps as f64
    }
}

/// `sqrt(abar) z0 + sqrt(1 - abar) eps` for per-sample steps `k`.
fn noised(z0: &Tensor, eps: &Tensor, steps: &[usize], sched: &DdpmSchedule) -> Tensor {
    let n = z0.item_len();
    let mut x = z0.clone();
    for (i, &k) in steps.iter().enumerate() {
        let (a, s) = (sched.alpha_bars[k].sqrt(), (1.0 - sched.alpha_bars[k]).sqrt());
        for j in i * n..(i + 1) * n {
            x.data_mut()[j] = a * z0.data()[j] + s * eps.data()[j];
        }
    }
    x
}

/// Epsilon-prediction error for explicit steps and noise, evaluated without a tape.
pub fn ddpm_loss<F: VelocityField + ?Sized>(
    field: &F,
    z0: &Tensor,
    y: &[usize],
    steps: &[usize],
    eps: &Tensor,
    cfg: &DdpmConfig,
) -> Result<f64> {
    let sched = cfg.schedule()?;
    check_steps(steps, z0, cfg)?;
    let x = noised(z0, eps, steps, &sched);
    let t: Vec<f64> = steps.iter().map(|&k| cfg.time_of(k)).collect();
    let pred = field.velocity(&x, &t, y)?;
    Ok(pred.zip_map(eps, |a, b| (a - b) * (a - b))?.mean())
}

fn check_steps(steps: &[usize], z0: &Tensor, cfg: &DdpmConfig) -> Result<()> {
    if steps.len() != z0.batch() {
        return Err(Error::Shape(format!("{} steps for a batch of {}", steps.len(), z0.batch())));
    }
    if steps.iter().any(|&k| k >= cfg.num_timesteps) {
        return Err(Error::Domain("diffusion step outside the schedule".into()));
    }
    Ok(())
}

/// Differentiable form of [`ddpm_loss`].
#[allow(clippy::too_many_arguments)]
pub fn ddpm_loss_graph<'g>(
    net: &VelocityFieldNet,
    p: &Bound<'g>,
    graph: &'g Graph,
    z0: &Tensor,
    y: &[usize],
    steps: &[usize],
    eps: &Tensor,
    cfg: &DdpmConfig,
) -> Result<Var<'g>> {
    let sched = cfg.schedule()?;
    check_steps(steps, z0, cfg)?;
    eps.expect_shape(z0.shape())?;
    let x = noised(z0, eps, steps, &sched);
    let t: Vec<f64> = steps.iter().map(|&k| cfg.time_of(k)).collect();
    net.forward(p, graph.constant(x), &t, y)?.mse(graph.constant(eps.clone()))
}

/// Sample steps and noise, take one optimiser step, and return the loss.
pub fn ddpm_train_step<R: Rng + ?Sized>(
    net: &mut VelocityFieldNet,
    opt: &mut Optimizer,
    z0: &Tensor,
    y: &[usize],
    cfg: &DdpmConfig,
    rng: &mut R,
) -> Result<f64> {
    let steps: Vec<usize> = (0..z0.batch()).map(|_| rng.random_range(0..cfg.num_timesteps)).collect();
    let eps = Tensor::randn(rng, z0.shape(), 1.0);
    let g = Graph::new();
    let p = net.store().bind(&g);
    let loss = ddpm_loss_graph(net, &p, &g, z0, y, &steps, &eps, cfg)?;
    let value = loss.item();
    let grads = p.grads(&g.backward(loss)?);
    opt.step(net.store_mut(), &grads);
    Ok(value)
}

/// Epoch loop around [`ddpm_train_step`]; returns mean loss per epoch.
pub fn train_ddpm(
    net: &mut VelocityFieldNet,
    features: &Tensor,
    labels: &[usize],
    train: &FlowTrainConfig,
    cfg: &DdpmConfig,
) -> Result<Vec<f64>> {
    train.validate()?;
    cfg.validate()?;
    check_labelled(features, labels, net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut opt = Optimizer::new(train.optimizer, train.learning_rate, net.store());
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut history = Vec::with_capacity(train.epochs);
    let mut ema = WeightAverage::new(net, train.ema_decay);
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size) {
            let z0 = features.select(batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            total += ddpm_train_step(net, &mut opt, &z0, &y, cfg, &mut rng)? * batch.len() as f64;
            ema.update(net);
        }
        history.push(total / labels.len() as f64);
    }
    ema.finish(net)?;
    Ok(history)
}

/// Ancestral sampling over the full schedule with `sigma_k^2 = beta_k`.
pub fn ddpm_sample<F: VelocityField + ?Sized>(field: &F, y: &[usize], shape: [usize; 3], cfg: &DdpmConfig) -> Result<Tensor> {
    let sched = cfg.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let b = y.len();
    let mut x = Tensor::randn(&mut rng, &[b, shape[0], shape[1], shape[2]], 1.0);
    for k in (0..cfg.num_timesteps).rev() {
        let eps = field.velocity(&x, &vec![cfg.time_of(k); b], y)?;
        let coef = sched.betas[k] / (1.0 - sched.alpha_bars[k]).sqrt();
        let inv = 1.0 / sched.alphas[k].sqrt();
        let mut next = x.zip_map(&eps, |xv, ev| inv * (xv - coef * ev))?;
        if k > 0 {
            let z = Tensor::randn(&mut rng, next.shape(), 1.0);
            next.add_scaled(&z, sched.betas[k].sqrt());
        }
        x = next;
    }
    if cfg.clamp_output {
        x = x.clamp(-1.0, 1.0);
    }
    Ok(x)
}
