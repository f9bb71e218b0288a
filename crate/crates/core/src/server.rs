//! Server side: synthetic feature set, averaged teacher, and dual-layer distillation.
//!
//! The student is trained on features sampled from every client's generator
//! with `(1 - alpha) CE + alpha KL + beta feat`, where KL compares tempered
//! logits with the averaged teacher and `feat` regresses the student's tapped
//! intermediate map onto the teacher's.

use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{kl_value, Graph, Var};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::client::{minibatch_epochs, ClientUpload, Featurizer, GeneratorKind};
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::flow::{ddpm_sample, sample_features, DdpmConfig, SamplerConfig};
use crate::nets::{ClassifierModel, Network};
use crate::params::{weighted_mean, Bound, Optimizer, OptimizerKind};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

/// Labelled synthetic features with the client each sample came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFeatureSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub source_client: Vec<usize>,
}

impl SyntheticFeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn from_client(&self, client_id: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.source_client[i] == client_id).collect()
    }

    /// `features`, `labels`, and `source_client` arrays in one container.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(CheckpointMeta::new(SYNTH_ID));
        ck.push("features", &self.features);
        let as_tensor = |v: &[usize]| Tensor::new(&[v.len()], v.iter().map(|&x| x as f64).collect());
        ck.push("labels", &as_tensor(&self.labels)?);
        ck.push("source_client", &as_tensor(&self.source_client)?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.architecture_id != SYNTH_ID {
            return Err(Error::Checkpoint(format!("`{}` is not a synthetic feature set", ck.meta.architecture_id)));
        }
        let ints = |name: &str| -> Result<Vec<usize>> { Ok(ck.get(name)?.data.iter().map(|&v| v as usize).collect()) };
        let out = Self {
            features: ck.tensor("features")?,
            labels: ints("labels")?,
            source_client: ints("source_client")?,
        };
        if out.features.batch() != out.labels.len() || out.labels.len() != out.source_client.len() {
            return Err(Error::Checkpoint("synthetic set arrays disagree in length".into()));
        }
        Ok(out)
    }
}

const SYNTH_ID: &str = "synthetic-features/v1";

/// `n` labels drawn from a normalised histogram.
pub fn sample_labels<R: Rng + ?Sized>(histogram: &[usize], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(histogram).map_err(|_| Error::Data("label histogram has zero mass".into()))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

const SYNTH_CHUNK: usize = 128;

/// Draw `per_client` samples from every upload's generator and concatenate them.
pub fn synthesize_dataset(uploads: &[ClientUpload], per_client: usize, sampler: &SamplerConfig) -> Result<SyntheticFeatureSet> {
    sampler.validate()?;
    if uploads.is_empty() || per_client == 0 {
        return Err(Error::Config("synthesis needs at least one upload and per_client >= 1".into()));
    }
    let mut parts = Vec::with_capacity(uploads.len());
    let mut labels = Vec::new();
    let mut source = Vec::new();
    for up in uploads {
        let id = up.client_id;
        let mut rng = rng_for(sampler.seed, &format!("synth/client{id}/labels"));
        let ys = sample_labels(&up.label_histogram, per_client, &mut rng)?;
        let net = up.flow()?;
        let shape = net.feature_shape();
        let generator = up.generator()?;
        let ddpm = up.ddpm_config()?;
        for (c, chunk) in ys.chunks(SYNTH_CHUNK).enumerate() {
            let seed = derive_seed(sampler.seed, &format!("synth/client{id}/noise{c}"));
            let z = match generator {
                GeneratorKind::Rfm => sample_features(&net, chunk, shape, &SamplerConfig { seed, ..sampler.clone() })?,
                GeneratorKind::Ddpm => ddpm_sample(&net, chunk, shape, &DdpmConfig { seed, clamp_output: true, ..ddpm.clone() })?,
            };
            parts.push(z);
        }
        labels.extend(ys);
        source.extend(std::iter::repeat_n(id, per_client));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(SyntheticFeatureSet {
        features: Tensor::stack_rows(&refs)?,
        labels,
        source_client: source,
    })
}

/// Parameter-averaged client classifiers.
#[derive(Clone, Debug)]
pub struct TeacherEnsemble {
    pub model: ClassifierModel,
    pub tap_layer: usize,
}

/// Unweighted mean, or weighted by uploaded sample counts when `by_size`.
pub fn average_teachers(uploads: &[ClientUpload], by_size: bool) -> Result<TeacherEnsemble> {
    let models = uploads.iter().map(ClientUpload::classifier).collect::<Result<Vec<_>>>()?;
    let first = models.first().ok_or_else(|| Error::Config("no uploads to average".into()))?;
    if let Some(m) = models.iter().find(|m| m.architecture_id() != first.architecture_id()) {
        return Err(Error::Config(format!(
            "teacher architectures differ: `{}` vs `{}`",
            first.architecture_id(),
            m.architecture_id()
        )));
    }
    let weights: Vec<f64> = if by_size {
        let sizes: Vec<f64> = uploads.iter().map(|u| u.label_histogram.iter().sum::<usize>() as f64).collect();
        let total: f64 = sizes.iter().sum();
        if total == 0.0 {
            return Err(Error::Data("uploads report no samples".into()));
        }
        sizes.iter().map(|s| s / total).collect()
    } else {
        vec![1.0 / models.len() as f64; models.len()]
    };
    let stores: Vec<_> = models.iter().map(|m| m.store()).collect();
    let mean = weighted_mean(&stores, &weights)?;
    let mut model = first.clone();
    model.store_mut().copy_from(&mean)?;
    Ok(TeacherEnsemble {
        tap_layer: model.tap_layer(),
        model,
    })
}

fn finite(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contain non-finite values")))
    }
}

/// Batch-mean `KL(softmax(teacher / T) || softmax(student / T))`, without `T^2` scaling.
pub fn kl_logit_loss(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<f64> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config("temperature must be positive".into()));
    }
    finite(student, "student logits")?;
    finite(teacher, "teacher logits")?;
    kl_value(student, teacher, temperature)
}

/// Mean squared difference between two tap maps.
pub fn feature_align_loss(student_tap: &Tensor, teacher_tap: &Tensor) -> Result<f64> {
    student_tap.expect_shape(teacher_tap.shape())?;
    Ok(student_tap.zip_map(teacher_tap, |a, b| (a - b) * (a - b))?.mean())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Must match the classifier's tap layer.
    #[serde(default = "default_tap")]
    pub tap_layer: usize,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Multiply the KL term by `T^2`.
    #[serde(default = "default_true")]
    pub kl_t2_scaling: bool,
    /// Weight teachers by client sample count instead of `1/K`.
    #[serde(default)]
    pub weighted_teacher: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_alpha() -> f64 {
    0.5
}
fn default_beta() -> f64 {
    0.1
}
fn default_temperature() -> f64 {
    3.0
}
fn default_tap() -> usize {
    3
}
fn default_batch() -> usize {
    32
}
fn default_true() -> bool {
    true
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    fn kl_scale(&self) -> f64 {
        if self.kl_t2_scaling {
            self.temperature * self.temperature
        } else {
            1.0
        }
    }
}

/// Loss components as they enter the total; `kl` already carries any `T^2` factor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DlkdLosses {
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
    pub feat: f64,
}

/// Differentiable total with its components. Terms with zero weight are skipped and reported as 0.
pub fn dlkd_graph<'g>(
    student: &ClassifierModel,
    p: &Bound<'g>,
    teacher: &ClassifierModel,
    graph: &'g Graph,
    z: &Tensor,
    y: &[usize],
    cfg: &DistillConfig,
) -> Result<(Var<'g>, DlkdLosses)> {
    let out = student.forward(p, graph.constant(z.clone()))?;
    let ce = out.logits.cross_entropy(y)?;
    let mut total = ce.scale(1.0 - cfg.alpha);
    let mut parts = DlkdLosses {
        ce: ce.item(),
        ..DlkdLosses::default()
    };
    if cfg.alpha > 0.0 || cfg.beta > 0.0 {
        let tp = teacher.store().bind_frozen(graph);
        let t_out = teacher.forward(&tp, graph.constant(z.clone()))?;
        if cfg.alpha > 0.0 {
            let kl = out.logits.kl_div(t_out.logits, cfg.temperature, cfg.kl_scale())?;
            parts.kl = kl.item();
            total = total.add(kl.scale(cfg.alpha))?;
        }
        if cfg.beta > 0.0 {
            let feat = out.tap.mse(t_out.tap)?;
            parts.feat = feat.item();
            total = total.add(feat.scale(cfg.beta))?;
        }
    }
    parts.total = total.item();
    Ok((total, parts))
}

/// Evaluate `(total, ce, kl, feat)` on one batch.
pub fn dlkd_total_loss(student: &ClassifierModel, teacher: &ClassifierModel, z: &Tensor, y: &[usize], cfg: &DistillConfig) -> Result<DlkdLosses> {
    cfg.validate()?;
    let g = Graph::new();
    let p = student.store().bind_frozen(&g);
    Ok(dlkd_graph(student, &p, teacher, &g, z, y, cfg)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ce: f64,
    pub kl: f64,
    pub feat: f64,
    pub total: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GlobalRun {
    pub student: ClassifierModel,
    pub teacher: TeacherEnsemble,
    pub metrics: Vec<EpochMetrics>,
}

pub type Evaluator<'a> = &'a dyn Fn(&ClassifierModel) -> Result<f64>;

/// Build the averaged teacher and distil `student` on the synthetic set.
pub fn train_global(
    uploads: &[ClientUpload],
    d_syn: &SyntheticFeatureSet,
    cfg: &DistillConfig,
    mut student: ClassifierModel,
    evaluator: Option<Evaluator<'_>>,
) -> Result<GlobalRun> {
    cfg.validate()?;
    if d_syn.is_empty() {
        return Err(Error::Config("synthetic set is empty".into()));
    }
    let teacher = average_teachers(uploads, cfg.weighted_teacher)?;
    teacher.model.store().check_layout(student.store())?;
    if cfg.tap_layer != student.tap_layer() {
        return Err(Error::Config(format!(
            "distillation tap layer {} differs from the classifier's {}",
            cfg.tap_layer,
            student.tap_layer()
        )));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, student.store());
    let mut rng = rng_for(cfg.seed, "distill/batches");
    let n = d_syn.len();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sums = DlkdLosses::default();
        minibatch_epochs(n, 1, cfg.batch_size, &mut rng, |batch| {
            let z = d_syn.features.select(batch);
            let y: Vec<usize> = batch.iter().map(|&i| d_syn.labels[i]).collect();
            let g = Graph::new();
            let p = student.store().bind(&g);
            let (total, parts) = dlkd_graph(&student, &p, &teacher.model, &g, &z, &y, cfg)?;
            let grads = p.grads(&g.backward(total)?);
            opt.step(student.store_mut(), &grads);
            let w = batch.len() as f64;
            sums.total += parts.total * w;
            sums.ce += parts.ce * w;
            sums.kl += parts.kl * w;
            sums.feat += parts.feat * w;
            Ok(parts.total)
        })?;
        let eval_acc = evaluator.map(|f| f(&student)).transpose()?;
        let n = n as f64;
        metrics.push(EpochMetrics {
            epoch,
            ce: sums.ce / n,
            kl: sums.kl / n,
            feat: sums.feat / n,
            total: sums.total / n,
            eval_acc,
        });
    }
    Ok(GlobalRun { student, teacher, metrics })
}

/// Per-client and pooled accuracy, each client's test images passed through its own featurizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_client: Vec<f64>,
    pub pooled: f64,
}

pub fn evaluate_clients(model: &ClassifierModel, clients: &[(&Featurizer, &ClientDataset)]) -> Result<EvalReport> {
    let mut per_client = Vec::with_capacity(clients.len());
    let (mut hits, mut total) = (0.0, 0usize);
    for (f, test) in clients {
        let feats = f.features(test.data.images())?;
        let acc = model.accuracy(&feats, test.data.labels())?;
        hits += acc * test.data.len() as f64;
        total += test.data.len();
        per_client.push(acc);
    }
    if total == 0 {
        return Err(Error::Data("no test samples".into()));
    }
    Ok(EvalReport {
        per_client,
        pooled: hits / total as f64,
    })
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
