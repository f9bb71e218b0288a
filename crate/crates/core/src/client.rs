//! Client-side training and the single upload each client sends.
//!
//! A client first trains its feature extractor jointly with an auxiliary
//! classifier, freezes it, and caches the features of its training images.
//! A teacher classifier and a class-conditioned generator are then trained
//! on those cached features. Only the teacher and the generator leave the
//! client; the extractor stays local.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::autograd::Graph;
use crate::checkpoint::{round_to_f32, Checkpoint, CheckpointMeta};
use crate::data::{histogram, ClientDataset};
use crate::error::{Error, Result};
use crate::flow::{train_ddpm, train_flow, DdpmConfig, FlowTrainConfig};
use crate::nets::{ClassifierConfig, ClassifierModel, ExtractorConfig, FeatureExtractor, Network, VelocityConfig, VelocityFieldNet};
use crate::params::{Optimizer, OptimizerKind};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientTrainConfig {
    #[serde(default)]
    pub extractor_epochs: usize,
    #[serde(default)]
    pub classifier_epochs: usize,
    #[serde(default)]
    pub flow_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Overrides for the generator; fall back to the fields above.
    #[serde(default)]
    pub flow_learning_rate: Option<f64>,
    #[serde(default)]
    pub flow_optimizer: Option<OptimizerKind>,
    /// Weight-averaging decay for the generator; 0 keeps the last iterate.
    #[serde(default)]
    pub flow_ema_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    32
}

impl ClientTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr_ok = |v: f64| v > 0.0 && v.is_finite();
        if !lr_ok(self.learning_rate) || !self.flow_learning_rate.is_none_or(lr_ok) {
            return Err(Error::Config("client learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    #[default]
    Rfm,
    Ddpm,
}

/// Architectures shared by every client, plus the shared initialisation seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientModels {
    pub extractor: ExtractorConfig,
    pub classifier: ClassifierConfig,
    pub flow: VelocityConfig,
    #[serde(default = "default_true")]
    pub use_feature_extractor: bool,
    #[serde(default)]
    pub generator: GeneratorKind,
    #[serde(default)]
    pub ddpm: DdpmConfig,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_true() -> bool {
    true
}

impl ClientModels {
    pub fn validate(&self) -> Result<()> {
        let img = self.extractor.image_shape;
        if self.classifier.input_shape != img || self.flow.feature_shape != img {
            return Err(Error::Config(format!(
                "extractor, classifier and flow must agree on the feature shape {img:?}"
            )));
        }
        if self.classifier.num_classes != self.flow.num_classes {
            return Err(Error::Config("classifier and flow disagree on num_classes".into()));
        }
        if self.generator == GeneratorKind::Ddpm {
            self.ddpm.validate()?;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes
    }

    /// Fresh classifier from the shared initialisation; the server student uses the same one.
    pub fn initial_classifier(&self) -> Result<ClassifierModel> {
        ClassifierModel::build(&self.classifier, derive_seed(self.init_seed, "classifier"))
    }

    pub fn initial_extractor(&self) -> Result<FeatureExtractor> {
        FeatureExtractor::build(&self.extractor, derive_seed(self.init_seed, "extractor"))
    }

    pub fn initial_flow(&self) -> Result<VelocityFieldNet> {
        VelocityFieldNet::build(&self.flow, derive_seed(self.init_seed, "flow"))
    }
}

/// Maps `[0, 1]` images to `[-1, 1]` features, through an extractor or by rescaling.
#[derive(Clone, Debug)]
pub enum Featurizer {
    Extractor(FeatureExtractor),
    Pixels,
}

impl Featurizer {
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let signed = images.map(|v| 2.0 * v - 1.0);
        match self {
            Featurizer::Extractor(e) => e.extract(&signed),
            Featurizer::Pixels => Ok(signed),
        }
    }

    pub fn extractor(&self) -> Option<&FeatureExtractor> {
        match self {
            Featurizer::Extractor(e) => Some(e),
            Featurizer::Pixels => None,
        }
    }
}

/// A trained model and its mean loss per epoch.
#[derive(Clone, Debug)]
pub struct Trained<T> {
    pub model: T,
    pub losses: Vec<f64>,
}

/// Shuffled minibatch epochs; `step` returns the batch-mean loss.
pub(crate) fn minibatch_epochs<R: Rng + ?Sized>(
    n: usize,
    epochs: usize,
    batch_size: usize,
    rng: &mut R,
    mut step: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(batch_size) {
            total += step(batch)? * batch.len() as f64;
        }
        history.push(total / n as f64);
    }
    Ok(history)
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= num_classes) {
        Some(bad) => Err(Error::Data(format!("label {bad} outside {num_classes} classes"))),
        None => Ok(()),
    }
}

/// Joint cross-entropy training of the extractor and an auxiliary classifier.
pub fn train_extractor(
    dataset: &ClientDataset,
    models: &ClientModels,
    cfg: &ClientTrainConfig,
) -> Result<Trained<(FeatureExtractor, ClassifierModel)>> {
    cfg.validate()?;
    if dataset.data.is_empty() {
        return Err(Error::Config("client dataset is empty".into()));
    }
    let mut extractor = models.initial_extractor()?;
    let mut aux = ClassifierModel::build(&models.classifier, derive_seed(models.init_seed, "aux-classifier"))?;
    let images = dataset.data.signed_images();
    let labels = dataset.data.labels();
    let mut opt_e = Optimizer::new(cfg.optimizer, cfg.learning_rate, extractor.store());
    let mut opt_c = Optimizer::new(cfg.optimizer, cfg.learning_rate, aux.store());
    let mut rng = rng_for(cfg.seed, &format!("client{}/extractor", dataset.client_id));
    let losses = minibatch_epochs(labels.len(), cfg.extractor_epochs, cfg.batch_size, &mut rng, |batch| {
        let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let g = Graph::new();
        let pe = extractor.store().bind(&g);
        let pc = aux.store().bind(&g);
        let f = extractor.forward(&pe, g.constant(images.select(batch)))?;
        let loss = aux.forward(&pc, f)?.logits.cross_entropy(&y)?;
        let grads = g.backward(loss)?;
        opt_e.step(extractor.store_mut(), &pe.grads(&grads));
        opt_c.step(aux.store_mut(), &pc.grads(&grads));
        Ok(loss.item())
    })?;
    Ok(Trained {
        model: (extractor, aux),
        losses,
    })
}

/// Cross-entropy training of a classifier on fixed features.
pub fn train_classifier_on(
    mut model: ClassifierModel,
    features: &Tensor,
    labels: &[usize],
    epochs: usize,
    batch_size: usize,
    optimizer: OptimizerKind,
    learning_rate: f64,
    rng: &mut impl Rng,
) -> Result<Trained<ClassifierModel>> {
    if labels.is_empty() || features.batch() != labels.len() {
        return Err(Error::Config(format!(
            "need a non-empty feature set with one label per sample ({} features, {} labels)",
            features.batch(),
            labels.len()
        )));
    }
    check_labels(labels, model.num_classes())?;
    let mut opt = Optimizer::new(optimizer, learning_rate, model.store());
    let losses = minibatch_epochs(labels.len(), epochs, batch_size, rng, |batch| {
        let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let g = Graph::new();
        let p = model.store().bind(&g);
        let loss = model.forward(&p, g.constant(features.select(batch)))?.logits.cross_entropy(&y)?;
        let grads = p.grads(&g.backward(loss)?);
        opt.step(model.store_mut(), &grads);
        Ok(loss.item())
    })?;
    Ok(Trained { model, losses })
}

/// Teacher classifier trained on the client's cached features.
pub fn train_client_classifier(
    client_id: usize,
    features: &Tensor,
    labels: &[usize],
    models: &ClientModels,
    cfg: &ClientTrainConfig,
) -> Result<Trained<ClassifierModel>> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, &format!("client{client_id}/classifier"));
    train_classifier_on(
        models.initial_classifier()?,
        features,
        labels,
        cfg.classifier_epochs,
        cfg.batch_size,
        cfg.optimizer,
        cfg.learning_rate,
        &mut rng,
    )
}

/// Generator trained on the client's cached features with the configured objective.
pub fn train_client_flow(
    client_id: usize,
    features: &Tensor,
    labels: &[usize],
    models: &ClientModels,
    cfg: &ClientTrainConfig,
) -> Result<Trained<VelocityFieldNet>> {
    cfg.validate()?;
    let mut net = models.initial_flow()?;
    let train = FlowTrainConfig {
        epochs: cfg.flow_epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.flow_learning_rate.unwrap_or(cfg.learning_rate),
        optimizer: cfg.flow_optimizer.unwrap_or(cfg.optimizer),
        time_horizon: 1.0,
        ema_decay: cfg.flow_ema_decay,
        seed: derive_seed(cfg.seed, &format!("client{client_id}/flow")),
    };
    let losses = match models.generator {
        GeneratorKind::Rfm => train_flow(&mut net, features, labels, &train)?,
        GeneratorKind::Ddpm => train_ddpm(&mut net, features, labels, &train, &models.ddpm)?,
    };
    Ok(Trained { model: net, losses })
}

/// The one message a client sends to the server.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpload {
    pub client_id: usize,
    pub classifier_weights: Checkpoint,
    pub flow_weights: Checkpoint,
    pub label_histogram: Vec<usize>,
}

const UPLOAD_ID: &str = "client-upload/v1";

impl ClientUpload {
    pub fn classifier(&self) -> Result<ClassifierModel> {
        self.classifier_weights.to_network()
    }

    pub fn flow(&self) -> Result<VelocityFieldNet> {
        self.flow_weights.to_network()
    }

    pub fn generator(&self) -> Result<GeneratorKind> {
        match self.flow_weights.meta.extra.get("generator") {
            None => Ok(GeneratorKind::Rfm),
            Some(v) => Ok(serde_json::from_value(v.clone())?),
        }
    }

    pub fn ddpm_config(&self) -> Result<DdpmConfig> {
        match self.flow_weights.meta.extra.get("ddpm") {
            None => Ok(DdpmConfig::default()),
            Some(v) => Ok(serde_json::from_value(v.clone())?),
        }
    }

    /// Pack into one container with `classifier/` and `flow/` array prefixes.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut extra = Map::new();
        extra.insert("client_id".into(), json!(self.client_id));
        extra.insert("label_histogram".into(), json!(self.label_histogram));
        extra.insert("classifier".into(), serde_json::to_value(&self.classifier_weights.meta)?);
        extra.insert("flow".into(), serde_json::to_value(&self.flow_weights.meta)?);
        let mut meta = CheckpointMeta::new(UPLOAD_ID);
        meta.extra = extra;
        let mut ck = Checkpoint::new(meta);
        for (prefix, part) in [("classifier/", &self.classifier_weights), ("flow/", &self.flow_weights)] {
            for a in &part.arrays {
                let mut a = a.clone();
                a.name = format!("{prefix}{}", a.name);
                ck.arrays.push(a);
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.architecture_id != UPLOAD_ID {
            return Err(Error::Checkpoint(format!("`{}` is not a client upload", ck.meta.architecture_id)));
        }
        let field = |k: &str| -> Result<Value> {
            ck.meta
                .extra
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("upload is missing `{k}`")))
        };
        let part = |prefix: &str, meta: Value| -> Result<Checkpoint> {
            let mut out = Checkpoint::new(serde_json::from_value(meta)?);
            for a in ck.arrays.iter().filter(|a| a.name.starts_with(prefix)) {
                let mut a = a.clone();
                a.name = a.name[prefix.len()..].to_string();
                out.arrays.push(a);
            }
            Ok(out)
        };
        let classifier_weights = part("classifier/", field("classifier")?)?;
        let flow_weights = part("flow/", field("flow")?)?;
        if classifier_weights.arrays.len() + flow_weights.arrays.len() != ck.arrays.len() {
            return Err(Error::Checkpoint("upload holds arrays outside classifier/ and flow/".into()));
        }
        Ok(Self {
            client_id: serde_json::from_value(field("client_id")?)?,
            classifier_weights,
            flow_weights,
            label_histogram: serde_json::from_value(field("label_histogram")?)?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_checkpoint()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::from_bytes(bytes)?)
    }

    pub fn file_name(client_id: usize) -> String {
        format!("client_{client_id}.ckpt")
    }

    /// Write `client_{id}.ckpt` into `dir` and return its path.
    pub fn save_in(&self, dir: &Path) -> Result<std::path::PathBuf> {
        let path = dir.join(Self::file_name(self.client_id));
        self.to_checkpoint()?.save(&path)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Top-level keys of the serialised message.
    pub fn field_names(&self) -> Result<BTreeSet<String>> {
        Ok(self.to_checkpoint()?.meta.extra.keys().cloned().collect())
    }
}

/// Everything a client produced; only `upload` is sent.
#[derive(Clone, Debug)]
pub struct ClientRun {
    pub upload: ClientUpload,
    pub featurizer: Featurizer,
    pub teacher: ClassifierModel,
    pub flow: VelocityFieldNet,
    pub extractor_losses: Vec<f64>,
    pub classifier_losses: Vec<f64>,
    pub flow_losses: Vec<f64>,
}

/// Extractor, teacher, and generator training followed by packaging the upload.
pub fn run_client(dataset: &ClientDataset, models: &ClientModels, cfg: &ClientTrainConfig) -> Result<ClientRun> {
    models.validate()?;
    cfg.validate()?;
    if dataset.data.is_empty() {
        return Err(Error::Config("client dataset is empty".into()));
    }
    check_labels(dataset.data.labels(), models.num_classes())?;
    let (featurizer, extractor_losses) = if models.use_feature_extractor {
        let t = train_extractor(dataset, models, cfg)?;
        let mut e = t.model.0;
        round_to_f32(&mut e);
        (Featurizer::Extractor(e), t.losses)
    } else {
        (Featurizer::Pixels, Vec::new())
    };
    let features = featurizer.features(dataset.data.images())?;
    let labels = dataset.data.labels();
    let id = dataset.client_id;
    let teacher = train_client_classifier(id, &features, labels, models, cfg)?;
    let flow = train_client_flow(id, &features, labels, models, cfg)?;
    let (mut teacher_net, mut flow_net) = (teacher.model, flow.model);
    round_to_f32(&mut teacher_net);
    round_to_f32(&mut flow_net);
    let mut flow_weights = Checkpoint::from_network(&flow_net, cfg.seed, cfg.flow_epochs as u64)?;
    flow_weights.meta.extra.insert("generator".into(), serde_json::to_value(models.generator)?);
    if models.generator == GeneratorKind::Ddpm {
        flow_weights.meta.extra.insert("ddpm".into(), serde_json::to_value(&models.ddpm)?);
    }
    let upload = ClientUpload {
        client_id: id,
        classifier_weights: Checkpoint::from_network(&teacher_net, cfg.seed, cfg.classifier_epochs as u64)?,
        flow_weights,
        label_histogram: histogram(labels, models.num_classes()),
    };
    Ok(ClientRun {
        upload,
        featurizer,
        teacher: teacher_net,
        flow: flow_net,
        extractor_losses,
        classifier_losses: teacher.losses,
        flow_losses: flow.losses,
    })
}

/// Whether any item of `rows` appears in `payload` as contiguous little-endian
/// `f32` or `f64` values.
pub fn payload_contains_rows(payload: &[u8], rows: &Tensor) -> bool {
    (0..rows.batch()).any(|i| {
        let row = rows.row(i);
        let as_f32: Vec<u8> = row.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        let as_f64: Vec<u8> = row.iter().flat_map(|&v| v.to_le_bytes()).collect();
        contains(payload, &as_f32) || contains(payload, &as_f64)
    })
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Whether any array in the upload equals an item of `rows` value for value.
pub fn upload_contains_rows(upload: &ClientUpload, rows: &Tensor) -> bool {
    let arrays = upload.classifier_weights.arrays.iter().chain(&upload.flow_weights.arrays);
    arrays.into_iter().any(|a| {
        a.data.len() == rows.item_len()
            && (0..rows.batch()).any(|i| a.data.iter().zip(rows.row(i)).all(|(&x, &y)| x == y as f32))
    })
}
