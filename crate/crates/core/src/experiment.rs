//! End-to-end experiment orchestration.
//!
//! A run is described by one TOML file. Every stage reads what earlier
//! stages wrote into the run directory, so the server side only ever sees
//! the client upload files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{pool, run_fedavg, train_centralized, pixel_accuracy, write_curve_csv, FedAvgConfig, FedAvgRun};
use crate::checkpoint::Checkpoint;
use crate::client::{run_client, train_client_flow, ClientModels, ClientRun, ClientTrainConfig, ClientUpload, Featurizer, GeneratorKind};
use crate::data::{make_synthetic_corpus, shard_partition, ClientDataset, LabeledImageSet, PartitionFile, PartitionSpec};
use crate::error::{Error, Result};
use crate::flow::{ddpm_sample, sample_features, DdpmConfig, SamplerConfig};
use crate::nets::{ClassifierArch, ClassifierConfig, ClassifierModel, ExtractorConfig, FeatureExtractor, Network, VelocityArch, VelocityConfig, VelocityFieldNet};
use crate::params::OptimizerKind;
use crate::privacy::{compare_pipelines, signed_to_unit, train_decoder, write_report, DecoderTrainConfig, PipelineComparison, PrivacyConfig};
use crate::seed::{derive_seed, rng_for};
use crate::server::{evaluate_clients, sample_labels, synthesize_dataset, train_global, write_jsonl, DistillConfig, EpochMetrics, EvalReport, GlobalRun, SyntheticFeatureSet};
use crate::tensor::Tensor;
use crate::timing::{timing_report, TimingReport};
use crate::viz::{centroid_separation, emit_gallery, emit_loss_curves, emit_tsne, Embedding, GalleryLayout, TsneConfig};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_classes: usize,
    /// Samples per class for the generated corpus.
    #[serde(default)]
    pub per_class: usize,
    pub image_shape: [usize; 3],
    /// Load an exported corpus instead of generating one.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_kernel")]
    pub extractor_kernel: usize,
    #[serde(default)]
    pub classifier_arch: ClassifierArch,
    #[serde(default = "default_widths")]
    pub classifier_widths: Vec<usize>,
    #[serde(default)]
    pub flow_arch: VelocityArch,
    #[serde(default = "default_flow_hidden")]
    pub flow_hidden: usize,
    #[serde(default = "default_time_dim")]
    pub flow_time_dim: usize,
    #[serde(default = "default_flow_depth")]
    pub flow_depth: usize,
    #[serde(default = "default_patch")]
    pub flow_patch: usize,
}

fn default_kernel() -> usize {
    3
}
fn default_widths() -> Vec<usize> {
    vec![8, 16, 16]
}
fn default_flow_hidden() -> usize {
    256
}
fn default_time_dim() -> usize {
    32
}
fn default_flow_depth() -> usize {
    2
}
fn default_patch() -> usize {
    4
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            extractor_kernel: default_kernel(),
            classifier_arch: ClassifierArch::default(),
            classifier_widths: default_widths(),
            flow_arch: VelocityArch::default(),
            flow_hidden: default_flow_hidden(),
            flow_time_dim: default_time_dim(),
            flow_depth: default_flow_depth(),
            flow_patch: default_patch(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    #[serde(default = "default_true")]
    pub use_dlkd: bool,
    #[serde(default = "default_true")]
    pub use_feature_align: bool,
    #[serde(default = "default_true")]
    pub use_feature_extractor: bool,
    #[serde(default)]
    pub generator: GeneratorKind,
}

fn default_true() -> bool {
    true
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_dlkd: true,
            use_feature_align: true,
            use_feature_extractor: true,
            generator: GeneratorKind::Rfm,
        }
    }
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.use_feature_align && !self.use_dlkd {
            return Err(Error::Config("use_feature_align requires use_dlkd".into()));
        }
        Ok(())
    }

    /// The full method.
    pub fn full() -> Self {
        Self::default()
    }

    /// Logit distillation only.
    pub fn without_alignment() -> Self {
        Self {
            use_feature_align: false,
            ..Self::default()
        }
    }

    /// Cross-entropy on the synthetic set only.
    pub fn without_dlkd() -> Self {
        Self {
            use_dlkd: false,
            use_feature_align: false,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub per_client: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentralizedConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

fn default_batch() -> usize {
    32
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Every sub-config seed is derived from this one.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Held-out share of every client's partition.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub corpus: CorpusSpec,
    pub partition: PartitionSpec,
    /// Use stored client index lists instead of shard partitioning.
    #[serde(default)]
    pub partition_file: Option<PathBuf>,
    #[serde(default)]
    pub models: ModelSpec,
    pub client: ClientTrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub synthesis: SynthesisConfig,
    pub distill: DistillConfig,
    #[serde(default)]
    pub ablation: AblationFlags,
    #[serde(default)]
    pub ddpm: DdpmConfig,
    #[serde(default)]
    pub fedavg: Option<FedAvgConfig>,
    #[serde(default)]
    pub centralized: Option<CentralizedConfig>,
    #[serde(default)]
    pub privacy: PrivacyConfig,
    #[serde(default)]
    pub decoder: DecoderTrainConfig,
}

/// Parse TOML text, apply `a.b.c=value` overrides, and resolve derived seeds.
pub fn parse_config(text: &str, origin: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let merged = toml::to_string(&table).map_err(|e| Error::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    let de = toml::Deserializer::parse(&merged).map_err(|e| Error::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: e.path().to_string(),
        message: e.inner().message().to_string(),
    })?;
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, &path.display().to_string(), overrides)
}

/// Set `key.path = value`; the value is read as a TOML literal, or as a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let bad = |m: &str| Error::Parse {
        path: assignment.to_string(),
        message: m.to_string(),
    };
    let (key, raw) = assignment.split_once('=').ok_or_else(|| bad("expected key.path=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad("empty key segment"));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| bad(&format!("`{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Derived seed kept within TOML's signed integer range.
fn config_seed(seed: u64, label: &str) -> u64 {
    derive_seed(seed, label) >> 1
}

impl ExperimentConfig {
    /// Copy with every sub-config seed derived from the global seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let sub = |label: &str| config_seed(self.seed, label);
        c.partition.seed = sub("partition");
        c.client.seed = sub("client");
        c.sampler.seed = sub("sampler");
        c.distill.seed = sub("distill");
        c.ddpm.seed = sub("ddpm");
        c.privacy.seed = sub("privacy");
        c.decoder.seed = sub("decoder");
        if let Some(f) = c.fedavg.as_mut() {
            f.seed = sub("fedavg");
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        self.partition.validate()?;
        self.client.validate()?;
        self.sampler.validate()?;
        self.distill.validate()?;
        if let Some(f) = &self.fedavg {
            f.validate()?;
        }
        if let Some(c) = &self.centralized {
            if !(c.learning_rate > 0.0 && c.learning_rate.is_finite()) || c.batch_size == 0 {
                return Err(Error::Config("centralized needs a positive learning_rate and batch_size".into()));
            }
        }
        self.privacy.validate()?;
        if self.ablation.generator == GeneratorKind::Ddpm {
            self.ddpm.validate()?;
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in a signed 64-bit integer".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test_fraction must be in [0, 1), got {}", self.test_fraction)));
        }
        if self.corpus.num_classes < 2 {
            return Err(Error::Config("the corpus needs at least two classes".into()));
        }
        if self.corpus.path.is_none() && self.corpus.per_class == 0 {
            return Err(Error::Config("corpus.per_class must be at least 1 when no corpus path is given".into()));
        }
        if self.synthesis.per_client == 0 {
            return Err(Error::Config("synthesis.per_client must be at least 1".into()));
        }
        self.client_models().validate()
    }

    /// Architectures shared by all clients and the server student.
    pub fn client_models(&self) -> ClientModels {
        let shape = self.corpus.image_shape;
        let k = self.corpus.num_classes;
        let m = &self.models;
        ClientModels {
            extractor: ExtractorConfig {
                image_shape: shape,
                kernel: m.extractor_kernel,
            },
            classifier: ClassifierConfig {
                arch: m.classifier_arch,
                input_shape: shape,
                num_classes: k,
                widths: m.classifier_widths.clone(),
                tap_layer: self.distill.tap_layer,
            },
            flow: VelocityConfig {
                arch: m.flow_arch,
                feature_shape: shape,
                num_classes: k,
                hidden: m.flow_hidden,
                time_dim: m.flow_time_dim,
                depth: m.flow_depth,
                patch: m.flow_patch,
            },
            use_feature_extractor: self.ablation.use_feature_extractor,
            generator: self.ablation.generator,
            ddpm: self.ddpm.clone(),
            init_seed: derive_seed(self.seed, "init"),
        }
    }

    /// Distillation weights after the ablation flags: no DLKD zeroes both, no alignment zeroes `beta`.
    pub fn effective_distill(&self) -> DistillConfig {
        let mut d = self.distill.clone();
        if !self.ablation.use_dlkd {
            d.alpha = 0.0;
            d.beta = 0.0;
        } else if !self.ablation.use_feature_align {
            d.beta = 0.0;
        }
        d
    }

    pub fn with_ablation(&self, ablation: AblationFlags) -> Self {
        Self {
            ablation,
            ..self.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }
}

// ---------------------------------------------------------------------------
// In-memory stages

/// Corpus, partition, and per-client train/test splits.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub corpus: LabeledImageSet,
    pub partition: PartitionFile,
    pub train: Vec<ClientDataset>,
    pub test: Vec<ClientDataset>,
}

impl Prepared {
    pub fn pooled_train(&self) -> Result<LabeledImageSet> {
        pool(&self.train.iter().map(|c| &c.data).collect::<Vec<_>>())
    }

    pub fn pooled_test(&self) -> Result<LabeledImageSet> {
        pool(&self.test.iter().map(|c| &c.data).collect::<Vec<_>>())
    }
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<LabeledImageSet> {
    let c = &cfg.corpus;
    let corpus = match &c.path {
        Some(p) => LabeledImageSet::load(p)?,
        None => make_synthetic_corpus(c.num_classes, c.per_class, c.image_shape, derive_seed(cfg.seed, "corpus"))?,
    };
    if corpus.num_classes() != c.num_classes || corpus.image_shape() != c.image_shape {
        return Err(Error::Config(format!(
            "corpus has {} classes of {:?} images, config expects {} of {:?}",
            corpus.num_classes(),
            corpus.image_shape(),
            c.num_classes,
            c.image_shape
        )));
    }
    Ok(corpus)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let corpus = load_corpus(cfg)?;
    let (partition, clients) = match &cfg.partition_file {
        Some(p) => {
            let file = PartitionFile::load(p)?;
            let clients = file.apply(&corpus)?;
            (file, clients)
        }
        None => {
            let clients = shard_partition(&corpus, &cfg.partition)?;
            (PartitionFile::from_clients(&cfg.partition, &clients), clients)
        }
    };
    let mut train = Vec::with_capacity(clients.len());
    let mut test = Vec::with_capacity(clients.len());
    for c in &clients {
        let (tr, te) = c.split(cfg.test_fraction, derive_seed(cfg.seed, &format!("split/client{}", c.client_id)))?;
        train.push(tr);
        test.push(te);
    }
    Ok(Prepared {
        corpus,
        partition,
        train,
        test,
    })
}

pub fn train_clients(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<Vec<ClientRun>> {
    let models = cfg.client_models();
    prepared.train.iter().map(|d| run_client(d, &models, &cfg.client)).collect()
}

pub fn synthesize(cfg: &ExperimentConfig, uploads: &[ClientUpload]) -> Result<SyntheticFeatureSet> {
    synthesize_dataset(uploads, cfg.synthesis.per_client, &cfg.sampler)
}

#[derive(Clone, Debug)]
pub struct Distilled {
    pub global: GlobalRun,
    pub report: EvalReport,
    pub teacher_report: EvalReport,
}

/// Distil from the uploads on `d_syn` and evaluate on every client's test split.
pub fn distill(
    cfg: &ExperimentConfig,
    uploads: &[ClientUpload],
    d_syn: &SyntheticFeatureSet,
    featurizers: &[Featurizer],
    tests: &[ClientDataset],
) -> Result<Distilled> {
    if featurizers.len() != tests.len() {
        return Err(Error::Config("one featurizer per test split is required".into()));
    }
    let pairs: Vec<(&Featurizer, &ClientDataset)> = featurizers.iter().zip(tests).collect();
    let evaluator = |m: &ClassifierModel| evaluate_clients(m, &pairs).map(|r| r.pooled);
    let student = cfg.client_models().initial_classifier()?;
    let global = train_global(uploads, d_syn, &cfg.effective_distill(), student, Some(&evaluator))?;
    let report = evaluate_clients(&global.student, &pairs)?;
    let teacher_report = evaluate_clients(&global.teacher.model, &pairs)?;
    Ok(Distilled {
        global,
        report,
        teacher_report,
    })
}

#[derive(Clone, Debug, Default)]
pub struct BaselineResults {
    pub fedavg: Option<FedAvgRun>,
    pub centralized_accuracy: Option<f64>,
}

/// FedAvg and centralised training on raw pixels, evaluated on the pooled test split.
pub fn run_baselines(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<BaselineResults> {
    let test = prepared.pooled_test()?;
    let init = cfg.client_models().initial_classifier()?;
    let fedavg = match &cfg.fedavg {
        Some(f) => Some(run_fedavg(&prepared.train, &test, f, init.clone())?),
        None => None,
    };
    let centralized_accuracy = match &cfg.centralized {
        Some(c) => {
            let as_fedavg = FedAvgConfig {
                rounds: 1,
                local_epochs: c.epochs,
                batch_size: c.batch_size,
                learning_rate: c.learning_rate,
                optimizer: c.optimizer,
                seed: derive_seed(cfg.seed, "centralized"),
            };
            let model = train_centralized(&prepared.pooled_train()?, c.epochs, &as_fedavg, init)?;
            Some(pixel_accuracy(&model, &test)?)
        }
        None => None,
    };
    Ok(BaselineResults {
        fedavg,
        centralized_accuracy,
    })
}

fn generate(net: &VelocityFieldNet, kind: GeneratorKind, ddpm: &DdpmConfig, labels: &[usize], seed: u64) -> Result<Tensor> {
    let shape = net.feature_shape();
    match kind {
        GeneratorKind::Rfm => sample_features(net, labels, shape, &SamplerConfig { num_steps: 50, clamp_output: true, seed }),
        GeneratorKind::Ddpm => ddpm_sample(net, labels, shape, &DdpmConfig { seed, clamp_output: true, ..ddpm.clone() }),
    }
}

/// Memorisation of a pixel-level generator against the decoded feature-level one.
///
/// For each client a generator of the same architecture is trained on raw
/// pixels, and a decoder is fitted from the client's features back to its
/// images. Both pipelines draw `num_generated` samples per client, which are
/// compared against the pooled training images.
pub fn privacy_pipeline(cfg: &ExperimentConfig, prepared: &Prepared, runs: &[ClientRun]) -> Result<PipelineComparison> {
    let featurizers: Vec<Featurizer> = runs.iter().map(|r| r.featurizer.clone()).collect();
    let flows: Vec<VelocityFieldNet> = runs.iter().map(|r| r.flow.clone()).collect();
    privacy_pipeline_with(cfg, prepared, &featurizers, &flows)
}

/// [`privacy_pipeline`] from each client's featurizer and feature-level generator.
pub fn privacy_pipeline_with(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    featurizers: &[Featurizer],
    flows: &[VelocityFieldNet],
) -> Result<PipelineComparison> {
    if featurizers.len() != prepared.train.len() || flows.len() != prepared.train.len() {
        return Err(Error::Config("one featurizer and one generator per training split are required".into()));
    }
    let pixel_models = ClientModels {
        use_feature_extractor: false,
        ..cfg.client_models()
    };
    let kind = cfg.ablation.generator;
    let n = cfg.privacy.num_generated;
    let (mut pixel_parts, mut feature_parts) = (Vec::new(), Vec::new());
    for ((data, featurizer), flow) in prepared.train.iter().zip(featurizers).zip(flows) {
        let id = data.client_id;
        let mut rng = rng_for(cfg.privacy.seed, &format!("privacy/client{id}/labels"));
        let ys = sample_labels(&data.label_histogram, n, &mut rng)?;

        let pixels = data.data.signed_images();
        let pixel_flow = train_client_flow(id, &pixels, data.data.labels(), &pixel_models, &cfg.client)?.model;
        let seed = derive_seed(cfg.privacy.seed, &format!("privacy/client{id}/pixel"));
        pixel_parts.push(signed_to_unit(&generate(&pixel_flow, kind, &cfg.ddpm, &ys, seed)?));

        let features = featurizer.features(data.data.images())?;
        let dec_cfg = DecoderTrainConfig {
            seed: derive_seed(cfg.decoder.seed, &format!("client{id}")),
            ..cfg.decoder.clone()
        };
        let decoder = train_decoder(&features, data.data.images(), &dec_cfg)?.model;
        let seed = derive_seed(cfg.privacy.seed, &format!("privacy/client{id}/feature"));
        feature_parts.push(decoder.decode(&generate(flow, kind, &cfg.ddpm, &ys, seed)?)?);
    }
    let stack = |parts: &[Tensor]| Tensor::stack_rows(&parts.iter().collect::<Vec<_>>());
    let train = prepared.pooled_train()?;
    compare_pipelines(&stack(&pixel_parts)?, &stack(&feature_parts)?, train.images(), &cfg.privacy)
}

// ---------------------------------------------------------------------------
// Run directory

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn seed(&self) -> PathBuf {
        self.root.join("seed.txt")
    }
    pub fn git_describe(&self) -> PathBuf {
        self.root.join("git_describe.txt")
    }
    pub fn partition(&self) -> PathBuf {
        self.root.join("partition.json")
    }
    /// Client to server messages; nothing else crosses to the server.
    pub fn uploads(&self) -> PathBuf {
        self.root.join("uploads")
    }
    /// Client-local state that never leaves the client.
    pub fn clients(&self) -> PathBuf {
        self.root.join("clients")
    }
    pub fn extractor(&self, client_id: usize) -> PathBuf {
        self.clients().join(format!("client_{client_id}_extractor.ckpt"))
    }
    pub fn client_losses(&self) -> PathBuf {
        self.clients().join("losses.jsonl")
    }
    pub fn synthetic(&self) -> PathBuf {
        self.root.join("synthetic.ckpt")
    }
    pub fn student(&self) -> PathBuf {
        self.root.join("global_student.ckpt")
    }
    pub fn teacher(&self) -> PathBuf {
        self.root.join("teacher.ckpt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
    pub fn error_manifest(&self) -> PathBuf {
        self.root.join("error.json")
    }
    pub fn fedavg_curve(&self) -> PathBuf {
        self.root.join("fedavg_curve.csv")
    }
    pub fn privacy(&self) -> PathBuf {
        self.root.join("privacy.json")
    }
    pub fn baselines(&self) -> PathBuf {
        self.root.join("baselines.json")
    }
    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.json")
    }
    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.uploads(), self.clients(), self.figures()] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }

    /// Config snapshot, seed, and the source revision.
    pub fn write_provenance(&self, cfg: &ExperimentConfig) -> Result<()> {
        self.create()?;
        write_text(&self.config(), &cfg.to_toml()?)?;
        write_text(&self.seed(), &format!("{}\n", cfg.seed))?;
        write_text(&self.git_describe(), &format!("{}\n", git_describe()))
    }

    /// Upload files in client order; each one is a single message.
    pub fn load_uploads(&self) -> Result<Vec<ClientUpload>> {
        let dir = self.uploads();
        let mut uploads = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|e| e == "ckpt") {
                uploads.push(ClientUpload::load(&path)?);
            }
        }
        if uploads.is_empty() {
            return Err(Error::Data(format!("no client uploads in {}", dir.display())));
        }
        uploads.sort_by_key(|u| u.client_id);
        Ok(uploads)
    }

    /// Each client's featurizer, read back from its local state.
    pub fn load_featurizers(&self, cfg: &ExperimentConfig, num_clients: usize) -> Result<Vec<Featurizer>> {
        (0..num_clients)
            .map(|k| {
                if cfg.ablation.use_feature_extractor {
                    Ok(Featurizer::Extractor(Checkpoint::load(&self.extractor(k))?.to_network::<FeatureExtractor>()?))
                } else {
                    Ok(Featurizer::Pixels)
                }
            })
            .collect()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `git describe --always --dirty`, or `unknown` outside a repository.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

// ---------------------------------------------------------------------------
// File-backed stages

pub fn stage_partition(cfg: &ExperimentConfig, dir: &RunDir) -> Result<Prepared> {
    dir.create()?;
    let prepared = prepare(cfg)?;
    prepared.partition.save(&dir.partition())?;
    Ok(prepared)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientLosses {
    pub client_id: usize,
    pub extractor: Vec<f64>,
    pub classifier: Vec<f64>,
    pub flow: Vec<f64>,
}

/// Train every client, write its upload and its local extractor.
pub fn stage_clients(cfg: &ExperimentConfig, dir: &RunDir, prepared: &Prepared) -> Result<Vec<ClientRun>> {
    dir.create()?;
    let runs = train_clients(cfg, prepared)?;
    let mut losses = Vec::with_capacity(runs.len());
    for run in &runs {
        let id = run.upload.client_id;
        run.upload.save_in(&dir.uploads())?;
        if let Some(e) = run.featurizer.extractor() {
            Checkpoint::from_network(e, cfg.client.seed, cfg.client.extractor_epochs as u64)?.save(&dir.extractor(id))?;
        }
        losses.push(ClientLosses {
            client_id: id,
            extractor: run.extractor_losses.clone(),
            classifier: run.classifier_losses.clone(),
            flow: run.flow_losses.clone(),
        });
    }
    write_jsonl(&dir.client_losses(), &losses)?;
    Ok(runs)
}

/// Sample the synthetic set from the upload files.
pub fn stage_synthesize(cfg: &ExperimentConfig, dir: &RunDir) -> Result<SyntheticFeatureSet> {
    let uploads = dir.load_uploads()?;
    let d_syn = synthesize(cfg, &uploads)?;
    d_syn.to_checkpoint()?.save(&dir.synthetic())?;
    Ok(d_syn)
}

/// Distil from upload files and the stored synthetic set; evaluate with each client's local extractor.
pub fn stage_distill(cfg: &ExperimentConfig, dir: &RunDir, prepared: &Prepared) -> Result<Distilled> {
    let uploads = dir.load_uploads()?;
    let d_syn = SyntheticFeatureSet::from_checkpoint(&Checkpoint::load(&dir.synthetic())?)?;
    let featurizers = dir.load_featurizers(cfg, prepared.test.len())?;
    let out = distill(cfg, &uploads, &d_syn, &featurizers, &prepared.test)?;
    let step = cfg.distill.epochs as u64;
    Checkpoint::from_network(&out.global.student, cfg.distill.seed, step)?.save(&dir.student())?;
    Checkpoint::from_network(&out.global.teacher.model, cfg.distill.seed, 0)?.save(&dir.teacher())?;
    write_jsonl(&dir.metrics(), &out.global.metrics)?;
    Ok(out)
}

pub fn stage_baselines(cfg: &ExperimentConfig, dir: &RunDir, prepared: &Prepared) -> Result<BaselineResults> {
    let out = run_baselines(cfg, prepared)?;
    if let Some(f) = &out.fedavg {
        write_curve_csv(&dir.fedavg_curve(), &f.accuracy_curve)?;
    }
    write_text(&dir.baselines(), &serde_json::to_string_pretty(&BaselineReport::from(&out))?)?;
    Ok(out)
}

/// Privacy comparison from the upload files and the clients' stored extractors.
pub fn stage_privacy(cfg: &ExperimentConfig, dir: &RunDir, prepared: &Prepared) -> Result<PipelineComparison> {
    let flows = dir.load_uploads()?.iter().map(|u| u.flow()).collect::<Result<Vec<_>>>()?;
    let featurizers = dir.load_featurizers(cfg, prepared.train.len())?;
    let report = privacy_pipeline_with(cfg, prepared, &featurizers, &flows)?;
    write_report(&dir.privacy(), &report)?;
    Ok(report)
}

/// FedAvg curve and centralised accuracy as written to `baselines.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub fedavg_curve: Option<Vec<f64>>,
    pub centralized_accuracy: Option<f64>,
}

impl From<&BaselineResults> for BaselineReport {
    fn from(b: &BaselineResults) -> Self {
        Self {
            fedavg_curve: b.fedavg.as_ref().map(|f| f.accuracy_curve.clone()),
            centralized_accuracy: b.centralized_accuracy,
        }
    }
}

/// Centroid separation of each t-SNE figure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneReport {
    pub features: f64,
    pub student_before: f64,
    pub student_after: f64,
}

const TSNE_POINTS_PER_CLIENT: usize = 100;

/// Embed client features, and the student's taps before and after distillation, coloured by client.
pub fn stage_tsne(cfg: &ExperimentConfig, dir: &RunDir, prepared: &Prepared) -> Result<TsneReport> {
    dir.create()?;
    let featurizers = dir.load_featurizers(cfg, prepared.train.len())?;
    let mut feats = Vec::with_capacity(featurizers.len());
    for (f, d) in featurizers.iter().zip(&prepared.train) {
        let keep: Vec<usize> = (0..d.data.len().min(TSNE_POINTS_PER_CLIENT)).collect();
        feats.push((d.client_id, f.features(&d.data.images().select(&keep))?));
    }
    let tsne = TsneConfig {
        seed: derive_seed(cfg.seed, "tsne"),
        ..TsneConfig::default()
    };
    let taps = |m: &ClassifierModel| -> Result<Vec<(usize, Tensor)>> { feats.iter().map(|(id, x)| Ok((*id, m.classify(x)?.1))).collect() };
    let before = cfg.client_models().initial_classifier()?;
    let after: ClassifierModel = Checkpoint::load(&dir.student())?.to_network()?;
    let figures = dir.figures();
    let score = |e: Embedding| centroid_separation(&e.points, &e.groups);
    let report = TsneReport {
        features: score(emit_tsne(&feats, "features", &figures.join("tsne_features.png"), &tsne)?)?,
        student_before: score(emit_tsne(&taps(&before)?, "before", &figures.join("tsne_student_before.png"), &tsne)?)?,
        student_after: score(emit_tsne(&taps(&after)?, "after", &figures.join("tsne_student_after.png"), &tsne)?)?,
    };
    write_text(&figures.join("tsne.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Originals, generated features, and their decoded images for the first `count` training images of one client.
pub fn stage_gallery(cfg: &ExperimentConfig, dir: &RunDir, prepared: &Prepared, client: usize, count: usize) -> Result<GalleryLayout> {
    dir.create()?;
    let data = prepared
        .train
        .iter()
        .find(|d| d.client_id == client)
        .ok_or_else(|| Error::Config(format!("no client {client}")))?;
    let upload = dir
        .load_uploads()?
        .into_iter()
        .find(|u| u.client_id == client)
        .ok_or_else(|| Error::Data(format!("no upload from client {client}")))?;
    let featurizer = dir.load_featurizers(cfg, prepared.train.len())?.swap_remove(client);
    let keep: Vec<usize> = (0..data.data.len().min(count.max(1))).collect();
    let original = data.data.images().select(&keep);
    let labels: Vec<usize> = keep.iter().map(|&i| data.data.labels()[i]).collect();
    let seed = derive_seed(cfg.seed, &format!("gallery/client{client}"));
    let synthetic = generate(&upload.flow()?, upload.generator()?, &upload.ddpm_config()?, &labels, seed)?;
    let dec_cfg = DecoderTrainConfig {
        seed: derive_seed(cfg.decoder.seed, &format!("client{client}")),
        ..cfg.decoder.clone()
    };
    let decoder = train_decoder(&featurizer.features(data.data.images())?, data.data.images(), &dec_cfg)?.model;
    let decoded = decoder.decode(&synthetic)?;
    emit_gallery(&original, &synthetic, &decoded, &dir.figures().join("gallery.png"))
}

/// Sampling time of the configured generator at `sampler.num_steps` against DDPM at `ddpm.num_timesteps`, on nets of the configured size.
pub fn stage_timing(cfg: &ExperimentConfig, dir: &RunDir, samples: usize, repeats: usize) -> Result<TimingReport> {
    dir.create()?;
    let models = cfg.client_models();
    let flow = models.initial_flow()?;
    let ddpm_net = VelocityFieldNet::build(&models.flow, derive_seed(models.init_seed, "timing/ddpm"))?;
    let k = models.num_classes();
    let labels: Vec<usize> = (0..samples).map(|i| i % k).collect();
    let report = timing_report(&flow, &ddpm_net, &labels, &cfg.sampler, &cfg.ddpm, repeats)?;
    write_text(&dir.timing(), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Full run

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodFields {
    pub use_dlkd: bool,
    pub use_feature_align: bool,
    pub use_feature_extractor: bool,
    pub generator: GeneratorKind,
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub partition_s: f64,
    pub clients_s: f64,
    pub synthesis_s: f64,
    pub distill_s: f64,
    pub baselines_s: f64,
    pub total_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedAvgSummary {
    pub rounds: usize,
    pub accuracy_curve: Vec<f64>,
    pub final_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: MethodFields,
    pub seed: u64,
    pub num_clients: usize,
    /// Upload files the server read.
    pub messages: usize,
    pub synthetic_samples: usize,
    pub per_client_accuracy: Vec<f64>,
    pub pooled_accuracy: f64,
    pub teacher_per_client_accuracy: Vec<f64>,
    pub teacher_pooled_accuracy: f64,
    pub client_losses: Vec<ClientLosses>,
    pub distill_epochs: Vec<EpochMetrics>,
    pub fedavg: Option<FedAvgSummary>,
    pub centralized_accuracy: Option<f64>,
    pub timing: StageTiming,
}

impl Summary {
    /// Everything except wall-clock timing, for reproducibility checks.
    pub fn metrics(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("summary serialises");
        v.as_object_mut().expect("object").remove("timing");
        v
    }
}

pub fn method_fields(cfg: &ExperimentConfig) -> MethodFields {
    let d = cfg.effective_distill();
    MethodFields {
        use_dlkd: cfg.ablation.use_dlkd,
        use_feature_align: cfg.ablation.use_feature_align,
        use_feature_extractor: cfg.ablation.use_feature_extractor,
        generator: cfg.ablation.generator,
        alpha: d.alpha,
        beta: d.beta,
        temperature: d.temperature,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorManifest {
    pub stage: String,
    pub error: String,
    pub completed_stages: Vec<String>,
}

struct Tracker<'a> {
    dir: &'a RunDir,
    done: Vec<String>,
}

impl Tracker<'_> {
    fn run<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
        let start = Instant::now();
        match f() {
            Ok(v) => {
                self.done.push(stage.to_string());
                Ok((v, start.elapsed().as_secs_f64()))
            }
            Err(e) => {
                let manifest = ErrorManifest {
                    stage: stage.to_string(),
                    error: e.to_string(),
                    completed_stages: self.done.clone(),
                };
                if let Ok(text) = serde_json::to_string_pretty(&manifest) {
                    let _ = std::fs::write(self.dir.error_manifest(), text);
                }
                Err(e)
            }
        }
    }
}

/// Partition, clients, synthesis, distillation, evaluation, and any configured
/// baselines, with every artifact written under `cfg.output_dir`. On failure
/// the artifacts written so far stay in place next to `error.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary> {
    let dir = RunDir::new(&cfg.output_dir);
    cfg.validate()?;
    dir.write_provenance(cfg)?;
    let _ = std::fs::remove_file(dir.error_manifest());
    let start = Instant::now();
    let mut t = Tracker { dir: &dir, done: Vec::new() };
    let (prepared, partition_s) = t.run("partition", || stage_partition(cfg, &dir))?;
    let (runs, clients_s) = t.run("clients", || stage_clients(cfg, &dir, &prepared))?;
    drop(runs);
    let (d_syn, synthesis_s) = t.run("synthesis", || stage_synthesize(cfg, &dir))?;
    let (out, distill_s) = t.run("distillation", || stage_distill(cfg, &dir, &prepared))?;
    let (baselines, baselines_s) = t.run("baselines", || stage_baselines(cfg, &dir, &prepared))?;
    let messages = t.run("message-count", || Ok(dir.load_uploads()?.len()))?.0;
    let client_losses = read_client_losses(&dir.client_losses())?;
    t.run("figures", || write_loss_figure(&dir, &client_losses, &out.global.metrics))?;
    let summary = Summary {
        method: method_fields(cfg),
        seed: cfg.seed,
        num_clients: prepared.train.len(),
        messages,
        synthetic_samples: d_syn.len(),
        per_client_accuracy: out.report.per_client.clone(),
        pooled_accuracy: out.report.pooled,
        teacher_per_client_accuracy: out.teacher_report.per_client.clone(),
        teacher_pooled_accuracy: out.teacher_report.pooled,
        client_losses,
        distill_epochs: out.global.metrics.clone(),
        fedavg: baselines.fedavg.as_ref().map(|f| FedAvgSummary {
            rounds: f.accuracy_curve.len(),
            final_accuracy: f.accuracy_curve.last().copied().unwrap_or(0.0),
            accuracy_curve: f.accuracy_curve.clone(),
        }),
        centralized_accuracy: baselines.centralized_accuracy,
        timing: StageTiming {
            partition_s,
            clients_s,
            synthesis_s,
            distill_s,
            baselines_s,
            total_s: start.elapsed().as_secs_f64(),
        },
    };
    t.run("summary", || {
        write_text(&dir.summary(), &serde_json::to_string_pretty(&summary)?)?;
        Ok(())
    })?;
    Ok(summary)
}

fn write_loss_figure(dir: &RunDir, clients: &[ClientLosses], distill: &[EpochMetrics]) -> Result<()> {
    let mut series = Vec::new();
    for c in clients {
        series.push((format!("client{}/flow", c.client_id), c.flow.clone()));
        series.push((format!("client{}/classifier", c.client_id), c.classifier.clone()));
    }
    series.push(("distill/ce".to_string(), distill.iter().map(|m| m.ce).collect()));
    series.push(("distill/kl".to_string(), distill.iter().map(|m| m.kl).collect()));
    series.push(("distill/feat".to_string(), distill.iter().map(|m| m.feat).collect()));
    emit_loss_curves(&series, &dir.figures().join("losses.png"))
}

fn read_client_losses(path: &Path) -> Result<Vec<ClientLosses>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// A small configuration that runs end to end in seconds.
pub fn toy_config(seed: u64, output_dir: impl Into<PathBuf>) -> ExperimentConfig {
    let text = format!(
        r#"
seed = {seed}
output_dir = "{}"

[corpus]
num_classes = 4
per_class = 24
image_shape = [1, 8, 8]

[partition]
num_clients = 2
shards_per_client = 2

[models]
classifier_widths = [4, 6, 6]
flow_hidden = 32
flow_time_dim = 8

[client]
extractor_epochs = 2
classifier_epochs = 3
flow_epochs = 3
batch_size = 16
learning_rate = 0.05
flow_learning_rate = 0.002
flow_optimizer = "adam"

[sampler]
num_steps = 10

[synthesis]
per_client = 24

[distill]
epochs = 2
batch_size = 16
learning_rate = 0.05
"#,
        output_dir.into().display().to_string().replace('\\', "/")
    );
    parse_config(&text, "toy", &[]).expect("toy config is valid")
}

/// Shipped benchmark configuration text: 10 classes of 16x16 images over 3 non-IID clients.
pub const BENCHMARK_CONFIG: &str = include_str!("../configs/benchmark.toml");

/// The benchmark configuration with the given seed and output directory.
pub fn benchmark_config(seed: u64, output_dir: impl Into<PathBuf>) -> ExperimentConfig {
    let dir = output_dir.into().display().to_string().replace('\\', "/");
    let overrides = [format!("seed={seed}"), format!("output_dir=\"{dir}\"")];
    parse_config(BENCHMARK_CONFIG, "benchmark", &overrides).expect("benchmark config is valid")
}
