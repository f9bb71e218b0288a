//! Network roles: feature extractor, classifier with an intermediate tap,
//! class-conditioned velocity field, and feature decoder.
//!
//! Every network owns a [`ParamStore`] plus the configuration needed to
//! rebuild it, so checkpoints can be restored without side channels. All
//! forward passes accept batches laid out as `[B, C, H, W]`.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{sinusoidal_embedding, Conv2d, ConvTranspose2d, LayerNorm, Linear};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// A network that can be rebuilt from its configuration and a parameter store.
pub trait Network: Sized {
    type Config: Clone + Serialize + DeserializeOwned;

    fn build(config: &Self::Config, seed: u64) -> Result<Self>;
    fn config(&self) -> &Self::Config;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    /// Identifier checked when loading parameters.
    fn architecture_id(&self) -> String;
}

fn shape_of(image_shape: [usize; 3]) -> String {
    format!("{}x{}x{}", image_shape[0], image_shape[1], image_shape[2])
}

fn batched(x: &Tensor, item: [usize; 3]) -> Result<Tensor> {
    match x.shape().len() {
        3 if x.shape() == item => x.clone().reshape(&[1, item[0], item[1], item[2]]),
        4 if x.item_shape() == item => Ok(x.clone()),
        _ => Err(Error::Shape(format!(
            "expected [B, {}, {}, {}] input, got {:?}",
            item[0],
            item[1],
            item[2],
            x.shape()
        ))),
    }
}

// ---------------------------------------------------------------------------
// Feature extractor

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub image_shape: [usize; 3],
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_kernel() -> usize {
    3
}

/// One channel-preserving same-padded convolution followed by `tanh`.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    config: ExtractorConfig,
    store: ParamStore,
    conv: Conv2d,
}

impl Network for FeatureExtractor {
    type Config = ExtractorConfig;

    fn build(config: &ExtractorConfig, seed: u64) -> Result<Self> {
        if config.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "extractor kernel must be odd for same padding, got {}",
                config.kernel
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.image_shape[0];
        let conv = Conv2d::new(&mut store, "extractor.conv", c, c, config.kernel, 1, config.kernel / 2, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            conv,
        })
    }

    fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn architecture_id(&self) -> String {
        format!("extractor/conv{}-tanh/{}", self.config.kernel, shape_of(self.config.image_shape))
    }
}

impl FeatureExtractor {
    pub fn forward<'g>(&self, p: &Bound<'g>, images: Var<'g>) -> Result<Var<'g>> {
        Ok(self.conv.forward(p, images)?.tanh())
    }

    /// `tanh(conv(images))` for a single image or a batch.
    pub fn extract(&self, images: &Tensor) -> Result<Tensor> {
        let x = batched(images, self.config.image_shape)?;
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let z = self.forward(&p, g.constant(x))?;
        let out = (*z.value()).clone();
        if images.shape().len() == 3 {
            return out.reshape(images.shape());
        }
        Ok(out)
    }

    pub fn conv_weight_mut(&mut self) -> &mut Tensor {
        self.store.get_mut(self.conv.w)
    }

    pub fn conv_bias_mut(&mut self) -> &mut Tensor {
        self.store.get_mut(self.conv.b)
    }
}

// ---------------------------------------------------------------------------
// Classifier

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierArch {
    /// Three convolutional blocks and a linear head.
    #[default]
    SmallCnn,
    /// Residual 18-layer topology without normalisation layers.
    Resnet18,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    #[serde(default)]
    pub arch: ClassifierArch,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Channel widths of the three convolutional blocks (small CNN) or the base width (ResNet, first entry).
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_tap")]
    pub tap_layer: usize,
}

fn default_widths() -> Vec<usize> {
    vec![8, 16, 16]
}

fn default_tap() -> usize {
    3
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.conv1.forward(p, x)?.relu();
        let h = self.conv2.forward(p, h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(p, x)?,
            None => x,
        };
        Ok(h.add(skip)?.relu())
    }
}

#[derive(Clone, Debug)]
enum ClassifierBody {
    SmallCnn {
        convs: Vec<Conv2d>,
    },
    Resnet {
        stem: Conv2d,
        stages: Vec<Vec<ResBlock>>,
    },
}

#[derive(Clone, Debug)]
pub struct ClassifierModel {
    config: ClassifierConfig,
    store: ParamStore,
    body: ClassifierBody,
    head: Linear,
}

/// Logits and the tapped intermediate activation of one forward pass.
pub struct ClassifierOutput<'g> {
    pub logits: Var<'g>,
    pub tap: Var<'g>,
}

impl Network for ClassifierModel {
    type Config = ClassifierConfig;

    fn build(config: &ClassifierConfig, seed: u64) -> Result<Self> {
        let [c, h, w] = config.input_shape;
        if config.num_classes < 1 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (body, head) = match config.arch {
            ClassifierArch::SmallCnn => {
                if config.widths.len() != 3 {
                    return Err(Error::Config("small-cnn needs exactly three block widths".into()));
                }
                if !(1..=3).contains(&config.tap_layer) {
                    return Err(Error::Config(format!(
                        "tap_layer {} invalid for small-cnn (blocks 1..=3)",
                        config.tap_layer
                    )));
                }
                let mut convs = Vec::new();
                let mut in_ch = c;
                let (mut hh, mut ww) = (h, w);
                for (i, &width) in config.widths.iter().enumerate() {
                    let stride = if i == 0 { 1 } else { 2 };
                    convs.push(Conv2d::new(&mut store, &format!("block{}.conv", i + 1), in_ch, width, 3, stride, 1, &mut rng));
                    if stride == 2 {
                        hh = (hh + 2 - 3) / 2 + 1;
                        ww = (ww + 2 - 3) / 2 + 1;
                    }
                    in_ch = width;
                }
                let head = Linear::new(&mut store, "block4.fc", in_ch * hh * ww, config.num_classes, &mut rng);
                (ClassifierBody::SmallCnn { convs }, head)
            }
            ClassifierArch::Resnet18 => {
                if !(1..=4).contains(&config.tap_layer) {
                    return Err(Error::Config(format!(
                        "tap_layer {} invalid for resnet18 (stages 1..=4)",
                        config.tap_layer
                    )));
                }
                let base = *config
                    .widths
                    .first()
                    .ok_or_else(|| Error::Config("resnet18 needs a base width".into()))?;
                let stem = Conv2d::new(&mut store, "stem.conv", c, base, 3, 1, 1, &mut rng);
                let mut stages = Vec::new();
                let mut in_ch = base;
                for s in 0..4 {
                    let out_ch = base << s;
                    let stride = if s == 0 { 1 } else { 2 };
                    let mut blocks = Vec::new();
                    for b in 0..2 {
                        let st = if b == 0 { stride } else { 1 };
                        let name = format!("layer{}.{}", s + 1, b);
                        let conv1 = Conv2d::new(&mut store, &format!("{name}.conv1"), in_ch, out_ch, 3, st, 1, &mut rng);
                        let conv2 = Conv2d::new(&mut store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, &mut rng);
                        let shortcut = (st != 1 || in_ch != out_ch)
                            .then(|| Conv2d::new(&mut store, &format!("{name}.shortcut"), in_ch, out_ch, 1, st, 0, &mut rng));
                        blocks.push(ResBlock { conv1, conv2, shortcut });
                        in_ch = out_ch;
                    }
                    stages.push(blocks);
                }
                let head = Linear::new(&mut store, "fc", in_ch, config.num_classes, &mut rng);
                (ClassifierBody::Resnet { stem, stages }, head)
            }
        };
        Ok(Self {
            config: config.clone(),
            store,
            body,
            head,
        })
    }

    fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn architecture_id(&self) -> String {
        let arch = match self.config.arch {
            ClassifierArch::SmallCnn => "small-cnn",
            ClassifierArch::Resnet18 => "resnet18",
        };
        let widths: Vec<String> = self.config.widths.iter().map(usize::to_string).collect();
        format!(
            "classifier/{arch}/{}/w{}/k{}/tap{}",
            shape_of(self.config.input_shape),
            widths.join("-"),
            self.config.num_classes,
            self.config.tap_layer
        )
    }
}

impl ClassifierModel {
    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn tap_layer(&self) -> usize {
        self.config.tap_layer
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<ClassifierOutput<'g>> {
        let mut tap = None;
        let features = match &self.body {
            ClassifierBody::SmallCnn { convs } => {
                let mut h = x;
                for (i, conv) in convs.iter().enumerate() {
                    h = conv.forward(p, h)?.relu();
                    if i + 1 == self.config.tap_layer {
                        tap = Some(h);
                    }
                }
                let b = h.shape()[0];
                let n = h.value().item_len();
                h.reshape(&[b, n])?
            }
            ClassifierBody::Resnet { stem, stages } => {
                let mut h = stem.forward(p, x)?.relu();
                for (s, blocks) in stages.iter().enumerate() {
                    for block in blocks {
                        h = block.forward(p, h)?;
                    }
                    if s + 1 == self.config.tap_layer {
                        tap = Some(h);
                    }
                }
                h.mean_spatial()?
            }
        };
        let logits = self.head.forward(p, features)?;
        Ok(ClassifierOutput {
            logits,
            tap: tap.expect("tap layer validated at construction"),
        })
    }

    /// Evaluation-mode forward: `(logits [B, classes], tap [B, ...])`.
    pub fn classify(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = batched(features, self.config.input_shape)?;
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let out = self.forward(&p, g.constant(x))?;
        Ok(((*out.logits.value()).clone(), (*out.tap.value()).clone()))
    }

    /// Predicted classes, evaluated in chunks to bound memory.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(features.batch());
        let idx: Vec<usize> = (0..features.batch()).collect();
        for chunk in idx.chunks(256) {
            let (logits, _) = self.classify(&features.select(chunk))?;
            preds.extend(logits.argmax_rows());
        }
        Ok(preds)
    }

    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::Data("accuracy of an empty set".into()));
        }
        let preds = self.predict(features)?;
        Ok(preds.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
    }

    /// Parameter ids of the final linear layer.
    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.head.w, self.head.b)
    }
}

// ---------------------------------------------------------------------------
// Velocity field

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VelocityArch {
    #[default]
    Mlp,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityConfig {
    #[serde(default)]
    pub arch: VelocityArch,
    pub feature_shape: [usize; 3],
    pub num_classes: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
    /// Hidden layers (MLP) or transformer blocks (attention).
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Patch edge for the attention variant.
    #[serde(default = "default_patch")]
    pub patch: usize,
}

fn default_hidden() -> usize {
    256
}
fn default_time_dim() -> usize {
    32
}
fn default_depth() -> usize {
    2
}
fn default_patch() -> usize {
    4
}

#[derive(Clone, Debug)]
struct AttentionBlock {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
enum VelocityBody {
    Mlp {
        input: Linear,
        hidden: Vec<Linear>,
        output: Linear,
    },
    Attention {
        embed: Linear,
        pos: ParamId,
        blocks: Vec<AttentionBlock>,
        norm: LayerNorm,
        output: Linear,
        patchify: Rc<Vec<usize>>,
        unpatchify: Rc<Vec<usize>>,
        tokens: usize,
        token_dim: usize,
    },
}

/// Class-conditioned map `(z_t, t, y) -> velocity` with the shape of `z_t`.
#[derive(Clone, Debug)]
pub struct VelocityFieldNet {
    config: VelocityConfig,
    store: ParamStore,
    time_proj: Linear,
    label_embed: ParamId,
    body: VelocityBody,
}

impl Network for VelocityFieldNet {
    type Config = VelocityConfig;

    fn build(config: &VelocityConfig, seed: u64) -> Result<Self> {
        let [c, h, w] = config.feature_shape;
        let d = c * h * w;
        if d == 0 || config.hidden == 0 || config.depth == 0 || config.num_classes == 0 {
            return Err(Error::Config("velocity net dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let hid = config.hidden;
        let time_proj = Linear::new(&mut store, "time.proj", config.time_dim, hid, &mut rng);
        let label_embed = store.add("label.embed", Tensor::randn(&mut rng, &[config.num_classes, hid], 0.1));
        let body = match config.arch {
            VelocityArch::Mlp => {
                let input = Linear::new(&mut store, "mlp.in", d, hid, &mut rng);
                let hidden = (1..config.depth)
                    .map(|i| Linear::new(&mut store, &format!("mlp.hidden{i}"), hid, hid, &mut rng))
                    .collect();
                let output = Linear::new(&mut store, "mlp.out", hid, d, &mut rng);
                VelocityBody::Mlp { input, hidden, output }
            }
            VelocityArch::Attention => {
                let p = config.patch;
                if p == 0 || h % p != 0 || w % p != 0 {
                    return Err(Error::Config(format!("patch {p} must divide the feature grid {h}x{w}")));
                }
                let (gh, gw) = (h / p, w / p);
                let tokens = gh * gw;
                let token_dim = c * p * p;
                let mut patchify = Vec::with_capacity(d);
                for ti in 0..gh {
                    for tj in 0..gw {
                        for ch in 0..c {
                            for di in 0..p {
                                for dj in 0..p {
                                    patchify.push(ch * h * w + (ti * p + di) * w + (tj * p + dj));
                                }
                            }
                        }
                    }
                }
                let mut unpatchify = vec![0; d];
                for (pos, &src) in patchify.iter().enumerate() {
                    unpatchify[src] = pos;
                }
                let embed = Linear::new(&mut store, "attn.embed", token_dim, hid, &mut rng);
                let pos = store.add("attn.pos", Tensor::randn(&mut rng, &[tokens, hid], 0.02));
                let blocks = (0..config.depth)
                    .map(|i| {
                        let n = format!("attn.block{i}");
                        AttentionBlock {
                            norm1: LayerNorm::new(&mut store, &format!("{n}.norm1"), hid),
                            q: Linear::new(&mut store, &format!("{n}.q"), hid, hid, &mut rng),
                            k: Linear::new(&mut store, &format!("{n}.k"), hid, hid, &mut rng),
                            v: Linear::new(&mut store, &format!("{n}.v"), hid, hid, &mut rng),
                            proj: Linear::new(&mut store, &format!("{n}.proj"), hid, hid, &mut rng),
                            norm2: LayerNorm::new(&mut store, &format!("{n}.norm2"), hid),
                            fc1: Linear::new(&mut store, &format!("{n}.fc1"), hid, 2 * hid, &mut rng),
                            fc2: Linear::new(&mut store, &format!("{n}.fc2"), 2 * hid, hid, &mut rng),
                        }
                    })
                    .collect();
                let norm = LayerNorm::new(&mut store, "attn.norm", hid);
                let output = Linear::new(&mut store, "attn.out", hid, token_dim, &mut rng);
                VelocityBody::Attention {
                    embed,
                    pos,
                    blocks,
                    norm,
                    output,
                    patchify: Rc::new(patchify),
                    unpatchify: Rc::new(unpatchify),
                    tokens,
                    token_dim,
                }
            }
        };
        Ok(Self {
            config: config.clone(),
            store,
            time_proj,
            label_embed,
            body,
        })
    }

    fn config(&self) -> &VelocityConfig {
        &self.config
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn architecture_id(&self) -> String {
        let c = &self.config;
        let arch = match c.arch {
            VelocityArch::Mlp => "mlp".to_string(),
            VelocityArch::Attention => format!("attention-p{}", c.patch),
        };
        format!(
            "velocity/{arch}/{}/k{}/h{}/t{}/d{}",
            shape_of(c.feature_shape),
            c.num_classes,
            c.hidden,
            c.time_dim,
            c.depth
        )
    }
}

impl VelocityFieldNet {
    pub fn feature_shape(&self) -> [usize; 3] {
        self.config.feature_shape
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Velocity for a batch `z: [B, C, H, W]` at per-sample times and labels.
    pub fn forward<'g>(&self, p: &Bound<'g>, z: Var<'g>, t: &[f64], y: &[usize]) -> Result<Var<'g>> {
        let g = z.graph();
        let shape = z.shape();
        let b = shape[0];
        if shape[1..] != self.config.feature_shape[..] {
            return Err(Error::Shape(format!(
                "velocity net expects features {:?}, got {:?}",
                self.config.feature_shape, shape
            )));
        }
        if t.len() != b || y.len() != b {
            return Err(Error::Shape(format!("{b} samples need {b} times and labels")));
        }
        let temb = g.constant(sinusoidal_embedding(t, self.config.time_dim));
        let cond = self.time_proj.forward(p, temb)?.silu().add(p[self.label_embed].embedding(y)?)?;
        let hid = self.config.hidden;
        match &self.body {
            VelocityBody::Mlp { input, hidden, output } => {
                let d = z.value().item_len();
                let mut h = input.forward(p, z.reshape(&[b, d])?)?.add(cond)?.silu();
                for layer in hidden {
                    h = layer.forward(p, h)?.add(cond)?.silu();
                }
                output.forward(p, h)?.reshape(&shape)
            }
            VelocityBody::Attention {
                embed,
                pos,
                blocks,
                norm,
                output,
                patchify,
                unpatchify,
                tokens,
                token_dim,
            } => {
                let (tk, td) = (*tokens, *token_dim);
                let d = tk * td;
                let gather_idx: Vec<usize> = (0..b).flat_map(|i| patchify.iter().map(move |&j| i * d + j)).collect();
                let x = z.gather(Rc::new(gather_idx), &[b, tk, td])?;
                let cond_idx: Vec<usize> = (0..b).flat_map(|i| (0..tk).flat_map(move |_| (0..hid).map(move |j| i * hid + j))).collect();
                let cond_tok = cond.gather(Rc::new(cond_idx), &[b, tk, hid])?;
                let mut h = embed.forward(p, x)?.add_broadcast(p[*pos])?.add(cond_tok)?;
                let scale = 1.0 / (hid as f64).sqrt();
                for blk in blocks {
                    let n = blk.norm1.forward(p, h)?;
                    let q = blk.q.forward(p, n)?;
                    let k = blk.k.forward(p, n)?;
                    let v = blk.v.forward(p, n)?;
                    let att = q.batch_matmul(k, true)?.scale(scale).softmax();
                    let a = blk.proj.forward(p, att.batch_matmul(v, false)?)?;
                    h = h.add(a)?;
                    let n = blk.norm2.forward(p, h)?;
                    let m = blk.fc2.forward(p, blk.fc1.forward(p, n)?.silu())?;
                    h = h.add(m)?;
                }
                let out = output.forward(p, norm.forward(p, h)?)?;
                let inv_idx: Vec<usize> = (0..b).flat_map(|i| unpatchify.iter().map(move |&j| i * d + j)).collect();
                out.gather(Rc::new(inv_idx), &shape)
            }
        }
    }
}

/// Anything that can be queried for a velocity.
pub trait VelocityField {
    fn velocity(&self, z: &Tensor, t: &[f64], y: &[usize]) -> Result<Tensor>;
}

impl VelocityField for VelocityFieldNet {
    fn velocity(&self, z: &Tensor, t: &[f64], y: &[usize]) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let v = self.forward(&p, g.constant(z.clone()), t, y)?;
        Ok((*v.value()).clone())
    }
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, &[f64], &[usize]) -> Tensor,
{
    fn velocity(&self, z: &Tensor, t: &[f64], y: &[usize]) -> Result<Tensor> {
        Ok(self(z, t, y))
    }
}

// ---------------------------------------------------------------------------
// Feature decoder

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub image_shape: [usize; 3],
    #[serde(default = "default_decoder_hidden")]
    pub hidden: usize,
}

fn default_decoder_hidden() -> usize {
    16
}

/// Transposed-convolution stack mapping features back to `[0, 1]` images.
#[derive(Clone, Debug)]
pub struct FeatureDecoder {
    config: DecoderConfig,
    store: ParamStore,
    layers: Vec<ConvTranspose2d>,
}

impl Network for FeatureDecoder {
    type Config = DecoderConfig;

    fn build(config: &DecoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.image_shape[0];
        let h = config.hidden;
        let layers = vec![
            ConvTranspose2d::new(&mut store, "decoder.up1", c, h, 3, 1, 1, &mut rng),
            ConvTranspose2d::new(&mut store, "decoder.up2", h, h, 3, 1, 1, &mut rng),
            ConvTranspose2d::new(&mut store, "decoder.out", h, c, 3, 1, 1, &mut rng),
        ];
        Ok(Self {
            config: config.clone(),
            store,
            layers,
        })
    }

    fn config(&self) -> &DecoderConfig {
        &self.config
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn architecture_id(&self) -> String {
        format!("decoder/convt3x3/{}/h{}", shape_of(self.config.image_shape), self.config.hidden)
    }
}

impl FeatureDecoder {
    pub fn forward<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Result<Var<'g>> {
        let last = self.layers.len() - 1;
        let mut h = z;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, h)?;
            h = if i == last { h.sigmoid() } else { h.relu() };
        }
        Ok(h)
    }

    pub fn decode(&self, features: &Tensor) -> Result<Tensor> {
        let x = batched(features, self.config.image_shape)?;
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let out = (*self.forward(&p, g.constant(x))?.value()).clone();
        if features.shape().len() == 3 {
            return out.reshape(features.shape());
        }
        Ok(out)
    }
}
