//! Labelled image corpora and non-IID shard partitioning.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!("images must be [N, C, H, W], got {:?}", images.shape())));
        }
        if images.batch() != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", images.batch(), labels.len())));
        }
        if labels.is_empty() {
            return Err(Error::Data("image set is empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside {num_classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!("index {bad} outside a set of {}", self.len())));
        }
        Self::new(
            self.images.select(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        histogram(&self.labels, self.num_classes)
    }

    /// Pixels mapped linearly from `[0, 1]` to `[-1, 1]`.
    pub fn signed_images(&self) -> Tensor {
        self.images.map(|v| 2.0 * v - 1.0)
    }

    /// Export as a checkpoint container with `images` and `labels` arrays.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = CheckpointMeta::new(CORPUS_ID);
        meta.extra.insert("num_classes".into(), self.num_classes.into());
        let mut ck = Checkpoint::new(meta);
        ck.push("images", &self.images);
        let labels = Tensor::new(&[self.len()], self.labels.iter().map(|&y| y as f64).collect()).expect("one label per image");
        ck.push("labels", &labels);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.architecture_id != CORPUS_ID {
            return Err(Error::Checkpoint(format!("`{}` is not a corpus", ck.meta.architecture_id)));
        }
        let num_classes = ck
            .meta
            .extra
            .get("num_classes")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("corpus is missing num_classes".into()))? as usize;
        let labels = ck.get("labels")?.data.iter().map(|&y| y as usize).collect();
        Self::new(ck.tensor("images")?, labels, num_classes)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

const CORPUS_ID: &str = "corpus/v1";

pub fn histogram(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for &y in labels {
        h[y] += 1;
    }
    h
}

/// Deterministic corpus in which every class is a distinct structured
/// pattern: a Gaussian blob at a class-specific position plus an oriented
/// stripe texture, perturbed per image by jitter, contrast and pixel noise.
pub fn make_synthetic_corpus(num_classes: usize, per_class: usize, image_shape: [usize; 3], seed: u64) -> Result<LabeledImageSet> {
    let [c, h, w] = image_shape;
    if num_classes == 0 || per_class == 0 {
        return Err(Error::Config("num_classes and per_class must be at least 1".into()));
    }
    if c != 1 && c != 3 {
        return Err(Error::Config(format!("channel count must be 1 or 3, got {c}")));
    }
    if h < 4 || w < 4 {
        return Err(Error::Config(format!("image must be at least 4x4, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_classes * per_class;
    let plane = h * w;
    let mut data = Vec::with_capacity(n * c * plane);
    let mut labels = Vec::with_capacity(n);
    let (hf, wf) = (h as f64, w as f64);
    let radius = 0.28 * hf.min(wf);
    let sigma = 0.14 * hf.min(wf);
    for _ in 0..per_class {
        for k in 0..num_classes {
            let angle = 2.0 * PI * k as f64 / num_classes as f64;
            let cy = hf / 2.0 + radius * angle.sin() + 0.6 * rng.sample::<f64, _>(StandardNormal);
            let cx = wf / 2.0 + radius * angle.cos() + 0.6 * rng.sample::<f64, _>(StandardNormal);
            let amp = rng.random_range(0.55..0.75);
            let freq = 0.6 + 0.5 * (k % 3) as f64;
            let theta = PI * k as f64 / num_classes as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            for ch in 0..c {
                let tint = if c == 1 { 1.0 } else { 0.6 + 0.4 * (((k + ch) % 3) as f64 / 2.0) };
                for y in 0..h {
                    for x in 0..w {
                        let (yf, xf) = (y as f64, x as f64);
                        let d2 = (yf - cy).powi(2) + (xf - cx).powi(2);
                        let blob = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                        let stripe = 0.12 * (freq * (xf * theta.cos() + yf * theta.sin()) + phase).sin();
                        let noise = 0.15 * rng.sample::<f64, _>(StandardNormal);
                        data.push((0.2 + tint * blob + stripe + noise).clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(k);
        }
    }
    LabeledImageSet::new(Tensor::new(&[n, c, h, w], data)?, labels, num_classes)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub num_clients: usize,
    #[serde(default = "default_shards")]
    pub shards_per_client: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_shards() -> usize {
    2
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.shards_per_client == 0 {
            return Err(Error::Config("num_clients and shards_per_client must be at least 1".into()));
        }
        Ok(())
    }

    pub fn total_shards(&self) -> usize {
        self.num_clients * self.shards_per_client
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub data: LabeledImageSet,
    pub label_histogram: Vec<usize>,
    /// Positions of this client's samples in the partitioned corpus.
    pub indices: Vec<usize>,
}

impl ClientDataset {
    pub fn from_indices(client_id: usize, corpus: &LabeledImageSet, indices: Vec<usize>) -> Result<Self> {
        let data = corpus.subset(&indices)?;
        Ok(Self {
            client_id,
            label_histogram: data.label_histogram(),
            data,
            indices,
        })
    }

    /// Seeded split into `(train, test)` with `round(test_fraction * N)` test samples.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(ClientDataset, ClientDataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test_fraction must be in [0, 1), got {test_fraction}")));
        }
        let n = self.data.len();
        let n_test = ((test_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (test_pos, train_pos) = order.split_at(n_test);
        let pick = |pos: &[usize]| -> Result<ClientDataset> {
            let mut pos = pos.to_vec();
            pos.sort_unstable();
            let data = self.data.subset(&pos)?;
            Ok(ClientDataset {
                client_id: self.client_id,
                label_histogram: data.label_histogram(),
                data,
                indices: pos.iter().map(|&p| self.indices[p]).collect(),
            })
        };
        Ok((pick(train_pos)?, pick(test_pos)?))
    }
}

/// Sort by label (stable, so ties keep corpus order), cut into
/// `num_clients * shards_per_client` contiguous shards, drop the trailing
/// remainder, and deal `shards_per_client` shuffled shards to each client.
pub fn shard_partition(dataset: &LabeledImageSet, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    shard_indices(dataset.labels(), spec)?
        .into_iter()
        .enumerate()
        .map(|(k, idx)| ClientDataset::from_indices(k, dataset, idx))
        .collect()
}

/// Index lists produced by [`shard_partition`].
pub fn shard_indices(labels: &[usize], spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let total = spec.total_shards();
    if labels.len() < total {
        return Err(Error::Config(format!("{total} shards requested for only {} samples", labels.len())));
    }
    let shard_size = labels.len() / total;
    let mut sorted: Vec<usize> = (0..labels.len()).collect();
    sorted.sort_by_key(|&i| labels[i]);
    let mut shard_ids: Vec<usize> = (0..total).collect();
    shard_ids.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    Ok(shard_ids
        .chunks(spec.shards_per_client)
        .map(|mine| {
            let mut mine = mine.to_vec();
            mine.sort_unstable();
            mine.iter()
                .flat_map(|&s| sorted[s * shard_size..(s + 1) * shard_size].iter().copied())
                .collect()
        })
        .collect())
}

/// On-disk partition: the spec that produced it and one index list per client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionFile {
    pub seed: u64,
    pub spec: Option<PartitionSpec>,
    pub clients: Vec<Vec<usize>>,
}

impl PartitionFile {
    pub fn from_clients(spec: &PartitionSpec, clients: &[ClientDataset]) -> Self {
        Self {
            seed: spec.seed,
            spec: Some(spec.clone()),
            clients: clients.iter().map(|c| c.indices.clone()).collect(),
        }
    }

    /// Materialise client datasets, checking that index lists are disjoint.
    pub fn apply(&self, corpus: &LabeledImageSet) -> Result<Vec<ClientDataset>> {
        let mut seen = vec![false; corpus.len()];
        for idx in &self.clients {
            for &i in idx {
                if i >= corpus.len() {
                    return Err(Error::Data(format!("partition index {i} outside corpus of {}", corpus.len())));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Data(format!("sample {i} assigned to two clients")));
                }
            }
        }
        self.clients
            .iter()
            .enumerate()
            .map(|(k, idx)| ClientDataset::from_indices(k, corpus, idx.clone()))
            .collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn corpus_counts_and_determinism() {
        let a = make_synthetic_corpus(2, 5, [1, 28, 28], 0).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a.label_histogram(), vec![5, 5]);
        let b = make_synthetic_corpus(2, 5, [1, 28, 28], 0).unwrap();
        assert_eq!(a, b);
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn corpus_rejects_bad_arguments() {
        assert!(matches!(make_synthetic_corpus(2, 0, [1, 8, 8], 0), Err(Error::Config(_))));
        assert!(matches!(make_synthetic_corpus(2, 1, [2, 8, 8], 0), Err(Error::Config(_))));
        assert!(make_synthetic_corpus(3, 2, [3, 8, 8], 0).is_ok());
    }

    #[test]
    fn single_client_single_shard_takes_everything() {
        let d = make_synthetic_corpus(3, 4, [1, 8, 8], 0).unwrap();
        let parts = shard_partition(&d, &PartitionSpec { num_clients: 1, shards_per_client: 1, seed: 9 }).unwrap();
        assert_eq!(parts.len(), 1);
        let mut idx = parts[0].indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn three_clients_two_shards_on_ten_classes() {
        let d = make_synthetic_corpus(10, 60, [1, 4, 4], 0).unwrap();
        let spec = PartitionSpec { num_clients: 3, shards_per_client: 2, seed: 0 };
        // Oracle: label span of each contiguous shard of the label-sorted corpus.
        let mut sorted = d.labels().to_vec();
        sorted.sort_unstable();
        let spans: Vec<usize> = sorted
            .chunks(100)
            .map(|s| {
                let mut u = s.to_vec();
                u.dedup();
                u.len()
            })
            .collect();
        assert_eq!(spans, vec![2, 3, 2, 2, 3, 2]);
        let parts = shard_partition(&d, &spec).unwrap();
        for p in &parts {
            assert_eq!(p.data.len(), 200);
            let support = p.label_histogram.iter().filter(|&&c| c > 0).count();
            assert!(support <= 6, "client spans {support} labels");
        }
        let supports: Vec<Vec<bool>> = parts.iter().map(|p| p.label_histogram.iter().map(|&c| c > 0).collect()).collect();
        assert!(supports.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn too_many_shards_is_a_config_error() {
        let d = make_synthetic_corpus(2, 2, [1, 4, 4], 0).unwrap();
        let spec = PartitionSpec { num_clients: 3, shards_per_client: 2, seed: 0 };
        assert!(matches!(shard_partition(&d, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn partition_file_rejects_overlap() {
        let d = make_synthetic_corpus(2, 3, [1, 4, 4], 0).unwrap();
        let f = PartitionFile { seed: 0, spec: None, clients: vec![vec![0, 1], vec![1, 2]] };
        assert!(f.apply(&d).is_err());
        let ok = PartitionFile { seed: 0, spec: None, clients: vec![vec![0, 1], vec![2, 5]] };
        assert_eq!(ok.apply(&d).unwrap()[1].data.labels(), &[0, 1]);
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let d = make_synthetic_corpus(2, 10, [1, 4, 4], 0).unwrap();
        let c = ClientDataset::from_indices(0, &d, (0..20).collect()).unwrap();
        let (tr, te) = c.split(0.2, 3).unwrap();
        assert_eq!((tr.data.len(), te.data.len()), (16, 4));
        assert!(te.indices.iter().all(|i| !tr.indices.contains(i)));
        assert_eq!(c.split(0.2, 3).unwrap().1.indices, te.indices);
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 64, .. ProptestConfig::default() })]

        #[test]
        fn partition_is_disjoint_cover_minus_remainder(
            labels in prop::collection::vec(0usize..5, 1..200),
            k in 1usize..5,
            s in 1usize..4,
            seed in any::<u64>(),
        ) {
            let spec = PartitionSpec { num_clients: k, shards_per_client: s, seed };
            match shard_indices(&labels, &spec) {
                Err(_) => prop_assert!(labels.len() < k * s),
                Ok(parts) => {
                    prop_assert_eq!(parts.len(), k);
                    let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
                    let n = all.len();
                    prop_assert_eq!(n, labels.len() - labels.len() % (k * s));
                    all.sort_unstable();
                    all.dedup();
                    prop_assert_eq!(all.len(), n);
                    prop_assert_eq!(shard_indices(&labels, &spec).unwrap(), parts);
                }
            }
        }
    }
}
