//! Multi-round FedAvg and centralised training on raw pixels.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::train_classifier_on;
use crate::data::{ClientDataset, LabeledImageSet};
use crate::error::{Error, Result};
use crate::nets::{ClassifierModel, Network};
use crate::params::{weighted_mean, OptimizerKind, ParamStore};
use crate::seed::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedAvgConfig {
    pub rounds: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
}

fn default_local_epochs() -> usize {
    1
}

fn default_batch() -> usize {
    32
}

impl FedAvgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `sum_k (n_k / N) w_k`.
pub fn aggregate(stores: &[&ParamStore], sizes: &[usize]) -> Result<ParamStore> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Config("aggregation needs at least one sample".into()));
    }
    let weights: Vec<f64> = sizes.iter().map(|&n| n as f64 / total as f64).collect();
    weighted_mean(stores, &weights)
}

fn pixels(set: &LabeledImageSet) -> Tensor {
    set.signed_images()
}

/// One round: every client trains a copy of `global` locally, then sizes weight the mean.
pub fn fedavg_round(global: &ClassifierModel, clients: &[ClientDataset], cfg: &FedAvgConfig, round: usize) -> Result<ClassifierModel> {
    if clients.is_empty() {
        return Err(Error::Config("fedavg needs at least one client".into()));
    }
    let mut locals = Vec::with_capacity(clients.len());
    for c in clients {
        let mut rng = rng_for(cfg.seed, &format!("fedavg/round{round}/client{}", c.client_id));
        let t = train_classifier_on(
            global.clone(),
            &pixels(&c.data),
            c.data.labels(),
            cfg.local_epochs,
            cfg.batch_size,
            cfg.optimizer,
            cfg.learning_rate,
            &mut rng,
        )?;
        locals.push(t.model);
    }
    let stores: Vec<&ParamStore> = locals.iter().map(|m| m.store()).collect();
    let sizes: Vec<usize> = clients.iter().map(|c| c.data.len()).collect();
    let mut next = global.clone();
    next.store_mut().copy_from(&aggregate(&stores, &sizes)?)?;
    Ok(next)
}

#[derive(Clone, Debug)]
pub struct FedAvgRun {
    pub model: ClassifierModel,
    /// Test accuracy after each round.
    pub accuracy_curve: Vec<f64>,
}

/// `cfg.rounds` rounds from `init`, evaluated on `test` after each.
pub fn run_fedavg(clients: &[ClientDataset], test: &LabeledImageSet, cfg: &FedAvgConfig, init: ClassifierModel) -> Result<FedAvgRun> {
    cfg.validate()?;
    let test_x = pixels(test);
    let mut model = init;
    let mut curve = Vec::with_capacity(cfg.rounds);
    for r in 0..cfg.rounds {
        model = fedavg_round(&model, clients, cfg, r)?;
        curve.push(model.accuracy(&test_x, test.labels())?);
    }
    Ok(FedAvgRun {
        model,
        accuracy_curve: curve,
    })
}

/// Plain training on the pooled raw-pixel data.
pub fn train_centralized(train: &LabeledImageSet, epochs: usize, cfg: &FedAvgConfig, init: ClassifierModel) -> Result<ClassifierModel> {
    let mut rng = rng_for(cfg.seed, "centralized");
    Ok(train_classifier_on(
        init,
        &pixels(train),
        train.labels(),
        epochs,
        cfg.batch_size,
        cfg.optimizer,
        cfg.learning_rate,
        &mut rng,
    )?
    .model)
}

/// Accuracy of a raw-pixel model on a labelled set.
pub fn pixel_accuracy(model: &ClassifierModel, set: &LabeledImageSet) -> Result<f64> {
    model.accuracy(&pixels(set), set.labels())
}

/// Concatenate labelled sets sharing image shape and class count.
pub fn pool(sets: &[&LabeledImageSet]) -> Result<LabeledImageSet> {
    let first = sets.first().ok_or_else(|| Error::Config("nothing to pool".into()))?;
    if sets.iter().any(|s| s.num_classes() != first.num_classes()) {
        return Err(Error::Config("pooled sets disagree on num_classes".into()));
    }
    let images: Vec<&Tensor> = sets.iter().map(|s| s.images()).collect();
    let labels = sets.iter().flat_map(|s| s.labels().iter().copied()).collect();
    LabeledImageSet::new(Tensor::stack_rows(&images)?, labels, first.num_classes())
}

/// `round,accuracy` rows.
pub fn write_curve_csv(path: &Path, curve: &[f64]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("round,accuracy\n");
    for (r, a) in curve.iter().enumerate() {
        text.push_str(&format!("{},{a}\n", r + 1));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_corpus, shard_partition, PartitionSpec};
    use crate::nets::{ClassifierArch, ClassifierConfig};

    fn model() -> ClassifierModel {
        ClassifierModel::build(
            &ClassifierConfig {
                arch: ClassifierArch::SmallCnn,
                input_shape: [1, 8, 8],
                num_classes: 2,
                widths: vec![2, 3, 3],
                tap_layer: 3,
            },
            0,
        )
        .unwrap()
    }

    fn cfg() -> FedAvgConfig {
        FedAvgConfig {
            rounds: 1,
            local_epochs: 2,
            batch_size: 8,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            seed: 1,
        }
    }

    #[test]
    fn weighted_arithmetic() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::scalar(2.0));
        let mut b = ParamStore::new();
        b.add("w", Tensor::scalar(4.0));
        assert_eq!(aggregate(&[&a, &b], &[1, 3]).unwrap().tensors()[0].item(), 3.5);
        assert_eq!(aggregate(&[&a, &a], &[5, 9]).unwrap(), a);
    }

    #[test]
    fn single_client_round_is_local_training() {
        let corpus = make_synthetic_corpus(2, 6, [1, 8, 8], 0).unwrap();
        let client = ClientDataset::from_indices(0, &corpus, (0..12).collect()).unwrap();
        let g = model();
        let round = fedavg_round(&g, std::slice::from_ref(&client), &cfg(), 0).unwrap();
        let mut rng = rng_for(1, "fedavg/round0/client0");
        let local = train_classifier_on(g, &corpus.signed_images(), corpus.labels(), 2, 8, OptimizerKind::Sgd, 0.05, &mut rng).unwrap();
        assert_eq!(round.store(), local.model.store());
    }

    #[test]
    fn rounds_must_be_positive_and_runs_are_deterministic() {
        let corpus = make_synthetic_corpus(2, 8, [1, 8, 8], 0).unwrap();
        let clients = shard_partition(&corpus, &PartitionSpec { num_clients: 2, shards_per_client: 1, seed: 0 }).unwrap();
        assert!(run_fedavg(&clients, &corpus, &FedAvgConfig { rounds: 0, ..cfg() }, model()).is_err());
        assert!(fedavg_round(&model(), &[], &cfg(), 0).is_err());
        let c = FedAvgConfig { rounds: 2, ..cfg() };
        let a = run_fedavg(&clients, &corpus, &c, model()).unwrap();
        let b = run_fedavg(&clients, &corpus, &c, model()).unwrap();
        assert_eq!(a.accuracy_curve.len(), 2);
        assert_eq!(a.model.store(), b.model.store());
    }

    #[test]
    fn pooling_concatenates() {
        let a = make_synthetic_corpus(2, 2, [1, 4, 4], 0).unwrap();
        let b = make_synthetic_corpus(2, 3, [1, 4, 4], 1).unwrap();
        let p = pool(&[&a, &b]).unwrap();
        assert_eq!(p.len(), 10);
        assert_eq!(p.label_histogram(), vec![5, 5]);
    }
}
