//! Fixtures shared by the criterion benches, sized like the benchmark config.

use osfl_core::client::ClientModels;
use osfl_core::experiment::{benchmark_config, ExperimentConfig};
use osfl_core::nets::{ClassifierModel, Network, VelocityFieldNet};
use osfl_core::server::DistillConfig;
use osfl_core::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub config: ExperimentConfig,
    pub models: ClientModels,
    pub flow: VelocityFieldNet,
    pub ddpm_net: VelocityFieldNet,
    pub student: ClassifierModel,
    pub teacher: ClassifierModel,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Fixture {
    pub fn new(batch: usize) -> Self {
        let config = benchmark_config(0, std::env::temp_dir().join("osfl-bench"));
        let models = config.client_models();
        let flow = models.initial_flow().unwrap();
        let ddpm_net = VelocityFieldNet::build(&models.flow, 1).unwrap();
        let student = models.initial_classifier().unwrap();
        let teacher = ClassifierModel::build(&models.classifier, 2).unwrap();
        let [c, h, w] = models.flow.feature_shape;
        let features = Tensor::uniform(&mut ChaCha8Rng::seed_from_u64(3), &[batch, c, h, w], 1.0);
        let labels = (0..batch).map(|i| i % models.num_classes()).collect();
        Self {
            config,
            models,
            flow,
            ddpm_net,
            student,
            teacher,
            features,
            labels,
        }
    }

    pub fn distill(&self) -> DistillConfig {
        self.config.effective_distill()
    }
}
