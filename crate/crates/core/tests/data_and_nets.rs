use osfl_core::autograd::Graph;
use osfl_core::checkpoint::Checkpoint;
use osfl_core::client::train_classifier_on;
use osfl_core::data::{make_synthetic_corpus, ClientDataset, LabeledImageSet};
use osfl_core::nets::{
    ClassifierArch, ClassifierConfig, ClassifierModel, DecoderConfig, ExtractorConfig, FeatureDecoder, FeatureExtractor, Network,
    VelocityArch, VelocityConfig, VelocityField, VelocityFieldNet,
};
use osfl_core::params::{numerical_gradient, relative_error, OptimizerKind};
use osfl_core::privacy::{l2_distance, train_decoder, DecoderTrainConfig};
use osfl_core::seed::rng_for;
use osfl_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn corpus_carries_class_signal() {
    let corpus = make_synthetic_corpus(10, 100, [1, 28, 28], 1).unwrap();
    let all = ClientDataset::from_indices(0, &corpus, (0..corpus.len()).collect()).unwrap();
    let (train, test) = all.split(0.2, 1).unwrap();
    let cfg = ClassifierConfig {
        arch: ClassifierArch::SmallCnn,
        input_shape: [1, 28, 28],
        num_classes: 10,
        widths: vec![8, 16, 16],
        tap_layer: 3,
    };
    let init = ClassifierModel::build(&cfg, 0).unwrap();
    let mut rng = rng_for(0, "corpus-signal");
    let t = train_classifier_on(init, &train.data.signed_images(), train.data.labels(), 2, 32, OptimizerKind::Sgd, 0.1, &mut rng).unwrap();
    let acc = t.model.accuracy(&test.data.signed_images(), test.data.labels()).unwrap();
    assert!(acc > 0.5, "test accuracy {acc}");
}

#[test]
fn corpus_exports_through_checkpoint_container() {
    let corpus = make_synthetic_corpus(3, 4, [3, 6, 6], 2).unwrap();
    let bytes = corpus.to_checkpoint().to_bytes().unwrap();
    let back = LabeledImageSet::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.labels(), corpus.labels());
    assert_eq!(back.num_classes(), 3);
    for (a, b) in back.images().data().iter().zip(corpus.images().data()) {
        assert_eq!(*a, f64::from(*b as f32));
    }
}

/// Tape gradient of `sum(out * r)` for a fixed random `r`.
fn projected_grad(store: &osfl_core::params::ParamStore, out_len: usize, forward: impl for<'g> Fn(&osfl_core::params::Bound<'g>, &'g Graph) -> osfl_core::autograd::Var<'g>) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = Tensor::uniform(&mut rng, &[out_len], 1.0);
    let g = Graph::new();
    let p = store.bind(&g);
    let out = forward(&p, &g);
    let shape = out.shape();
    let loss = out.mul(g.constant(r.reshape(&shape).unwrap())).unwrap().sum();
    p.grads(&g.backward(loss).unwrap()).iter().flat_map(|t| t.data().to_vec()).collect()
}

/// Central differences of the same projection through the evaluation-mode forward.
fn projected_numeric<N: Network>(net: &mut N, out_len: usize, eval: impl Fn(&N) -> Tensor) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = Tensor::uniform(&mut rng, &[out_len], 1.0);
    let cfg = net.config().clone();
    numerical_gradient(net.store_mut(), 1e-6, |s| {
        let mut m = N::build(&cfg, 0)?;
        m.store_mut().copy_from(s)?;
        Ok(eval(&m).data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    })
    .unwrap()
}

fn randomise<N: Network>(net: &mut N, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in net.store_mut().tensors_mut() {
        *t = Tensor::uniform(&mut rng, t.shape(), 0.7);
    }
    assert!(net.store().num_scalars() <= 100, "{} parameters", net.store().num_scalars());
}

#[test]
fn every_network_role_passes_a_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let mut ex = FeatureExtractor::build(&ExtractorConfig { image_shape: [1, 4, 4], kernel: 3 }, 0).unwrap();
    randomise(&mut ex, 1);
    let x = Tensor::uniform(&mut rng, &[2, 1, 4, 4], 1.0);
    let a = projected_grad(ex.store(), 32, |p, g| ex.forward(p, g.constant(x.clone())).unwrap());
    let n = projected_numeric(&mut ex, 32, |m| m.extract(&x).unwrap());
    assert!(relative_error(&a, &n) < 1e-3, "extractor");

    let cc = ClassifierConfig {
        arch: ClassifierArch::SmallCnn,
        input_shape: [1, 4, 4],
        num_classes: 3,
        widths: vec![1, 2, 2],
        tap_layer: 3,
    };
    let mut cl = ClassifierModel::build(&cc, 0).unwrap();
    randomise(&mut cl, 2);
    let a = projected_grad(cl.store(), 6, |p, g| cl.forward(p, g.constant(x.clone())).unwrap().logits);
    let n = projected_numeric(&mut cl, 6, |m| m.classify(&x).unwrap().0);
    assert!(relative_error(&a, &n) < 1e-3, "classifier");

    let z = Tensor::uniform(&mut rng, &[2, 1, 2, 2], 1.0);
    let (t, y) = ([0.2, 0.8], [1, 0]);
    for arch in [VelocityArch::Mlp, VelocityArch::Attention] {
        let vc = VelocityConfig {
            arch,
            feature_shape: [1, 2, 2],
            num_classes: 2,
            hidden: if arch == VelocityArch::Mlp { 4 } else { 2 },
            time_dim: 2,
            depth: 1,
            patch: 1,
        };
        let mut v = VelocityFieldNet::build(&vc, 0).unwrap();
        randomise(&mut v, 3);
        let a = projected_grad(v.store(), 8, |p, g| v.forward(p, g.constant(z.clone()), &t, &y).unwrap());
        let n = projected_numeric(&mut v, 8, |m| m.velocity(&z, &t, &y).unwrap());
        assert!(relative_error(&a, &n) < 1e-3, "velocity {arch:?}");
    }

    let mut dec = FeatureDecoder::build(&DecoderConfig { image_shape: [1, 4, 4], hidden: 2 }, 0).unwrap();
    randomise(&mut dec, 4);
    let f = Tensor::uniform(&mut rng, &[2, 1, 4, 4], 1.0);
    let a = projected_grad(dec.store(), 32, |p, g| dec.forward(p, g.constant(f.clone())).unwrap());
    let n = projected_numeric(&mut dec, 32, |m| m.decode(&f).unwrap());
    assert!(relative_error(&a, &n) < 1e-3, "decoder");
}

#[test]
fn trained_decoder_cannot_invert_the_extractor() {
    let corpus = make_synthetic_corpus(4, 40, [1, 12, 12], 5).unwrap();
    let ex = FeatureExtractor::build(&ExtractorConfig { image_shape: [1, 12, 12], kernel: 3 }, 4).unwrap();
    let feats = ex.extract(&corpus.signed_images()).unwrap();
    let train: Vec<usize> = (0..corpus.len()).filter(|i| i % 5 != 0).collect();
    let held: Vec<usize> = (0..corpus.len()).filter(|i| i % 5 == 0).collect();
    let cfg = DecoderTrainConfig { epochs: 60, ..Default::default() };
    let dec = train_decoder(&feats.select(&train), &corpus.images().select(&train), &cfg).unwrap();
    let recon = dec.model.decode(&feats.select(&held)).unwrap();
    let originals = corpus.images().select(&held);
    let mean: f64 = (0..held.len()).map(|i| l2_distance(recon.row(i), originals.row(i)).unwrap()).sum::<f64>() / held.len() as f64;
    assert!(mean > 0.01, "held-out reconstruction distance {mean}");
    assert!(recon.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
