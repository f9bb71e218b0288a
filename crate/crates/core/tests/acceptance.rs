//! Acceptance suite. Runs every criterion, prints one line per criterion, and
//! exits non-zero if any of them fails.

use std::cell::OnceCell;
use std::time::Instant;

use osfl_core::autograd::{softmax_rows, Graph};
use osfl_core::client::{payload_contains_rows, upload_contains_rows, ClientUpload};
use osfl_core::experiment::*;
use osfl_core::flow::{
    integrate_from, interpolate, rfm_loss, rfm_loss_graph, sample_features, train_flow, FlowTrainConfig, SamplerConfig,
};
use osfl_core::nets::{
    ClassifierArch, ClassifierConfig, ClassifierModel, Network, VelocityArch, VelocityConfig, VelocityFieldNet,
};
use osfl_core::params::{numerical_gradient, relative_error, OptimizerKind};
use osfl_core::privacy::l2_distance;
use osfl_core::server::{
    average_teachers, dlkd_graph, dlkd_total_loss, feature_align_loss, kl_logit_loss, train_global, DistillConfig,
};
use osfl_core::timing::timing_report;
use osfl_core::flow::DdpmConfig;
use osfl_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn mlp(feature_shape: [usize; 3], num_classes: usize, hidden: usize, time_dim: usize, depth: usize, seed: u64) -> VelocityFieldNet {
    let cfg = VelocityConfig {
        arch: VelocityArch::Mlp,
        feature_shape,
        num_classes,
        hidden,
        time_dim,
        depth,
        patch: 1,
    };
    VelocityFieldNet::build(&cfg, seed).unwrap()
}

fn constant_field(c: Vec<f64>) -> impl Fn(&Tensor, &[f64], &[usize]) -> Tensor {
    move |z: &Tensor, _: &[f64], _: &[usize]| {
        let mut out = Tensor::zeros(z.shape());
        let n = c.len();
        for i in 0..z.batch() {
            out.data_mut()[i * n..(i + 1) * n].copy_from_slice(&c);
        }
        out
    }
}

fn frobenius(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn flow_math() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let z0 = Tensor::uniform(&mut rng, &[3, 1, 2, 2], 1.0);
        let zt = Tensor::randn(&mut rng, &[3, 1, 2, 2], 1.0);
        let at0 = interpolate(&z0, &zt, 0.0).unwrap();
        let at1 = interpolate(&z0, &zt, 1.0).unwrap();
        worst = worst.max(frobenius(&at0, &z0)).max(frobenius(&at1, &zt));
        let t: f64 = rng.random();
        let mid = interpolate(&z0, &zt, t).unwrap();
        for ((m, a), b) in mid.data().iter().zip(z0.data()).zip(zt.data()) {
            worst = worst.max((m - (a + t * (b - a))).abs());
        }
    }
    let endpoints_ok = worst <= 1e-6;

    let mut euler_err: f64 = 0.0;
    for seed in 0..8u64 {
        let c: Vec<f64> = (0..4).map(|j| 0.3 * j as f64 - 0.5 + 0.1 * seed as f64).collect();
        let field = constant_field(c.clone());
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let start = Tensor::randn(&mut r, &[2, 1, 2, 2], 1.0);
        for steps in [1, 3, 10, 50, 137] {
            let cfg = SamplerConfig { num_steps: steps, clamp_output: false, seed };
            let z = integrate_from(&field, start.clone(), &[0, 0], &cfg).unwrap();
            for (i, v) in z.data().iter().enumerate() {
                euler_err = euler_err.max((v - (start.data()[i] - c[i % 4])).abs());
            }
        }
    }
    let euler_ok = euler_err <= 1e-6;

    // A briefly trained net on a small bimodal set.
    let mut net = mlp([1, 1, 2], 2, 24, 8, 2, 5);
    let feats: Vec<f64> = (0..256)
        .flat_map(|i| {
            let s = if i % 2 == 0 { 0.5 } else { -0.5 };
            [s + 0.1 * rng.sample::<f64, _>(StandardNormal), -s + 0.1 * rng.sample::<f64, _>(StandardNormal)]
        })
        .collect();
    let labels: Vec<usize> = (0..256).map(|i| i % 2).collect();
    let feats = Tensor::new(&[256, 1, 1, 2], feats).unwrap();
    let fc = FlowTrainConfig {
        epochs: 40,
        batch_size: 64,
        learning_rate: 0.005,
        optimizer: OptimizerKind::Adam,
        time_horizon: 1.0,
        ema_decay: 0.0,
        seed: 2,
    };
    train_flow(&mut net, &feats, &labels, &fc).unwrap();
    let (mut coarse, mut fine) = (0.0, 0.0);
    let n = 5;
    let y = [0, 1, 0, 1, 0, 1, 0, 1];
    for seed in 0..32u64 {
        let s = |steps| sample_features(&net, &y, [1, 1, 2], &SamplerConfig { num_steps: steps, clamp_output: false, seed }).unwrap();
        let (a, b, c) = (s(n), s(2 * n), s(4 * n));
        coarse += frobenius(&a, &b) / 32.0;
        fine += frobenius(&b, &c) / 32.0;
    }
    let refine_ok = fine <= coarse + 1e-9;
    outcome(
        endpoints_ok && euler_ok && refine_ok,
        format!("interpolation err {worst:.1e}, constant-field Euler err {euler_err:.1e}, mean |s(2n)-s(4n)| {fine:.4} vs |s(n)-s(2n)| {coarse:.4} over 32 seeds"),
    )
}

fn tiny_classifier(seed: u64) -> ClassifierModel {
    let cfg = ClassifierConfig {
        arch: ClassifierArch::SmallCnn,
        input_shape: [1, 4, 4],
        num_classes: 3,
        widths: vec![1, 2, 2],
        tap_layer: 3,
    };
    let mut m = ClassifierModel::build(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in m.store_mut().tensors_mut() {
        *t = Tensor::uniform(&mut rng, t.shape(), 0.8);
    }
    m
}

fn flat(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().to_vec()).collect()
}

fn cross_entropy_rows(logits: &Tensor, y: &[usize]) -> f64 {
    (0..y.len())
        .map(|i| {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[y[i]]
        })
        .sum::<f64>()
        / y.len() as f64
}

fn gradient_oracles() -> Outcome {
    let mut errs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    let mut v = mlp([1, 1, 2], 2, 4, 2, 1, 3);
    for t in v.store_mut().tensors_mut() {
        *t = Tensor::uniform(&mut rng, t.shape(), 0.8);
    }
    let np_v = v.store().num_scalars();
    let z0 = Tensor::uniform(&mut rng, &[3, 1, 1, 2], 1.0);
    let zt = Tensor::randn(&mut rng, &[3, 1, 1, 2], 1.0);
    let (y, t) = ([0, 1, 1], [0.15, 0.5, 0.9]);
    let g = Graph::new();
    let p = v.store().bind(&g);
    let loss = rfm_loss_graph(&v, &p, &g, &z0, &y, &t, &zt).unwrap();
    let analytic = flat(&p.grads(&g.backward(loss).unwrap()));
    let vc = v.config().clone();
    let numeric = numerical_gradient(v.store_mut(), 1e-6, |s| {
        let mut n = VelocityFieldNet::build(&vc, 0)?;
        n.store_mut().copy_from(s)?;
        rfm_loss(&n, &z0, &y, &t, &zt)
    })
    .unwrap();
    errs.push(("rfm", relative_error(&analytic, &numeric)));

    let mut student = tiny_classifier(1);
    let teacher = tiny_classifier(2);
    let np_c = student.store().num_scalars();
    let z = Tensor::uniform(&mut rng, &[4, 1, 4, 4], 1.0);
    let yb = [0, 2, 1, 2];
    let (tl, tt) = teacher.classify(&z).unwrap();
    let arch = student.config().clone();
    let rebuild = |s: &osfl_core::params::ParamStore| -> osfl_core::Result<ClassifierModel> {
        let mut m = ClassifierModel::build(&arch, 0)?;
        m.store_mut().copy_from(s)?;
        Ok(m)
    };

    for temp in [0.7, 3.0] {
        let g = Graph::new();
        let p = student.store().bind(&g);
        let out = student.forward(&p, g.constant(z.clone())).unwrap();
        let kl = out.logits.kl_div(g.constant(tl.clone()), temp, 1.0).unwrap();
        let analytic = flat(&p.grads(&g.backward(kl).unwrap()));
        let numeric = numerical_gradient(student.store_mut(), 1e-6, |s| kl_logit_loss(&rebuild(s)?.classify(&z)?.0, &tl, temp)).unwrap();
        errs.push(("kl", relative_error(&analytic, &numeric)));
    }

    let g = Graph::new();
    let p = student.store().bind(&g);
    let out = student.forward(&p, g.constant(z.clone())).unwrap();
    let feat = out.tap.mse(g.constant(tt.clone())).unwrap();
    let analytic = flat(&p.grads(&g.backward(feat).unwrap()));
    let numeric = numerical_gradient(student.store_mut(), 1e-6, |s| feature_align_loss(&rebuild(s)?.classify(&z)?.1, &tt)).unwrap();
    errs.push(("feat", relative_error(&analytic, &numeric)));

    for (alpha, beta, temp) in [(0.5, 0.1, 3.0), (0.2, 1.0, 1.0), (1.0, 0.0, 2.0)] {
        let cfg = DistillConfig {
            alpha,
            beta,
            temperature: temp,
            learning_rate: 0.1,
            ..distill_defaults()
        };
        let g = Graph::new();
        let p = student.store().bind(&g);
        let (total, _) = dlkd_graph(&student, &p, &teacher, &g, &z, &yb, &cfg).unwrap();
        let analytic = flat(&p.grads(&g.backward(total).unwrap()));
        let numeric = numerical_gradient(student.store_mut(), 1e-6, |s| {
            let (sl, st) = rebuild(s)?.classify(&z)?;
            let ce = cross_entropy_rows(&sl, &yb);
            Ok((1.0 - alpha) * ce + alpha * temp * temp * kl_logit_loss(&sl, &tl, temp)? + beta * feature_align_loss(&st, &tt)?)
        })
        .unwrap();
        errs.push(("dlkd", relative_error(&analytic, &numeric)));
    }

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let small = np_v <= 100 && np_c <= 100;
    let parts: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(worst < 1e-3 && small, format!("{np_v}/{np_c} params; relative errors {}", parts.join(", ")))
}

fn distill_defaults() -> DistillConfig {
    toml::from_str("learning_rate = 0.1").unwrap()
}

/// Per-component mean and diagonal variance after nearest-mean assignment.
fn component_stats(samples: &Tensor, means: &[[f64; 2]; 2]) -> [([f64; 2], [f64; 2], usize); 2] {
    let mut acc = [([0.0; 2], [0.0; 2], 0usize); 2];
    let rows: Vec<(usize, [f64; 2])> = (0..samples.batch())
        .map(|i| {
            let r = samples.row(i);
            let d = |m: &[f64; 2]| (r[0] - m[0]).powi(2) + (r[1] - m[1]).powi(2);
            (if d(&means[0]) <= d(&means[1]) { 0 } else { 1 }, [r[0], r[1]])
        })
        .collect();
    for (k, x) in &rows {
        acc[*k].0[0] += x[0];
        acc[*k].0[1] += x[1];
        acc[*k].2 += 1;
    }
    for a in acc.iter_mut() {
        let n = a.2.max(1) as f64;
        a.0 = [a.0[0] / n, a.0[1] / n];
    }
    for (k, x) in &rows {
        let m = acc[*k].0;
        acc[*k].1[0] += (x[0] - m[0]).powi(2);
        acc[*k].1[1] += (x[1] - m[1]).powi(2);
    }
    for a in acc.iter_mut() {
        let n = (a.2.max(2) - 1) as f64;
        a.1 = [a.1[0] / n, a.1[1] / n];
    }
    acc
}

fn distribution_recovery() -> Outcome {
    let means = [[-0.45, 0.3], [0.4, -0.35]];
    let stds = [[0.12, 0.08], [0.07, 0.13]];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 4096;
    let data: Vec<f64> = (0..n)
        .flat_map(|i| {
            let k = i % 2;
            [
                means[k][0] + stds[k][0] * rng.sample::<f64, _>(StandardNormal),
                means[k][1] + stds[k][1] * rng.sample::<f64, _>(StandardNormal),
            ]
        })
        .collect();
    let feats = Tensor::new(&[n, 1, 1, 2], data).unwrap();
    let mut net = mlp([1, 1, 2], 1, 128, 32, 3, 7);
    let fc = FlowTrainConfig {
        epochs: 400,
        batch_size: 128,
        learning_rate: 0.001,
        optimizer: OptimizerKind::Adam,
        time_horizon: 1.0,
        ema_decay: 0.999,
        seed: 8,
    };
    train_flow(&mut net, &feats, &vec![0; n], &fc).unwrap();
    let samples = sample_features(&net, &[0; 2048], [1, 1, 2], &SamplerConfig { num_steps: 50, clamp_output: true, seed: 9 }).unwrap();
    let stats = component_stats(&samples, &means);
    let mut ok = true;
    let mut parts = Vec::new();
    for k in 0..2 {
        let (m, v, count) = stats[k];
        let mean_err = (0..2).map(|j| (m[j] - means[k][j]).abs()).fold(0.0, f64::max);
        let var_err = (0..2).map(|j| (v[j] / stds[k][j].powi(2) - 1.0).abs()).fold(0.0, f64::max);
        ok &= mean_err <= 0.1 && var_err <= 0.2;
        parts.push(format!("component {k}: {count} samples, mean err {mean_err:.3}, variance rel err {:.1}%", 100.0 * var_err));
    }
    outcome(ok, parts.join("; "))
}

fn dlkd_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let s = tiny_classifier(5);
    let t = tiny_classifier(6);
    let z = Tensor::uniform(&mut rng, &[6, 1, 4, 4], 1.0);
    let y = [0, 1, 2, 2, 1, 0];
    let (sl, st) = s.classify(&z).unwrap();
    let (tl, tt) = t.classify(&z).unwrap();
    let ce = cross_entropy_rows(&sl, &y);
    let feat = feature_align_loss(&st, &tt).unwrap();
    let mut worst: f64 = 0.0;
    for alpha in [0.0, 0.1, 0.5, 0.9, 1.0] {
        for beta in [0.0, 0.05, 0.1, 1.0, 5.0] {
            for temp in [0.5, 1.0, 2.0, 3.0, 8.0] {
                let cfg = DistillConfig {
                    alpha,
                    beta,
                    temperature: temp,
                    ..distill_defaults()
                };
                let l = dlkd_total_loss(&s, &t, &z, &y, &cfg).unwrap();
                let kl = kl_logit_loss(&sl, &tl, temp).unwrap() * temp * temp;
                let expected = (1.0 - alpha) * ce + alpha * kl + beta * feat;
                worst = worst.max((l.total - expected).abs());
            }
        }
    }
    let mut self_err: f64 = 0.0;
    for temp in [0.5, 3.0] {
        let cfg = DistillConfig { temperature: temp, ..distill_defaults() };
        let l = dlkd_total_loss(&t, &t, &z, &y, &cfg).unwrap();
        self_err = self_err.max(l.kl.abs()).max(l.feat.abs());
    }
    let mut argmax_bad = 0;
    let arg = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
    for _ in 0..2000 {
        let k = rng.random_range(2..12);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-30.0..30.0)).collect();
        let temp = 10f64.powf(rng.random_range(-3.0..3.0));
        if arg(&softmax_rows(&logits, k, temp)) != arg(&logits) {
            argmax_bad += 1;
        }
    }
    outcome(
        worst <= 1e-6 && self_err <= 1e-12 && argmax_bad == 0,
        format!("grid of 125 (alpha, beta, T) max err {worst:.1e}; self-distillation kl/feat {self_err:.1e}; argmax changes {argmax_bad}/2000"),
    )
}

struct SeedResult {
    full: f64,
    no_align: f64,
    no_dlkd: f64,
    fedavg: f64,
    centralized: f64,
}

fn benchmark_seed(seed: u64) -> SeedResult {
    let cfg = benchmark_config(seed, std::env::temp_dir().join("osfl-acceptance-unused"));
    let prepared = prepare(&cfg).unwrap();
    let runs = train_clients(&cfg, &prepared).unwrap();
    let uploads: Vec<ClientUpload> = runs.iter().map(|r| r.upload.clone()).collect();
    let featurizers: Vec<_> = runs.iter().map(|r| r.featurizer.clone()).collect();
    let d_syn = synthesize(&cfg, &uploads).unwrap();
    let acc = |flags| distill(&cfg.with_ablation(flags), &uploads, &d_syn, &featurizers, &prepared.test).unwrap().report.pooled;
    let (full, no_align, no_dlkd) = (
        acc(AblationFlags::full()),
        acc(AblationFlags::without_alignment()),
        acc(AblationFlags::without_dlkd()),
    );
    let b = run_baselines(&cfg, &prepared).unwrap();
    SeedResult {
        full,
        no_align,
        no_dlkd,
        fedavg: *b.fedavg.unwrap().accuracy_curve.last().unwrap(),
        centralized: b.centralized_accuracy.unwrap(),
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn ablation_ordering(results: &[SeedResult]) -> Outcome {
    let full = 100.0 * mean(results.iter().map(|r| r.full));
    let no_align = 100.0 * mean(results.iter().map(|r| r.no_align));
    let no_dlkd = 100.0 * mean(results.iter().map(|r| r.no_dlkd));
    let ok = full - no_align >= -0.5 && no_align - no_dlkd >= -0.5;
    outcome(
        ok,
        format!("{} seeds: full {full:.2}, w/o alignment {no_align:.2}, w/o DLKD {no_dlkd:.2} (points)", results.len()),
    )
}

fn one_shot_vs_rounds(results: &[SeedResult]) -> Outcome {
    let full = 100.0 * mean(results.iter().map(|r| r.full));
    let fedavg = 100.0 * mean(results.iter().map(|r| r.fedavg));
    let central = 100.0 * mean(results.iter().map(|r| r.centralized));
    let ok = full >= fedavg + 2.0 && central - full <= 10.0;
    outcome(ok, format!("one-shot {full:.2}, FedAvg(1 round) {fedavg:.2}, centralized {central:.2}"))
}

fn speed() -> Outcome {
    let cfg = benchmark_config(0, std::env::temp_dir().join("osfl-acceptance-unused"));
    let models = cfg.client_models();
    let flow = models.initial_flow().unwrap();
    let ddpm_net = VelocityFieldNet::build(&models.flow, 99).unwrap();
    let labels: Vec<usize> = (0..32).map(|i| i % cfg.corpus.num_classes).collect();
    let sampler = SamplerConfig { num_steps: 50, clamp_output: true, seed: 1 };
    let ddpm = DdpmConfig { num_timesteps: 1000, ..DdpmConfig::default() };
    let r = timing_report(&flow, &ddpm_net, &labels, &sampler, &ddpm, 2).unwrap();
    outcome(
        r.speedup >= 10.0,
        format!(
            "rfm {:.2} ms/sample, ddpm {:.2} ms/sample, speedup {:.1}x",
            1e3 * r.rfm.per_sample_s,
            1e3 * r.ddpm.per_sample_s,
            r.speedup
        ),
    )
}

fn privacy_direction() -> Outcome {
    let mut wins = 0;
    let mut flagged = 0;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let cfg = benchmark_config(seed, std::env::temp_dir().join("osfl-acceptance-unused"));
        let prepared = prepare(&cfg).unwrap();
        let runs = train_clients(&cfg, &prepared).unwrap();
        let r = privacy_pipeline(&cfg, &prepared, &runs).unwrap();
        wins += usize::from(r.direction_ok);
        flagged += r.pixel.num_flagged + r.feature.num_flagged;
        parts.push(format!("{:.4}/{:.4}", r.feature.mean_nn_distance, r.pixel.mean_nn_distance));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let mut metric_err: f64 = 0.0;
    for _ in 0..500 {
        let d = rng.random_range(1..40);
        let v = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| rng.random_range(-2.0..2.0)).collect() };
        let (a, b, c) = (v(&mut rng), v(&mut rng), v(&mut rng));
        let ab = l2_distance(&a, &b).unwrap();
        let ba = l2_distance(&b, &a).unwrap();
        let ac = l2_distance(&a, &c).unwrap();
        let cb = l2_distance(&c, &b).unwrap();
        let aa = l2_distance(&a, &a).unwrap();
        let direct = (a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / d as f64).sqrt();
        metric_err = metric_err
            .max(aa.abs())
            .max((ab - ba).abs())
            .max((ab - ac - cb).max(0.0))
            .max((-ab).max(0.0))
            .max((ab - direct).abs());
    }
    let ok = wins >= 2 && flagged == 0 && metric_err <= 1e-9;
    outcome(
        ok,
        format!(
            "feature/pixel mean NN l2 per seed {}; direction holds in {wins}/3; flagged at 0.1: {flagged}; metric err {metric_err:.1e}",
            parts.join(", ")
        ),
    )
}

fn protocol_contracts() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let cfg = toy_config(5, root.path().join("a"));
    let prepared = prepare(&cfg).unwrap();
    let runs = train_clients(&cfg, &prepared).unwrap();
    let mut leaks = 0;
    for (run, data) in runs.iter().zip(&prepared.train) {
        let bytes = run.upload.to_bytes().unwrap();
        let images = data.data.images();
        let signed = data.data.signed_images();
        let feats = run.featurizer.features(images).unwrap();
        for rows in [images, &signed, &feats] {
            if payload_contains_rows(&bytes, rows) || upload_contains_rows(&run.upload, rows) {
                leaks += 1;
            }
        }
    }

    let uploads: Vec<ClientUpload> = runs.iter().map(|r| r.upload.clone()).collect();
    let before: Vec<Vec<u8>> = uploads.iter().map(|u| u.to_bytes().unwrap()).collect();
    let teacher_before = average_teachers(&uploads, false).unwrap();
    let d_syn = synthesize(&cfg, &uploads).unwrap();
    let student = cfg.client_models().initial_classifier().unwrap();
    let dcfg = DistillConfig { epochs: 3, ..cfg.effective_distill() };
    let global = train_global(&uploads, &d_syn, &dcfg, student.clone(), None).unwrap();
    let teacher_same = global.teacher.model.store() == teacher_before.model.store()
        && uploads.iter().zip(&before).all(|(u, b)| &u.to_bytes().unwrap() == b)
        && global.student.store() != student.store();

    let first = run_experiment(&cfg).unwrap();
    let upload_files = std::fs::read_dir(RunDir::new(&cfg.output_dir).uploads()).unwrap().count();
    let one_message = first.messages == first.num_clients && upload_files == first.num_clients;
    let again = run_experiment(&cfg).unwrap();
    let elsewhere = run_experiment(&toy_config(5, root.path().join("b"))).unwrap();
    let reproducible = first.metrics() == again.metrics() && first.metrics() == elsewhere.metrics();

    outcome(
        leaks == 0 && one_message && teacher_same && reproducible,
        format!(
            "payload leaks {leaks}; messages {} for {} clients ({upload_files} upload files); teacher unchanged {teacher_same}; reruns identical {reproducible}",
            first.messages, first.num_clients
        ),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(name) {
            let start = Instant::now();
            let o = f();
            let secs = start.elapsed().as_secs_f64();
            println!("criterion {n} {name}: {} ({secs:.1}s) {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((n, name, o, secs));
        }
    };

    run(1, "flow_math", &mut flow_math);
    run(2, "gradient_oracles", &mut gradient_oracles);
    run(3, "distribution_recovery", &mut distribution_recovery);
    run(4, "dlkd_algebra", &mut dlkd_algebra);
    let bench: OnceCell<Vec<SeedResult>> = OnceCell::new();
    let benchmark = || bench.get_or_init(|| (0..5).map(benchmark_seed).collect());
    run(5, "ablation_ordering", &mut || ablation_ordering(benchmark()));
    run(6, "one_shot_vs_rounds", &mut || one_shot_vs_rounds(benchmark()));
    run(7, "sampling_speed", &mut speed);
    run(8, "privacy_direction", &mut privacy_direction);
    run(9, "protocol_contracts", &mut protocol_contracts);

    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| format!("{} {}", r.0, r.1)).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
