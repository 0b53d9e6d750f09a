use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tristream::autodiff::fd::relative_error;
use tristream::autodiff::ParamCoord;
use tristream::error::Error;
use tristream::model::GraphSample;
use tristream::structure::{LabelValue, Labels};
use tristream::synth::{pair_potential_dataset, PairPotential};
use tristream::train::*;
use tristream::{AtomicStructure, Model, ModelConfig};

fn tiny(seed: u64) -> Model {
    Model::new(ModelConfig::tiny(), seed).unwrap()
}

fn pair_data(seed: u64, n: usize) -> Vec<AtomicStructure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pair_potential_dataset(&mut rng, n, &PairPotential::default())
}

fn pretrain_cfg(steps: usize) -> PretrainConfig {
    let mut cfg = PretrainConfig::default();
    cfg.optimizer.steps = steps;
    cfg.optimizer.warmup = 5;
    cfg.optimizer.lr = 2e-3;
    cfg.optimizer.batch_size = 4;
    cfg.weights.slices = 32;
    cfg.augment.base_graph = ModelConfig::tiny().graph;
    cfg.augment.graph_radius = [3.0, 4.0];
    cfg.augment.graph_neighbors = [8, 32];
    cfg.seed = 3;
    cfg
}

fn finetune_cfg(steps: usize, mode: ForceMode) -> FinetuneConfig {
    let mut cfg = FinetuneConfig::default();
    cfg.optimizer.steps = steps;
    cfg.optimizer.warmup = 2;
    cfg.optimizer.lr = 1e-3;
    cfg.optimizer.batch_size = 4;
    cfg.mode = mode;
    cfg.seed = 8;
    cfg
}

#[test]
fn zero_gradient_adamw_step_applies_only_weight_decay() {
    let model = tiny(1);
    let mut params = model.params.clone();
    let mut opt = AdamW::new(&params);
    let cfg = OptimizerConfig::pretrain();
    let lr = 1e-2;
    let zero = params.zeros_like();
    opt.step(&mut params, &zero, lr, &cfg);
    for (name, p) in params.iter() {
        let before = model.params.get(name).unwrap();
        for (a, b) in p.iter().zip(before) {
            assert_eq!(*a, b * (1.0 - lr * cfg.weight_decay));
        }
    }
}

#[test]
fn clipping_bounds_the_global_norm() {
    let model = tiny(2);
    let mut g = model.params.zeros_like();
    for m in g.grads.values_mut() {
        m.fill(3.0);
    }
    let before = g.global_norm();
    let reported = clip_gradients(&mut g, 10.0);
    assert_eq!(reported, before);
    assert!(g.global_norm() <= 10.0 + 1e-10);
    let mut small = model.params.zeros_like();
    small.grads[0].fill(1e-3);
    let copy = small.clone();
    clip_gradients(&mut small, 10.0);
    assert_eq!(small, copy);
}

#[test]
fn cosine_schedule_midpoint() {
    let cfg = OptimizerConfig {
        lr: 3e-4,
        warmup: 500,
        steps: 10_500,
        ..OptimizerConfig::pretrain()
    };
    assert_eq!(lr_at(500, &cfg), 3e-4);
    assert!((lr_at(5500, &cfg) - 1.5e-4).abs() < 1e-16);
    assert!(lr_at(10_500, &cfg).abs() < 1e-18);
}

#[test]
fn checkpoint_round_trip_is_bitwise_stable() {
    let data = pair_data(1, 6);
    let out = pretrain(tiny(3), &data, &pretrain_cfg(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.to_bytes().unwrap(), out.checkpoint.to_bytes().unwrap());
    let m1 = evaluate(&out.checkpoint.model, &data, ForceMode::Conservative).unwrap();
    let m2 = evaluate(&back.model, &data, ForceMode::Conservative).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let bytes = Checkpoint::from_model(tiny(4)).to_bytes().unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    let mut newer = bytes;
    newer[8] = 99;
    assert!(matches!(Checkpoint::from_bytes(&newer), Err(Error::Checkpoint(_))));
}

#[test]
fn zero_step_pretrain_returns_the_initialization() {
    let data = pair_data(2, 4);
    let init = tiny(5);
    let out = pretrain(init.clone(), &data, &pretrain_cfg(0)).unwrap();
    assert_eq!(out.checkpoint.model, init);
    assert!(out.log.is_empty());
}

#[test]
fn pretraining_reduces_the_combined_loss() {
    let data = pair_data(3, 64);
    let cfg = pretrain_cfg(50);
    let init = tiny(6);
    let out = pretrain(init.clone(), &data, &cfg).unwrap();
    assert_eq!(out.log.len(), 50);
    // same batch, views and projections for both parameter sets
    let probe = |m: &Model| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        pretrain_gradients(m, &data, &cfg, &mut rng).unwrap().0.total
    };
    let (first, last) = (probe(&init), probe(&out.checkpoint.model));
    println!("combined loss {first:.4} -> {last:.4}");
    assert!(last < first);
}

#[test]
fn pretraining_is_reproducible_and_resumable() {
    let data = pair_data(4, 12);
    let cfg = pretrain_cfg(6);
    let a = pretrain(tiny(7), &data, &cfg).unwrap();
    let b = pretrain(tiny(7), &data, &cfg).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.csv(), b.csv());

    let half = pretrain(tiny(7), &data, &pretrain_cfg(3)).unwrap();
    let bytes = half.checkpoint.to_bytes().unwrap();
    let resumed = pretrain_from(Checkpoint::from_bytes(&bytes).unwrap(), &data, &cfg).unwrap();
    assert_eq!(resumed.checkpoint.to_bytes().unwrap(), a.checkpoint.to_bytes().unwrap());
}

#[test]
fn nonfinite_loss_aborts_with_a_step_report() {
    let data = pair_data(5, 4);
    let mut model = tiny(8);
    model.params.get_mut("head.noise.0.w").unwrap().fill(f64::NAN);
    match pretrain(model, &data, &pretrain_cfg(2)) {
        Err(Error::Diverged { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn finetune_requires_labels() {
    let mut data = pair_data(6, 3);
    data[1] = data[1].clone().with_labels(Labels::default());
    let err = finetune(tiny(9), &data, &[], &finetune_cfg(1, ForceMode::Direct)).unwrap_err();
    assert!(matches!(err, Error::MissingLabel(_)), "{err}");
    let mut no_forces = Labels::default();
    no_forces.insert("energy", LabelValue::Float(1.0));
    data[1] = data[1].clone().with_labels(no_forces);
    let err = finetune(tiny(9), &data, &[], &finetune_cfg(1, ForceMode::Direct)).unwrap_err();
    assert!(matches!(err, Error::MissingLabel(_)));
}

#[test]
fn zero_step_finetune_reports_initial_metrics() {
    let data = pair_data(7, 8);
    let model = tiny(10);
    let out = finetune(model.clone(), &data[..4], &data[4..], &finetune_cfg(0, ForceMode::Conservative)).unwrap();
    assert_eq!(out.checkpoint.model, model);
    assert_eq!(out.metrics, out.initial);
    assert_eq!(out.metrics, evaluate(&model, &data[4..], ForceMode::Conservative).unwrap());
}

#[test]
fn modes_share_the_data_order() {
    let data = pair_data(8, 10);
    let c = finetune(tiny(11), &data, &data[..2], &finetune_cfg(4, ForceMode::Conservative)).unwrap();
    let d = finetune(tiny(11), &data, &data[..2], &finetune_cfg(4, ForceMode::Direct)).unwrap();
    assert_eq!(c.order, d.order);
    assert_ne!(c.checkpoint.model.params.get("head.force.0.w"), d.checkpoint.model.params.get("head.force.0.w"));
}

fn zero_model() -> Model {
    let mut m = tiny(12);
    for (_, p) in m.params.iter_mut() {
        p.fill(0.0);
    }
    m
}

#[test]
fn evaluate_matches_hand_sums() {
    let s = |e: f64, f: Vec<[f64; 3]>, n: usize| {
        let pos = (0..n).map(|i| [2.0 * i as f64, 0.0, 0.0]).collect();
        let mut l = Labels::default();
        l.insert("energy", LabelValue::Float(e));
        l.insert("forces", LabelValue::PerAtom(f));
        AtomicStructure::new(vec![6; n], pos).unwrap().with_labels(l)
    };
    let data = vec![
        s(-3.0, vec![[0.5, 0.0, -0.25], [-0.5, 0.0, 0.25]], 2),
        s(1.2, vec![[0.1, 0.2, 0.3], [0.0, 0.0, 0.0], [-0.1, -0.2, -0.3]], 3),
    ];
    let zero = zero_model();
    for mode in [ForceMode::Conservative, ForceMode::Direct] {
        let m = evaluate(&zero, &data, mode).unwrap();
        // (3/2 + 1.2/3) / 2 eV/atom and (1.5 + 1.2) / 15 eV/Å
        assert!((m.energy_mae - 1000.0 * (1.5 + 0.4) / 2.0).abs() < 1e-9, "{m:?}");
        assert!((m.force_mae - 1000.0 * 2.7 / 15.0).abs() < 1e-9, "{m:?}");
    }
    let single = evaluate(&zero, &data[1..], ForceMode::Direct).unwrap();
    assert!((single.energy_mae - 400.0).abs() < 1e-9);
}

#[test]
fn perfect_predictor_scores_zero() {
    let model = tiny(13);
    let data: Vec<AtomicStructure> = pair_data(9, 5)
        .into_iter()
        .map(|s| {
            let g = model.graph(&s).unwrap();
            let (e, f) = model.energy_and_forces(&[GraphSample::new(&s, &g)]);
            let mut l = Labels::default();
            l.insert("energy", LabelValue::Float(e[0]));
            l.insert("forces", LabelValue::PerAtom(f[0].clone()));
            s.with_labels(l)
        })
        .collect();
    let m = evaluate(&model, &data, ForceMode::Conservative).unwrap();
    assert_eq!((m.energy_mae, m.force_mae), (0.0, 0.0));
}

/// Supervised loss evaluated from values only.
fn loss_oracle(model: &Model, items: &[Labelled], cfg: &FinetuneConfig) -> f64 {
    let samples: Vec<GraphSample> = items.iter().map(|l| GraphSample::new(&l.structure, &l.graph)).collect();
    let (e, f) = model.energy_and_forces(&samples);
    let b = items.len() as f64;
    let mut le = 0.0;
    let mut lf = 0.0;
    let mut n = 0.0;
    let pen = |d: f64| match cfg.loss {
        LossKind::Mae => d.abs(),
        LossKind::Mse => d * d,
    };
    for (k, l) in items.iter().enumerate() {
        le += pen((e[k] - l.energy) / l.structure.len() as f64);
        for (p, q) in f[k].iter().zip(l.forces.as_ref().unwrap()) {
            for a in 0..3 {
                lf += pen(p[a] - q[a]);
                n += 1.0;
            }
        }
    }
    cfg.lambda_energy * le / b + cfg.lambda_force * lf / n
}

#[test]
fn conservative_training_gradient_matches_finite_differences() {
    let data = pair_data(10, 3);
    let model = tiny(14);
    for loss in [LossKind::Mse, LossKind::Mae] {
        let mut cfg = finetune_cfg(1, ForceMode::Conservative);
        cfg.loss = loss;
        let items = prepare(&model, &data, true).unwrap();
        let refs: Vec<&Labelled> = items.iter().collect();
        let (le, lf, grads) = finetune_gradients(&model, &refs, &cfg);
        assert!(relative_error(le + lf, loss_oracle(&model, &items, &cfg), 1e-12) < 1e-12);
        let mut worst: f64 = 0.0;
        for name in ["comp.embed", "struct.in.w", "int.l0.msg.0.w", "head.energy.0.w", "head.atom_ref"] {
            let Some(p) = model.params.get(name) else { panic!("missing {name}") };
            for index in [0, p.len() / 2, p.len() - 1] {
                let c = ParamCoord { name: name.into(), index };
                let h = 1e-5;
                let mut m = model.clone();
                let v = m.params.read(&c);
                m.params.write(&c, v + h);
                let up = loss_oracle(&m, &items, &cfg);
                m.params.write(&c, v - h);
                let dn = loss_oracle(&m, &items, &cfg);
                let fd = (up - dn) / (2.0 * h);
                let err = relative_error(grads.read(&c), fd, 1e-4);
                worst = worst.max(err);
                assert!(err < 1e-3, "{loss:?} {name}[{index}]: {} vs {fd}", grads.read(&c));
            }
        }
        println!("{loss:?}: worst relative error {worst:.2e}");
    }
}

#[test]
fn direct_training_gradient_matches_finite_differences() {
    let data = pair_data(11, 3);
    let model = tiny(15);
    let cfg = FinetuneConfig {
        loss: LossKind::Mse,
        ..finetune_cfg(1, ForceMode::Direct)
    };
    let items = prepare(&model, &data, true).unwrap();
    let refs: Vec<&Labelled> = items.iter().collect();
    let (_, _, grads) = finetune_gradients(&model, &refs, &cfg);
    let oracle = |m: &Model| {
        let mut total = 0.0;
        let mut nf = 0.0;
        let mut lf = 0.0;
        for l in &items {
            let e = m.energy(&l.structure, &l.graph);
            total += ((e - l.energy) / l.structure.len() as f64).powi(2);
            for (p, q) in m.forces_direct(&l.structure, &l.graph).iter().zip(l.forces.as_ref().unwrap()) {
                for a in 0..3 {
                    lf += (p[a] - q[a]).powi(2);
                    nf += 1.0;
                }
            }
        }
        cfg.lambda_energy * total / items.len() as f64 + cfg.lambda_force * lf / nf
    };
    for name in ["head.force.0.w", "head.energy.0.w", "struct.in.w"] {
        let c = ParamCoord { name: name.into(), index: 1 };
        let mut m = model.clone();
        let v = m.params.read(&c);
        m.params.write(&c, v + 1e-5);
        let up = oracle(&m);
        m.params.write(&c, v - 1e-5);
        let dn = oracle(&m);
        let fd = (up - dn) / 2e-5;
        assert!(relative_error(grads.read(&c), fd, 1e-6) < 1e-4, "{name}: {} vs {fd}", grads.read(&c));
    }
}

#[test]
fn conservative_finetune_on_pair_potential_improves_energy_fivefold() {
    let data = pair_data(12, 240);
    let (train, test) = data.split_at(200);
    let mut cfg = finetune_cfg(2000, ForceMode::Conservative);
    cfg.optimizer.warmup = 100;
    cfg.optimizer.batch_size = 8;
    let out = finetune(tiny(16), train, test, &cfg).unwrap();
    println!("energy MAE {:.2} -> {:.2} meV/atom, force MAE {:.1} -> {:.1} meV/Å", out.initial.energy_mae, out.metrics.energy_mae, out.initial.force_mae, out.metrics.force_mae);
    assert!(out.metrics.energy_mae * 5.0 <= out.initial.energy_mae);
}

#[test]
fn finetune_is_reproducible() {
    let data = pair_data(13, 8);
    let cfg = finetune_cfg(3, ForceMode::Conservative);
    let a = finetune(tiny(17), &data, &data, &cfg).unwrap();
    let b = finetune(tiny(17), &data, &data, &cfg).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.csv(), b.csv());
}

