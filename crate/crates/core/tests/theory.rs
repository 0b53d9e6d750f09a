use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tristream::model::{EnergyHeadMode, GraphSample};
use tristream::structure::Vec3;
use tristream::theory::*;
use tristream::Model;

fn fused(m: usize, seed: u64) -> Model {
    Model::new(suite_config(m, EnergyHeadMode::Fused), seed).unwrap()
}

#[test]
fn coupling_identity_holds_for_random_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = fused(4, 1);
    let s = suite_structure(&mut rng, 4, false);
    let coords = sample_coordinates(&model.params, "", 60, &mut rng);
    let f_t: Vec<Vec3> = (0..4).map(|i| [0.1 * i as f64, -0.3, 0.2]).collect();
    let r = verify_grad_coupling(&model, &s, 1.7, &f_t, 0.8, &coords).unwrap();
    println!("{r:?}");
    assert!(r.discrepancy <= 1e-3);
    assert!(r.commutation <= 1e-3);
    assert!(r.gradient_norm > 0.0);
}

#[test]
fn coupling_identity_without_force_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = fused(4, 2);
    let s = suite_structure(&mut rng, 3, false);
    let coords = sample_coordinates(&model.params, "", 40, &mut rng);
    let f_t = vec![[1.0, 2.0, 3.0]; 3];
    let r = verify_grad_coupling(&model, &s, -4.0, &f_t, 0.0, &coords).unwrap();
    assert!(r.discrepancy <= 1e-6, "{}", r.discrepancy);
}

#[test]
fn perfect_predictions_give_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = fused(4, 3);
    let s = suite_structure(&mut rng, 4, false);
    let g = model.graph(&s).unwrap();
    let (e, f) = model.energy_and_forces(&[GraphSample::new(&s, &g)]);
    let coords = sample_coordinates(&model.params, "", 30, &mut rng);
    let r = verify_grad_coupling(&model, &s, e[0], &f[0], 1.0, &coords).unwrap();
    assert_eq!((r.loss, r.gradient_norm, r.discrepancy), (0.0, 0.0, 0.0));
}

#[test]
fn additive_head_leaves_forces_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = suite_structure(&mut rng, 8, false);
    let additive = Model::new(suite_config(4, EnergyHeadMode::Additive), 4).unwrap();
    let d = verify_additive_decoupling(&additive, &s, 1e-2, 9).unwrap();
    println!("additive {d:?}");
    assert!(d.force_change <= 1e-8);
    assert!(d.energy_change > 1e-3);

    let f = verify_additive_decoupling(&fused(4, 4), &s, 1e-2, 9).unwrap();
    println!("fused {f:?}");
    assert!(f.force_change > 0.0);

    let z = verify_additive_decoupling(&fused(4, 4), &s, 0.0, 9).unwrap();
    assert_eq!((z.force_change, z.energy_change), (0.0, 0.0));
}

fn spec(m: usize, activation: Activation, wc_rank: Option<usize>) -> RankBoundSpec {
    RankBoundSpec {
        d_c: 6,
        d_g: 5,
        m,
        trials: 20,
        activation,
        wc_rank,
        seed: 5,
    }
}

#[test]
fn cross_hessian_rank_bounds() {
    let full = verify_rank_bound(&spec(8, Activation::Silu, None));
    assert!(full.all_within_bound());
    assert!(full.worst_fd() <= 1e-4, "{}", full.worst_fd());

    let one = verify_rank_bound(&spec(1, Activation::Silu, None));
    assert!(one.trials.iter().all(|t| t.rank <= 1));

    let low = verify_rank_bound(&spec(8, Activation::Silu, Some(2)));
    assert!(low.trials.iter().all(|t| t.rank <= 2 && t.bound == 2));
    assert!(low.worst_fd() <= 1e-4);

    let lin = verify_rank_bound(&spec(4, Activation::Linear, None));
    assert!(lin.trials.iter().all(|t| t.max_abs == 0.0 && t.rank == 0));
}

#[test]
fn stacked_block_rank_and_null_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = fused(4, 6);
    let s = suite_structure(&mut rng, 4, true);
    // 200 composition coordinates, spread over the arrays
    let coords = sample_coordinates(&model.params, "comp.", 200, &mut rng);
    assert_eq!(coords.len(), 200);
    let r = verify_stacked_rank(&model, &s, &coords, 1e-4, 7).unwrap();
    println!("rank {} null {} sv {:?} top {:.3e} null {:.3e}", r.rank, r.null_dimension, &r.singular_values[..6], r.top_force_change, r.null_force_change);
    assert!(r.rank <= 4);
    assert!(r.null_dimension >= 196);
    assert!(r.null_force_change <= 1e-6);
    assert!(r.ratio() >= 1e3);
}

#[test]
fn zeroed_composition_weights_give_rank_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = fused(4, 8);
    let dc = model.config.comp.width;
    model.params.get_mut("head.energy.0.w").unwrap().rows_mut().into_iter().take(dc).for_each(|mut r| r.fill(0.0));
    let s = suite_structure(&mut rng, 3, true);
    let coords = model.params.coordinates("comp.");
    let r = verify_stacked_rank(&model, &s, &coords, 1e-4, 1).unwrap();
    assert_eq!(r.rank, 0, "{:?}", &r.singular_values[..3]);
}

#[test]
fn suite_emits_one_record_per_check() {
    let report = run_suite(&SuiteConfig {
        trials: 2,
        ..Default::default()
    })
    .unwrap();
    let lines = report.to_json_lines();
    assert_eq!(lines.lines().count(), report.checks.len());
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v.get("threshold").is_some());
    }
    for c in &report.checks {
        assert!(c.passed, "{c:?}");
    }
}
