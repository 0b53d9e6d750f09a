use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tristream::analysis::*;
use tristream::autodiff::Mat;
use tristream::model::Stream;
use tristream::structure::{norm3, LabelValue, Labels};
use tristream::synth::random_cluster;
use tristream::{AtomicStructure, Model, ModelConfig};

fn tiny(seed: u64) -> Model {
    Model::new(ModelConfig::tiny(), seed).unwrap()
}

fn clusters(seed: u64, n: usize) -> Vec<AtomicStructure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = rng.random_range(2..6);
            let species = (0..k).map(|_| [6u8, 8, 14, 26][rng.random_range(0..4)]).collect();
            random_cluster(&mut rng, species, 1.5)
        })
        .collect()
}

fn index_from(vectors: Mat, labels: Vec<RecordLabels>) -> EmbeddingIndex {
    EmbeddingIndex {
        comp: vectors.clone(),
        structure: vectors.clone(),
        interaction: vectors.clone(),
        joint: vectors,
        labels,
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

#[test]
fn duplicates_embed_identically() {
    let model = tiny(1);
    let mut data = clusters(1, 3);
    data.push(data[1].clone());
    let idx = embed_dataset(&model, &data).unwrap();
    for s in Stream::ALL {
        assert_eq!(idx.space(s).row(1), idx.space(s).row(3));
    }
}

#[test]
fn mean_nn_labels_from_geometry() {
    let model = tiny(2);
    let dimer = AtomicStructure::new(vec![8, 8], vec![[0.0; 3], [0.3, 1.1, -0.7]]).unwrap();
    let d = norm3(&[0.3, 1.1, -0.7]);
    let a = 3.7;
    let single = AtomicStructure::periodic(vec![26], vec![[0.2, 0.1, 0.0]], [[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]]).unwrap();
    let tri = AtomicStructure::periodic(
        vec![26],
        vec![[0.0; 3]],
        [[3.0, 0.0, 0.0], [1.5, 2.0, 0.0], [0.4, 0.3, 2.8]],
    )
    .unwrap();
    let idx = embed_dataset(&model, &[dimer, single, tri.clone()]).unwrap();
    assert!((idx.labels[0].mean_nn_distance.unwrap() - d).abs() < 1e-12);
    assert!((idx.labels[1].mean_nn_distance.unwrap() - a).abs() < 1e-12);
    // brute-force image search
    let cell = tri.cell.unwrap();
    let mut best = f64::INFINITY;
    for i in -3i32..=3 {
        for j in -3i32..=3 {
            for k in -3i32..=3 {
                if (i, j, k) == (0, 0, 0) {
                    continue;
                }
                let v: [f64; 3] = std::array::from_fn(|c| i as f64 * cell[0][c] + j as f64 * cell[1][c] + k as f64 * cell[2][c]);
                best = best.min(norm3(&v));
            }
        }
    }
    assert!((idx.labels[2].mean_nn_distance.unwrap() - best).abs() < 1e-12);
}

#[test]
fn retrieval_basics() {
    let v = Mat::from_shape_vec((4, 3), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let idx = index_from(v, vec![RecordLabels::default(); 4]);
    let r = knn_retrieve(&idx, 0, Stream::Comp, 2).unwrap();
    assert_eq!(r[0], (2, 1.0));
    assert_eq!(r[1], (1, 0.0));
    // the zero-norm record never appears
    let r = knn_retrieve(&idx, 1, Stream::Comp, 3).unwrap();
    assert!(r.iter().all(|(i, _)| *i != 3));
    assert!(knn_retrieve(&idx, 0, Stream::Comp, 4).is_err());
    assert!(knn_query(&idx, &[0.0; 3], Stream::Comp, 2, None).unwrap().is_empty());
}

#[test]
fn retrieval_matches_full_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = gaussian(&mut rng, 60, 5);
    let idx = index_from(v.clone(), vec![RecordLabels::default(); 60]);
    for q in 0..60 {
        let got = knn_retrieve(&idx, q, Stream::Struct, 7).unwrap();
        let cos = |a: usize, b: usize| {
            let (x, y) = (v.row(a), v.row(b));
            x.dot(&y) / (x.dot(&x).sqrt() * y.dot(&y).sqrt())
        };
        let mut all: Vec<(usize, f64)> = (0..60).filter(|&i| i != q).map(|i| (i, cos(q, i))).collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        for (g, o) in got.iter().zip(&all) {
            assert_eq!(g.0, o.0);
            assert!((g.1 - o.1).abs() < 1e-12);
        }
    }
}

fn labelled(sets: &[Vec<u8>], groups: &[i64]) -> Vec<RecordLabels> {
    sets.iter()
        .zip(groups)
        .map(|(s, g)| RecordLabels {
            element_set: s.clone(),
            space_group: Some(*g),
            ..Default::default()
        })
        .collect()
}

#[test]
fn recall_definitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = gaussian(&mut rng, 6, 3);
    let unique = index_from(v.clone(), labelled(&vec![vec![1]; 6], &[1, 2, 3, 4, 5, 6]));
    let r = recall_at_k(&unique, Stream::Comp, RetrievalTarget::SpaceGroup, 3).unwrap();
    assert_eq!((r.recall, r.evaluated, r.skipped), (0.0, 0, 6));
    let r = recall_at_k(&unique, Stream::Comp, RetrievalTarget::ElementSet, 1).unwrap();
    assert_eq!((r.recall, r.evaluated), (1.0, 6));

    // two well-separated clusters
    let mut v = gaussian(&mut rng, 20, 4) * 0.05;
    for i in 0..20 {
        v[[i, if i < 10 { 0 } else { 1 }]] += 1.0;
    }
    let groups: Vec<i64> = (0..20).map(|i| (i / 10) as i64).collect();
    let idx = index_from(v, labelled(&vec![vec![1]; 20], &groups));
    assert_eq!(recall_at_k(&idx, Stream::Int, RetrievalTarget::SpaceGroup, 1).unwrap().recall, 1.0);
}

#[test]
fn recall_is_monotone_in_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = gaussian(&mut rng, 80, 6);
    let groups: Vec<i64> = (0..80).map(|_| rng.random_range(0..8)).collect();
    let idx = index_from(v, labelled(&vec![vec![1]; 80], &groups));
    let mut prev = 0.0;
    for k in 1..40 {
        let r = recall_at_k(&idx, Stream::Joint, RetrievalTarget::SpaceGroup, k).unwrap().recall;
        assert!(r >= prev);
        prev = r;
    }
}

#[test]
fn stream_rankings_respect_their_invariances() {
    let model = tiny(6);
    let data = clusters(6, 12);
    let idx = embed_dataset(&model, &data).unwrap();
    let query = &data[3];
    let emb = |s: &AtomicStructure| embed_dataset(&model, std::slice::from_ref(s)).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut moved = query.clone();
    for p in &mut moved.positions {
        for x in p.iter_mut() {
            *x += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    let a = knn_query(&idx, &emb(query).comp.row(0).to_vec(), Stream::Comp, 8, Some(3)).unwrap();
    let b = knn_query(&idx, &emb(&moved).comp.row(0).to_vec(), Stream::Comp, 8, Some(3)).unwrap();
    assert_eq!(a, b);

    let mut relabeled = query.clone();
    relabeled.species = relabeled.species.iter().map(|&z| if z == 26 { 6 } else { 26 }).collect();
    let a = knn_query(&idx, &emb(query).structure.row(0).to_vec(), Stream::Struct, 8, Some(3)).unwrap();
    let b = knn_query(&idx, &emb(&relabeled).structure.row(0).to_vec(), Stream::Struct, 8, Some(3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn index_file_round_trip() {
    let model = tiny(8);
    let idx = embed_dataset(&model, &clusters(8, 5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.bin");
    idx.save(&path).unwrap();
    let back = EmbeddingIndex::load(&path).unwrap();
    assert_eq!(back.labels, idx.labels);
    for s in Stream::ALL {
        let expect = idx.space(s).mapv(|v| v as f32 as f64);
        assert_eq!(back.space(s), &expect);
    }
    let bytes = idx.to_bytes().unwrap();
    assert!(EmbeddingIndex::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn linear_probe_recovers_planted_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = gaussian(&mut rng, 300, 12);
    let w: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<f64> = (0..300).map(|i| 0.7 + x.row(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).collect();
    let train: Vec<usize> = (0..200).collect();
    let test: Vec<usize> = (200..300).collect();
    let rep = probe_with_labels(&x, &ProbeLabels::Values(y), ProbeHead::Linear, &train, &test, &ProbeConfig::default()).unwrap();
    let ProbeReport::Regression { mae, target_scale, mean_baseline } = rep else { panic!() };
    assert!(mae <= 1e-3 * target_scale, "{mae} vs scale {target_scale}");
    assert!(mean_baseline > 100.0 * mae);
}

#[test]
fn classification_probe_and_shuffled_control() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 400;
    let x = gaussian(&mut rng, n, 6);
    let classes: Vec<i64> = (0..n).map(|i| if x[[i, 0]] + 0.5 * x[[i, 1]] > 0.0 { 1 } else { 0 } + if x[[i, 2]] > 0.0 { 2 } else { 0 }).collect();
    let train: Vec<usize> = (0..300).collect();
    let test: Vec<usize> = (300..n).collect();
    let labels = ProbeLabels::Classes(classes);
    let cfg = ProbeConfig {
        seed: 1,
        ..Default::default()
    };
    let ProbeReport::Classification { accuracy, chance, majority_baseline, .. } =
        probe_with_labels(&x, &labels, ProbeHead::Linear, &train, &test, &cfg).unwrap()
    else {
        panic!()
    };
    assert!(accuracy > 0.9, "{accuracy}");
    assert_eq!(chance, 0.25);
    let shuffled = ProbeConfig {
        shuffle_labels: true,
        ..cfg
    };
    let ProbeReport::Classification { accuracy: acc_s, .. } = probe_with_labels(&x, &labels, ProbeHead::Linear, &train, &test, &shuffled).unwrap() else {
        panic!()
    };
    println!("accuracy {accuracy:.3}, shuffled {acc_s:.3}, chance {chance}, majority {majority_baseline:.3}");
    assert!((acc_s - chance).abs() < 0.1, "{acc_s}");
}

#[test]
fn mlp_probe_fits_a_nonlinear_target_and_reports_absent_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = gaussian(&mut rng, 300, 4);
    let y: Vec<f64> = (0..300).map(|i| x[[i, 0]] * x[[i, 1]]).collect();
    let train: Vec<usize> = (0..240).collect();
    let test: Vec<usize> = (240..300).collect();
    let cfg = ProbeConfig {
        hidden: 32,
        ..Default::default()
    };
    let ProbeReport::Regression { mae, mean_baseline, .. } = probe_with_labels(&x, &ProbeLabels::Values(y.clone()), ProbeHead::Mlp, &train, &test, &cfg).unwrap() else {
        panic!()
    };
    let ProbeReport::Regression { mae: lin, .. } = probe_with_labels(&x, &ProbeLabels::Values(y), ProbeHead::Linear, &train, &test, &cfg).unwrap() else {
        panic!()
    };
    assert!(mae < 0.5 * lin && mae < mean_baseline, "mlp {mae} linear {lin}");

    let classes: Vec<i64> = (0..300).map(|i| if i < 240 { (i % 2) as i64 } else { 7 }).collect();
    let ProbeReport::Classification { absent_from_train, accuracy, .. } =
        probe_with_labels(&x, &ProbeLabels::Classes(classes), ProbeHead::Linear, &train, &test, &cfg).unwrap()
    else {
        panic!()
    };
    assert_eq!(absent_from_train, vec![7]);
    assert_eq!(accuracy, 0.0);
}

#[test]
fn probe_reads_dataset_labels() {
    let model = tiny(12);
    let mut data = clusters(12, 10);
    for (i, s) in data.iter_mut().enumerate() {
        let mut l = Labels::default();
        l.insert("crystal_system", LabelValue::Int((i % 2) as i64));
        *s = s.clone().with_labels(l);
    }
    let idx = embed_dataset(&model, &data).unwrap();
    let train: Vec<usize> = (0..7).collect();
    let test: Vec<usize> = (7..10).collect();
    assert!(probe(&idx, Stream::Comp, ProbeTarget::CrystalSystem, ProbeHead::Linear, &train, &test, &ProbeConfig::default()).is_ok());
    assert!(probe(&idx, Stream::Comp, ProbeTarget::FormationEnergy, ProbeHead::Linear, &train, &test, &ProbeConfig::default()).is_err());
    let rep = probe(&idx, Stream::Joint, ProbeTarget::MeanNnDistance, ProbeHead::Linear, &train, &test, &ProbeConfig::default()).unwrap();
    assert!(matches!(rep, ProbeReport::Regression { .. }));
}

#[test]
fn uniformity_matches_sphere_closed_form() {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let v = gaussian(&mut rng, 1500, d);
    let got = uniformity(&v).unwrap();
    // E exp(−2‖x−y‖²) = e^{−4} E e^{4t}, t = x·y with density ∝ (1 − t²)^{(d−3)/2}
    let steps = 20_000;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=steps {
        let t = -1.0 + 2.0 * i as f64 / steps as f64;
        let w = (1.0 - t * t).max(0.0).powf((d as f64 - 3.0) / 2.0) * if i == 0 || i == steps { 0.5 } else { 1.0 };
        num += w * (4.0 * t).exp();
        den += w;
    }
    let expect = -4.0 + (num / den).ln();
    assert!(((got - expect) / expect).abs() < 0.02, "{got} vs {expect}");
}

#[test]
fn sensitivity_isolates_streams_and_matches_finite_differences() {
    let s = clusters(14, 1).remove(0);
    let mut model = tiny(14);
    let [(_, c1), _, _] = model.slices();
    {
        let w = model.params.get_mut("head.energy.0.w").unwrap();
        for i in c1..w.nrows() {
            w.row_mut(i).fill(0.0);
        }
    }
    for t in [SensitivityTarget::Energy, SensitivityTarget::ForceNormSum] {
        let sens = stream_sensitivity(&model, &s, t).unwrap();
        // composition features do not move with positions, so a
        // composition-only head has no forces at all
        assert_eq!(sens[0] > 0.0, t == SensitivityTarget::Energy);
        assert_eq!(&sens[1..], &[0.0, 0.0], "{t:?}");
    }

    let model = tiny(15);
    let g = model.graph(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for t in [SensitivityTarget::Energy, SensitivityTarget::ForceNormSum] {
        let grad = sensitivity_gradient(&model, &s, &g, t);
        // slices partition the columns
        let sens = stream_sensitivity(&model, &s, t).unwrap();
        let slices = model.slices();
        for r in grad.rows() {
            let total: f64 = r.iter().map(|v| v * v).sum();
            let parts: f64 = slices.iter().map(|(a, b)| r.slice(ndarray::s![*a..*b]).iter().map(|v| v * v).sum::<f64>()).sum();
            assert!((total - parts).abs() <= 1e-12 * total.max(1e-300));
        }
        assert!(sens.iter().all(|v| v.is_finite()));
        for _ in 0..3 {
            let dir = gaussian(&mut rng, grad.nrows(), grad.ncols());
            let h = 1e-5;
            let up = target_with_offset(&model, &s, &g, t, &(&dir * h));
            let dn = target_with_offset(&model, &s, &g, t, &(&dir * -h));
            let fd = (up - dn) / (2.0 * h);
            let an: f64 = grad.iter().zip(dir.iter()).map(|(a, b)| a * b).sum();
            assert!((an - fd).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-8), "{t:?}: {an} vs {fd}");
        }
    }
}
