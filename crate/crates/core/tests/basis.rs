use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tristream::basis::*;

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

fn legendre(l: usize, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if l == 0 {
        return p0;
    }
    for k in 1..l {
        let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
        p0 = p1;
        p1 = p2;
    }
    p1
}

#[test]
fn radial_closed_forms() {
    let b = RadialBasisSpec::bessel(1, 6.0);
    assert!(eval_radial(&b, 6.0).unwrap()[0].abs() < 1e-16);
    let want = (2.0f64 / 6.0).sqrt() * (PI / 2.0).sin() / 3.0;
    assert!((eval_radial(&b, 3.0).unwrap()[0] - want).abs() < 1e-15);
    assert!(eval_radial(&b, 0.0).is_err());
    assert!(eval_radial(&b, -1.0).is_err());

    let g = RadialBasisSpec::gaussian(7, 6.0);
    let (centers, _) = g.gaussian_centers();
    for (k, c) in centers.iter().enumerate() {
        if *c > 0.0 {
            assert_eq!(eval_radial(&g, *c).unwrap()[k], 1.0);
        }
    }
}

#[test]
fn cosine_cutoff_landmarks() {
    assert_eq!(eval_cutoff(4.0, 0.0), 1.0);
    assert_eq!(eval_cutoff(4.0, 4.0), 0.0);
    assert!((eval_cutoff(4.0, 2.0) - 0.5).abs() < 1e-15);
    assert_eq!(eval_cutoff(4.0, 7.0), 0.0);
    // one-sided slopes vanish at the radius
    let h = 1e-6;
    assert!(((eval_cutoff(4.0, 4.0 - h) - eval_cutoff(4.0, 4.0 - 2.0 * h)) / h).abs() < 1e-5);
}

#[test]
fn real_harmonics_match_explicit_low_order_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let d = random_unit(&mut rng);
        let [x, y, z] = d;
        let y_ = eval_sph_harm(d, 2).unwrap();
        let c1 = (3.0 / (4.0 * PI)).sqrt();
        let expect = [
            (sh_index(0, 0), 0.5 / PI.sqrt()),
            (sh_index(1, -1), c1 * y),
            (sh_index(1, 0), c1 * z),
            (sh_index(1, 1), c1 * x),
            (sh_index(2, -2), (15.0 / (4.0 * PI)).sqrt() * x * y),
            (sh_index(2, -1), (15.0 / (4.0 * PI)).sqrt() * y * z),
            (sh_index(2, 0), (5.0 / (16.0 * PI)).sqrt() * (3.0 * z * z - 1.0)),
            (sh_index(2, 1), (15.0 / (4.0 * PI)).sqrt() * x * z),
            (sh_index(2, 2), (15.0 / (16.0 * PI)).sqrt() * (x * x - y * y)),
        ];
        for (i, v) in expect {
            assert!((y_[i] - v).abs() < 1e-12, "index {i}: {} vs {v}", y_[i]);
        }
    }
}

#[test]
fn harmonics_along_z_are_zonal() {
    let y = eval_sph_harm([0.0, 0.0, 1.0], 6).unwrap();
    for l in 0..=6usize {
        for m in -(l as i64)..=(l as i64) {
            let v = y[sh_index(l, m)];
            if m == 0 {
                assert!((v - ((2 * l + 1) as f64 / (4.0 * PI)).sqrt()).abs() < 1e-12);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }
    assert!(eval_sph_harm([0.0, 0.0, 1.1], 2).is_err());
}

#[test]
fn addition_theorem_holds_to_l_six() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let a = random_unit(&mut rng);
        let b = random_unit(&mut rng);
        let ya = eval_sph_harm(a, 6).unwrap();
        let yb = eval_sph_harm(b, 6).unwrap();
        let cos = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        for l in 0..=6 {
            let s: f64 = (l * l..(l + 1) * (l + 1)).map(|i| ya[i] * yb[i]).sum();
            let want = (2 * l + 1) as f64 / (4.0 * PI) * legendre(l, cos);
            assert!((s - want).abs() < 1e-12, "l={l}: {s} vs {want}");
        }
    }
}

#[test]
fn monte_carlo_orthonormality() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let l_max = 4;
    let n = num_harmonics(l_max);
    let samples = 1_000_000;
    let mut gram = vec![0.0; n * n];
    for _ in 0..samples {
        let y = eval_sph_harm(random_unit(&mut rng), l_max).unwrap();
        for i in 0..n {
            for j in i..n {
                gram[i * n + j] += y[i] * y[j];
            }
        }
    }
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            let v = 4.0 * PI * gram[i * n + j] / samples as f64;
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v - want).abs());
        }
    }
    assert!(worst <= 5e-3, "{worst}");
}

#[test]
fn multiscale_blocks_are_products_of_envelopes_and_radials() {
    let spec = RadialBasisSpec::bessel(8, 6.0);
    let bank = CutoffBank::default();
    assert!(multiscale_features(&spec, &bank, 6.5).unwrap().iter().all(|&v| v == 0.0));
    let half = multiscale_features(&spec, &bank, 3.0).unwrap();
    assert!(half[..8].iter().all(|&v| v == 0.0));
    assert!(half[8..].iter().any(|&v| v != 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let r = rng.random_range(0.05..6.0);
        let f = multiscale_features(&spec, &bank, r).unwrap();
        let radial = eval_radial(&spec, r).unwrap();
        for (s, &frac) in bank.scales.iter().enumerate() {
            let env = eval_cutoff(frac * 6.0, r);
            for k in 0..8 {
                assert_eq!(f[s * 8 + k], env * radial[k]);
            }
        }
    }
}

#[test]
fn dual_derivatives_match_central_differences() {
    let bank = CutoffBank::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for spec in [RadialBasisSpec::bessel(6, 5.0), RadialBasisSpec::gaussian(6, 5.0)] {
        for _ in 0..50 {
            let r = rng.random_range(0.3..4.9);
            let mut scratch = Vec::new();
            let mut out: Vec<Dual<1>> = Vec::new();
            multiscale_into(&spec, &bank, Dual::<1>::variable(r, 0), &mut scratch, &mut out);
            let h = 1e-6;
            let p = multiscale_features(&spec, &bank, r + h).unwrap();
            let m = multiscale_features(&spec, &bank, r - h).unwrap();
            for (k, d) in out.iter().enumerate() {
                let fd = (p[k] - m[k]) / (2.0 * h);
                let scale = d.d[0].abs().max(fd.abs()).max(1e-3);
                assert!((d.d[0] - fd).abs() / scale < 1e-6, "{} vs {fd}", d.d[0]);
            }
        }
    }
}
