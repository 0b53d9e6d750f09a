//! Radial bases, smooth cosine envelopes and real spherical harmonics.
//!
//! All functions are generic over [`Scalar`] so the same code evaluates plain
//! `f64` values and forward-mode [`Dual`] numbers; the autodiff tape uses the
//! dual path to get exact per-edge Jacobians.
//!
//! Spherical-harmonic convention: real, orthonormal on the unit sphere, no
//! Condon–Shortley phase, flattened as index `l² + l + m` for `m = -l..=l`.
//! `m > 0` components carry `cos(mφ)`, `m < 0` carry `sin(|m|φ)`.

use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;

    fn scale(self, c: f64) -> Self {
        self * Self::cst(c)
    }
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

/// Forward-mode dual number with `N` tangent directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn variable(v: f64, slot: usize) -> Self {
        let mut d = [0.0; N];
        d[slot] = 1.0;
        Self { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        Self {
            v,
            d: std::array::from_fn(|i| (self.d[i] - v * o.d[i]) * inv),
        }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl<const N: usize> Scalar for Dual<N> {
    fn cst(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }
    fn value(self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn scale(self, c: f64) -> Self {
        Self {
            v: self.v * c,
            d: self.d.map(|x| x * c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RadialKind {
    Bessel,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialBasisSpec {
    pub kind: RadialKind,
    pub count: usize,
    pub r_cut: f64,
}

impl RadialBasisSpec {
    pub fn bessel(count: usize, r_cut: f64) -> Self {
        Self {
            kind: RadialKind::Bessel,
            count,
            r_cut,
        }
    }

    pub fn gaussian(count: usize, r_cut: f64) -> Self {
        Self {
            kind: RadialKind::Gaussian,
            count,
            r_cut,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return domain("radial basis needs at least one function");
        }
        if !(self.r_cut > 0.0) {
            return domain(format!("radial cutoff must be positive, got {}", self.r_cut));
        }
        Ok(())
    }

    /// Gaussian centers, uniform on `[0, r_cut]`; the width equals the spacing.
    pub fn gaussian_centers(&self) -> (Vec<f64>, f64) {
        if self.count == 1 {
            return (vec![0.0], self.r_cut);
        }
        let step = self.r_cut / (self.count - 1) as f64;
        ((0..self.count).map(|k| k as f64 * step).collect(), step)
    }

    pub fn eval_into<S: Scalar>(&self, r: S, out: &mut Vec<S>) {
        match self.kind {
            RadialKind::Bessel => {
                let pref = (2.0 / self.r_cut).sqrt();
                for k in 1..=self.count {
                    let arg = r.scale(k as f64 * PI / self.r_cut);
                    out.push(arg.sin().scale(pref) / r);
                }
            }
            RadialKind::Gaussian => {
                let (centers, width) = self.gaussian_centers();
                for mu in centers {
                    let u = (r - S::cst(mu)).scale(1.0 / width);
                    out.push((-(u * u).scale(0.5)).exp());
                }
            }
        }
    }
}

pub fn eval_radial(spec: &RadialBasisSpec, r: f64) -> Result<Vec<f64>> {
    spec.validate()?;
    if !(r > 0.0) {
        return domain(format!("radial basis needs r > 0, got {r}"));
    }
    let mut out = Vec::with_capacity(spec.count);
    spec.eval_into(r, &mut out);
    Ok(out)
}

/// `½(cos(π r / r_c) + 1)` inside the radius, zero outside.
pub fn cutoff<S: Scalar>(scale_radius: f64, r: S) -> S {
    if r.value() >= scale_radius {
        S::cst(0.0)
    } else {
        (r.scale(PI / scale_radius).cos() + S::cst(1.0)).scale(0.5)
    }
}

pub fn eval_cutoff(scale_radius: f64, r: f64) -> f64 {
    cutoff(scale_radius, r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffBank {
    pub scales: Vec<f64>,
}

impl Default for CutoffBank {
    fn default() -> Self {
        Self {
            scales: vec![0.5, 0.75, 1.0],
        }
    }
}

impl CutoffBank {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return domain(format!("cutoff scales must lie in (0, 1]: {:?}", self.scales));
        }
        Ok(())
    }
}

/// Concatenated `[s_1 φ_1..φ_K ‖ … ‖ s_S φ_1..φ_K]`.
pub fn multiscale_into<S: Scalar>(
    spec: &RadialBasisSpec,
    bank: &CutoffBank,
    r: S,
    scratch: &mut Vec<S>,
    out: &mut Vec<S>,
) {
    scratch.clear();
    spec.eval_into(r, scratch);
    for &s in &bank.scales {
        if r.value() >= s * spec.r_cut {
            out.extend(std::iter::repeat_n(S::cst(0.0), scratch.len()));
        } else {
            let env = cutoff(s * spec.r_cut, r);
            out.extend(scratch.iter().map(|&p| env * p));
        }
    }
}

pub fn multiscale_features(spec: &RadialBasisSpec, bank: &CutoffBank, r: f64) -> Result<Vec<f64>> {
    spec.validate()?;
    bank.validate()?;
    if !(r > 0.0) {
        return domain(format!("radial features need r > 0, got {r}"));
    }
    let mut scratch = Vec::new();
    let mut out = Vec::with_capacity(spec.count * bank.scales.len());
    multiscale_into(spec, bank, r, &mut scratch, &mut out);
    Ok(out)
}

pub fn num_harmonics(l_max: usize) -> usize {
    (l_max + 1) * (l_max + 1)
}

#[inline]
pub fn sh_index(l: usize, m: i64) -> usize {
    ((l * l + l) as i64 + m) as usize
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Real spherical harmonics of the direction `(x, y, z)`, which must be unit
/// length. Evaluated in Cartesian form: `Y_lm ∝ Q_l^m(z) · Re/Im (x + i y)^m`
/// with `Q_l^m` the associated Legendre function divided by `(1 - z²)^{m/2}`.
pub fn sph_harm_into<S: Scalar>(dir: [S; 3], l_max: usize, out: &mut Vec<S>) {
    let [x, y, z] = dir;
    let base = out.len();
    out.extend(std::iter::repeat_n(S::cst(0.0), num_harmonics(l_max)));
    let ys = &mut out[base..];

    // (x + i y)^m
    let mut cm = vec![S::cst(1.0)];
    let mut sm = vec![S::cst(0.0)];
    for m in 1..=l_max {
        let (c, s) = (cm[m - 1], sm[m - 1]);
        cm.push(c * x - s * y);
        sm.push(c * y + s * x);
    }

    for m in 0..=l_max {
        // Q_m^m = (2m-1)!!
        let dfact: f64 = (1..=m).map(|k| (2 * k - 1) as f64).product();
        let mut q_below = S::cst(0.0);
        let mut q = S::cst(dfact);
        for l in m..=l_max {
            if l > m {
                let a = (2 * l - 1) as f64;
                let b = (l + m - 1) as f64;
                let next = (z.scale(a) * q - q_below.scale(b)).scale(1.0 / (l - m) as f64);
                q_below = q;
                q = next;
            }
            let norm = ((2 * l + 1) as f64 / (4.0 * PI) * factorial(l - m) / factorial(l + m)).sqrt();
            if m == 0 {
                ys[sh_index(l, 0)] = q.scale(norm);
            } else {
                let n2 = norm * std::f64::consts::SQRT_2;
                ys[sh_index(l, m as i64)] = (q * cm[m]).scale(n2);
                ys[sh_index(l, -(m as i64))] = (q * sm[m]).scale(n2);
            }
        }
    }
}

pub fn eval_sph_harm(direction: [f64; 3], l_max: usize) -> Result<Vec<f64>> {
    let n = (direction[0].powi(2) + direction[1].powi(2) + direction[2].powi(2)).sqrt();
    if !((n - 1.0).abs() <= 1e-8) {
        return domain(format!("direction must be unit length, |d| = {n}"));
    }
    let mut out = Vec::with_capacity(num_harmonics(l_max));
    sph_harm_into(direction, l_max, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
        // Marsaglia
        loop {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            let s = a * a + b * b;
            if s < 1.0 {
                let f = 2.0 * (1.0 - s).sqrt();
                return [a * f, b * f, 1.0 - 2.0 * s];
            }
        }
    }

    #[test]
    fn bessel_values() {
        let spec = RadialBasisSpec::bessel(1, 6.0);
        assert!(eval_radial(&spec, 6.0).unwrap()[0].abs() < 1e-16);
        let v = eval_radial(&spec, 3.0).unwrap()[0];
        assert!((v - (1.0f64 / 3.0).sqrt() / 3.0).abs() < 1e-15);
        assert!((v - 0.19245).abs() < 1e-5);
        assert!(eval_radial(&spec, 0.0).is_err());
        assert!(eval_radial(&spec, -1.0).is_err());
    }

    #[test]
    fn gaussian_peaks_at_centers() {
        let spec = RadialBasisSpec::gaussian(5, 4.0);
        let (centers, _) = spec.gaussian_centers();
        for (k, &c) in centers.iter().enumerate().skip(1) {
            assert_eq!(eval_radial(&spec, c).unwrap()[k], 1.0);
        }
    }

    #[test]
    fn cosine_cutoff_values() {
        assert_eq!(eval_cutoff(3.0, 0.0), 1.0);
        assert_eq!(eval_cutoff(3.0, 3.0), 0.0);
        assert!((eval_cutoff(3.0, 1.5) - 0.5).abs() < 1e-15);
        assert_eq!(eval_cutoff(3.0, 4.0), 0.0);
    }

    #[test]
    fn multiscale_blocks() {
        let spec = RadialBasisSpec::bessel(4, 6.0);
        let bank = CutoffBank::default();
        let beyond = multiscale_features(&spec, &bank, 6.5).unwrap();
        assert!(beyond.iter().all(|&v| v == 0.0));
        let half = multiscale_features(&spec, &bank, 3.0).unwrap();
        assert!(half[..4].iter().all(|&v| v == 0.0));
        assert!(half[4..8].iter().any(|&v| v != 0.0));
        assert!(half[8..].iter().any(|&v| v != 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let r: f64 = rng.random_range(0.05..6.0);
            let feats = multiscale_features(&spec, &bank, r).unwrap();
            let rad = eval_radial(&spec, r).unwrap();
            for (s, &scale) in bank.scales.iter().enumerate() {
                let env = eval_cutoff(scale * 6.0, r);
                for k in 0..4 {
                    assert_eq!(feats[s * 4 + k], env * rad[k]);
                }
            }
        }
    }

    #[test]
    fn sph_harm_closed_forms() {
        let y = eval_sph_harm([0.0, 0.0, 1.0], 4).unwrap();
        assert!((y[0] - 0.5 / PI.sqrt()).abs() < 1e-15);
        assert!((y[0] - 0.28209).abs() < 1e-5);
        assert!((y[sh_index(1, 0)] - (3.0 / (4.0 * PI)).sqrt()).abs() < 1e-15);
        assert!((y[sh_index(1, 0)] - 0.48860).abs() < 1e-5);
        for l in 0..=4usize {
            for m in -(l as i64)..=(l as i64) {
                if m != 0 {
                    assert_eq!(y[sh_index(l, m)], 0.0);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_unit(&mut rng);
        assert!((eval_sph_harm(d, 2).unwrap()[0] - 0.5 / PI.sqrt()).abs() < 1e-15);
        // Y_11 ∝ x, Y_1-1 ∝ y without phase
        let c1 = (3.0 / (4.0 * PI)).sqrt();
        let y = eval_sph_harm(d, 1).unwrap();
        assert!((y[sh_index(1, 1)] - c1 * d[0]).abs() < 1e-14);
        assert!((y[sh_index(1, -1)] - c1 * d[1]).abs() < 1e-14);
        assert!(eval_sph_harm([1.0, 1.0, 0.0], 2).is_err());
    }

    #[test]
    fn sph_harm_monte_carlo_orthonormality() {
        let l_max = 4;
        let nh = num_harmonics(l_max);
        let mut gram = vec![0.0; nh * nh];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = 1_000_000;
        let mut ys = Vec::with_capacity(nh);
        for _ in 0..samples {
            ys.clear();
            sph_harm_into(random_unit(&mut rng), l_max, &mut ys);
            for a in 0..nh {
                for b in a..nh {
                    gram[a * nh + b] += ys[a] * ys[b];
                }
            }
        }
        let w = 4.0 * PI / samples as f64;
        for a in 0..nh {
            for b in a..nh {
                let expect = if a == b { 1.0 } else { 0.0 };
                let got = gram[a * nh + b] * w;
                assert!((got - expect).abs() < 5e-3, "({a},{b}) -> {got}");
            }
        }
    }

    #[test]
    fn per_l_norm_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let d = random_unit(&mut rng);
            let rot = crate::linalg::random_rotation(&mut rng);
            let rd = crate::structure::mat_vec(&rot, &d);
            let n = (rd[0] * rd[0] + rd[1] * rd[1] + rd[2] * rd[2]).sqrt();
            let rd = [rd[0] / n, rd[1] / n, rd[2] / n];
            let (a, b) = (eval_sph_harm(d, 6).unwrap(), eval_sph_harm(rd, 6).unwrap());
            for l in 0..=6usize {
                let range = l * l..(l + 1) * (l + 1);
                let na: f64 = a[range.clone()].iter().map(|v| v * v).sum();
                let nb: f64 = b[range].iter().map(|v| v * v).sum();
                assert!((na - nb).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let spec_b = RadialBasisSpec::bessel(6, 5.0);
        let spec_g = RadialBasisSpec::gaussian(6, 5.0);
        let bank = CutoffBank::default();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in [spec_b, spec_g] {
            for _ in 0..40 {
                let r: f64 = rng.random_range(0.3..4.9);
                let mut scratch = Vec::new();
                let mut dual = Vec::new();
                multiscale_into(&spec, &bank, Dual::<1>::variable(r, 0), &mut scratch, &mut dual);
                let plus = multiscale_features(&spec, &bank, r + h).unwrap();
                let minus = multiscale_features(&spec, &bank, r - h).unwrap();
                for (i, d) in dual.iter().enumerate() {
                    let fd = (plus[i] - minus[i]) / (2.0 * h);
                    let scale = d.d[0].abs().max(1e-3);
                    assert!((fd - d.d[0]).abs() / scale < 1e-6, "{fd} vs {}", d.d[0]);
                }
            }
        }
        // harmonics along a direction parametrized by the raw vector
        for _ in 0..40 {
            let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let eval = |v: [f64; 3]| {
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                eval_sph_harm([v[0] / n, v[1] / n, v[2] / n], 4).unwrap()
            };
            let dv: [Dual<3>; 3] = std::array::from_fn(|a| Dual::variable(v[a], a));
            let n = (dv[0] * dv[0] + dv[1] * dv[1] + dv[2] * dv[2]).sqrt();
            let mut ys = Vec::new();
            sph_harm_into([dv[0] / n, dv[1] / n, dv[2] / n], 4, &mut ys);
            for a in 0..3 {
                let mut p = v;
                let mut m = v;
                p[a] += h;
                m[a] -= h;
                let (yp, ym) = (eval(p), eval(m));
                for (i, y) in ys.iter().enumerate() {
                    let fd = (yp[i] - ym[i]) / (2.0 * h);
                    let scale = y.d[a].abs().max(1e-2);
                    assert!((fd - y.d[a]).abs() / scale < 1e-6);
                }
            }
        }
    }
}
