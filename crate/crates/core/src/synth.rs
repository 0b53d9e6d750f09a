//! Synthetic datasets with closed-form labels.
//!
//! * [`PairPotential`]: Lennard-Jones energy with per-species well depths and
//!   per-species reference energies, truncated and shifted at a cutoff.
//! * [`retrieval_corpus`]: every (composition family × geometry family) cross,
//!   so the two label kinds are statistically independent.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::structure::{norm3, AtomicStructure, LabelValue, Labels, Mat3, Vec3};

/// `E = Σ_i e0(z_i) + Σ_{i<j} 4 ε_ij [(σ/r)^12 − (σ/r)^6 − shift]` for
/// `r < r_cut`, with `ε_ij = √(ε_i ε_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairPotential {
    pub species: Vec<u8>,
    pub epsilon: Vec<f64>,
    pub reference: Vec<f64>,
    pub sigma: f64,
    pub r_cut: f64,
}

impl Default for PairPotential {
    fn default() -> Self {
        Self {
            species: vec![6, 8, 14, 26],
            epsilon: vec![0.05, 0.12, 0.25, 0.4],
            reference: vec![-1.5, -2.0, -3.0, -4.5],
            sigma: 2.0,
            r_cut: 5.0,
        }
    }
}

impl PairPotential {
    fn slot(&self, z: u8) -> usize {
        self.species.iter().position(|&s| s == z).expect("species covered by the potential")
    }

    fn lj(&self, eps: f64, r: f64) -> (f64, f64) {
        let sr6 = (self.sigma / r).powi(6);
        let sc6 = (self.sigma / self.r_cut).powi(6);
        let e = 4.0 * eps * (sr6 * sr6 - sr6 - (sc6 * sc6 - sc6));
        // dE/dr
        let de = 4.0 * eps * (-12.0 * sr6 * sr6 + 6.0 * sr6) / r;
        (e, de)
    }

    /// Energy and forces of a non-periodic structure.
    pub fn evaluate(&self, s: &AtomicStructure) -> (f64, Vec<Vec3>) {
        let n = s.len();
        let mut e: f64 = s.species.iter().map(|&z| self.reference[self.slot(z)]).sum();
        let mut f = vec![[0.0; 3]; n];
        for i in 0..n {
            for j in i + 1..n {
                let d: Vec3 = std::array::from_fn(|a| s.positions[j][a] - s.positions[i][a]);
                let r = norm3(&d);
                if r >= self.r_cut {
                    continue;
                }
                let eps = (self.epsilon[self.slot(s.species[i])] * self.epsilon[self.slot(s.species[j])]).sqrt();
                let (eij, de) = self.lj(eps, r);
                e += eij;
                for a in 0..3 {
                    let g = de * d[a] / r;
                    // ∂E/∂x_j = g, ∂E/∂x_i = −g
                    f[j][a] -= g;
                    f[i][a] += g;
                }
            }
        }
        (e, f)
    }

    pub fn label(&self, s: AtomicStructure) -> AtomicStructure {
        let (e, f) = self.evaluate(&s);
        let mut labels = s.labels.clone();
        labels.insert("energy", LabelValue::Float(e));
        labels.insert("forces", LabelValue::PerAtom(f));
        s.with_labels(labels)
    }
}

/// Random non-periodic cluster with all pair distances ≥ `min_dist`, placed
/// by rejection sampling in a ball sized for roughly liquid density.
pub fn random_cluster<R: Rng + ?Sized>(rng: &mut R, species: Vec<u8>, min_dist: f64) -> AtomicStructure {
    let n = species.len();
    let radius = min_dist * (0.9 * n as f64).cbrt().max(1.0);
    let mut pos: Vec<Vec3> = Vec::with_capacity(n);
    let mut rad = radius;
    while pos.len() < n {
        let mut placed = false;
        for _ in 0..200 {
            let p: Vec3 = std::array::from_fn(|_| rng.random_range(-rad..rad));
            if norm3(&p) > rad {
                continue;
            }
            if pos.iter().all(|q| norm3(&std::array::from_fn(|a| p[a] - q[a])) >= min_dist) {
                pos.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            rad *= 1.1;
        }
    }
    AtomicStructure::new(species, pos).expect("valid cluster")
}

/// Clusters of 3–8 atoms drawn from the potential's species, labelled with
/// closed-form energies and forces.
pub fn pair_potential_dataset<R: Rng + ?Sized>(rng: &mut R, count: usize, pot: &PairPotential) -> Vec<AtomicStructure> {
    (0..count)
        .map(|_| {
            let n = rng.random_range(3..=8);
            let species: Vec<u8> = (0..n).map(|_| *pot.species.choose(rng).expect("species")).collect();
            pot.label(random_cluster(rng, species, 0.9 * pot.sigma))
        })
        .collect()
}

const CORPUS_ELEMENTS: [u8; 10] = [3, 6, 8, 11, 13, 14, 22, 26, 29, 47];

fn lattice(kind: usize, nn: f64) -> (Mat3, Vec<Vec3>) {
    let cube = |a: f64| [[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]];
    match kind {
        // simple cubic, doubled along x
        0 => {
            let a = nn;
            ([[2.0 * a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]], vec![[0.0; 3], [a, 0.0, 0.0]])
        }
        // body-centred cubic
        1 => {
            let a = 2.0 * nn / 3f64.sqrt();
            (cube(a), vec![[0.0; 3], [a / 2.0, a / 2.0, a / 2.0]])
        }
        // face-centred cubic
        2 => {
            let a = nn * 2f64.sqrt();
            let h = a / 2.0;
            (cube(a), vec![[0.0; 3], [h, h, 0.0], [h, 0.0, h], [0.0, h, h]])
        }
        // diamond
        3 => {
            let a = 4.0 * nn / 3f64.sqrt();
            let h = a / 2.0;
            let q = a / 4.0;
            let fcc = [[0.0; 3], [h, h, 0.0], [h, 0.0, h], [0.0, h, h]];
            let mut pos = fcc.to_vec();
            pos.extend(fcc.iter().map(|p| [p[0] + q, p[1] + q, p[2] + q]));
            (cube(a), pos)
        }
        // simple hexagonal
        _ => {
            let a = nn;
            let c = 2.0 * nn;
            let cell = [[a, 0.0, 0.0], [-0.5 * a, 0.5 * 3f64.sqrt() * a, 0.0], [0.0, 0.0, c]];
            let mut pos = vec![[0.0; 3]];
            pos.push([0.0, 0.0, 0.5 * c]);
            (cell, pos)
        }
    }
}

pub const GEOMETRY_KINDS: usize = 5;
pub const GEOMETRY_SCALES: [f64; 4] = [2.2, 2.5, 2.8, 3.1];

/// Element pairs used as composition families (distinct element sets).
pub fn composition_families(count: usize) -> Vec<[u8; 2]> {
    let mut out = Vec::new();
    for (i, &a) in CORPUS_ELEMENTS.iter().enumerate() {
        for &b in &CORPUS_ELEMENTS[i + 1..] {
            out.push([a, b]);
        }
    }
    // interleave so early families do not all share the first element
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(11);
    out.shuffle(&mut rng);
    out.truncate(count);
    out
}

/// One structure per (composition family, geometry family). Labels:
/// `space_group` = geometry family id (1-based), `crystal_system` = lattice
/// kind, `comp_family` = composition family id.
pub fn retrieval_corpus<R: Rng + ?Sized>(rng: &mut R, comp_families: usize) -> Vec<AtomicStructure> {
    let fams = composition_families(comp_families);
    let mut out = Vec::new();
    for (cf, pair) in fams.iter().enumerate() {
        for kind in 0..GEOMETRY_KINDS {
            for (si, &nn) in GEOMETRY_SCALES.iter().enumerate() {
                let jitter = 1.0 + 0.01 * rng.random_range(-1.0..1.0);
                let (cell, frac_free) = lattice(kind, nn * jitter);
                let n = frac_free.len();
                let mut species: Vec<u8> = (0..n).map(|i| pair[i % 2]).collect();
                species.shuffle(rng);
                let positions: Vec<Vec3> = frac_free
                    .iter()
                    .map(|p| {
                        std::array::from_fn(|a| {
                            let z: f64 = StandardNormal.sample(rng);
                            p[a] + 0.03 * z
                        })
                    })
                    .collect();
                let geom = kind * GEOMETRY_SCALES.len() + si;
                let mut labels = Labels::default();
                labels.insert("space_group", LabelValue::Int(geom as i64 + 1));
                labels.insert("crystal_system", LabelValue::Int(kind as i64));
                labels.insert("comp_family", LabelValue::Int(cf as i64));
                let s = AtomicStructure::periodic(species, positions, cell).expect("valid crystal");
                out.push(s.with_labels(labels));
            }
        }
    }
    out
}
