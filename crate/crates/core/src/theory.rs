//! Numerical checks of how composition parameters couple to forces in
//! conservative training:
//!
//! * the loss-gradient identity `∇_θL = 2(E−E*)∇_θE − 2λ Σ_k (F_k−F_k*)ᵀ ∂²E/∂x_k∂θ`,
//! * force invariance under an additive composition energy term,
//! * rank bounds on the composition/geometry cross Hessian of a
//!   one-hidden-layer head and on the stacked mixed-Hessian block.
//!
//! Mixed-Hessian blocks are assembled from central differences of exact
//! reverse-mode gradients.

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::fd::parameter_jacobian4;
use crate::autodiff::{GradStore, Mat, ParamCoord, ParameterStore};
use crate::error::Result;
use crate::linalg::{numerical_rank, right_singular_vectors, singular_values};
use crate::model::{Batch, EnergyHeadMode, GraphSample, Model, ModelConfig};
use crate::structure::{AtomicStructure, NeighborGraph, Vec3};
use crate::train::{energy_parameter_gradient, force_pullback};

/// Relative singular-value threshold for numerical rank.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// One machine-readable check outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "serde_json::Value::is_null", default)]
    pub detail: serde_json::Value,
}

impl CheckRecord {
    /// Passes when `measured ≤ threshold`.
    pub fn at_most(name: impl Into<String>, measured: f64, threshold: f64, detail: serde_json::Value) -> Self {
        Self {
            name: name.into(),
            measured,
            threshold,
            passed: measured <= threshold,
            detail,
        }
    }

    /// Passes when `measured ≥ threshold`.
    pub fn at_least(name: impl Into<String>, measured: f64, threshold: f64, detail: serde_json::Value) -> Self {
        Self {
            name: name.into(),
            measured,
            threshold,
            passed: measured >= threshold,
            detail,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub checks: Vec<CheckRecord>,
}

impl CouplingReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        self.checks
            .iter()
            .map(|c| serde_json::to_string(c).expect("serializable record") + "\n")
            .collect()
    }
}

fn positions_mat(s: &AtomicStructure) -> Mat {
    Mat::from_shape_fn((s.len(), 3), |(i, a)| s.positions[i][a])
}

/// `∂E/∂x` flattened row-major, exact.
fn position_gradient(model: &Model, s: &AtomicStructure, g: &NeighborGraph) -> Vec<f64> {
    let (_, f) = model.energy_and_forces(&[GraphSample::new(s, g)]);
    f[0].iter().flatten().map(|v| -v).collect()
}

/// Rows are parameter coordinates, columns are position coordinates:
/// `∂/∂θ_c (∂E/∂x)`, by fourth-order differences of exact position
/// gradients in `θ`.
pub fn mixed_hessian(model: &Model, s: &AtomicStructure, g: &NeighborGraph, coords: &[ParamCoord], h: f64) -> Mat {
    let rows: Vec<Vec<f64>> = coords
        .par_chunks(16)
        .flat_map_iter(|chunk| {
            let m = parameter_jacobian4(&model.params, chunk, h, |p: &ParameterStore| {
                let probe = Model {
                    config: model.config.clone(),
                    params: p.clone(),
                };
                position_gradient(&probe, s, g)
            });
            m.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>()
        })
        .collect();
    let cols = 3 * s.len();
    Mat::from_shape_fn((coords.len(), cols), |(i, j)| rows[i][j])
}

/// Same block from the other side: `∂/∂x (∂E/∂θ_c)`, by differencing exact
/// parameter gradients in `x`.
pub fn mixed_hessian_transposed(model: &Model, s: &AtomicStructure, g: &NeighborGraph, coords: &[ParamCoord], h: f64) -> Mat {
    let batch = Batch::new(&[GraphSample::new(s, g)]);
    let x = positions_mat(s);
    let cols: Vec<Vec<f64>> = (0..3 * s.len())
        .into_par_iter()
        .map(|j| {
            let mut up = x.clone();
            up[[j / 3, j % 3]] += h;
            let mut dn = x.clone();
            dn[[j / 3, j % 3]] -= h;
            let gp = energy_parameter_gradient(model, &batch, &up);
            let gm = energy_parameter_gradient(model, &batch, &dn);
            coords.iter().map(|c| (gp.read(c) - gm.read(c)) / (2.0 * h)).collect()
        })
        .collect();
    Mat::from_shape_fn((coords.len(), 3 * s.len()), |(i, j)| cols[j][i])
}

/// `max_i |a_i − b_i| / max(|a_i|, |b_i|, floor · max_j |a_j|)`.
fn scaled_discrepancy(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor * scale))
        .fold(0.0, f64::max)
}

/// Spreads `count` coordinates over every array whose name starts with
/// `prefix` (all coordinates when `count` is at least their number).
pub fn sample_coordinates(store: &ParameterStore, prefix: &str, count: usize, rng: &mut impl Rng) -> Vec<ParamCoord> {
    let all = store.coordinates(prefix);
    if count >= all.len() {
        return all;
    }
    let mut picked: Vec<ParamCoord> = all.choose_multiple(rng, count).cloned().collect();
    picked.sort_by(|a, b| (store.names().position(|n| *n == a.name), a.index).cmp(&(store.names().position(|n| *n == b.name), b.index)));
    picked
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCouplingResult {
    pub loss: f64,
    /// Gradient-identity discrepancy (reverse mode + position-difference
    /// pullback versus the explicit mixed-Hessian formula).
    pub discrepancy: f64,
    /// Mixed partials taken in either order.
    pub commutation: f64,
    pub gradient_norm: f64,
    pub coordinates: usize,
}

/// `L = (E − E*)² + λ Σ_k ‖F_k − F_k*‖²`. Compares the training-path
/// gradient against `2(E−E*)∇_θE − 2λ Σ_k (F_k−F_k*)ᵀ H_{θ,x_k}ᵀ`.
pub fn verify_grad_coupling(
    model: &Model,
    s: &AtomicStructure,
    e_target: f64,
    f_target: &[Vec3],
    lambda: f64,
    coords: &[ParamCoord],
) -> Result<GradCouplingResult> {
    let g = model.graph(s)?;
    let sample = GraphSample::new(s, &g);
    let batch = Batch::new(&[sample]);
    let (e, f) = model.energy_and_forces(&[sample]);
    let (e, f) = (e[0], &f[0]);
    let de = e - e_target;
    let df: Vec<f64> = f.iter().zip(f_target).flat_map(|(p, q)| (0..3).map(move |a| p[a] - q[a])).collect();
    let loss = de * de + lambda * df.iter().map(|v| v * v).sum::<f64>();

    // training path: ∇_θL = 2(E−E*)∇_θE + ∂/∂θ (u·F), u = 2λ(F − F*)
    let ge = energy_parameter_gradient(model, &batch, &batch.positions);
    let u = Mat::from_shape_fn((s.len(), 3), |(i, a)| 2.0 * lambda * df[3 * i + a]);
    let mut grad: GradStore = model.params.zeros_like();
    grad.add_scaled(&ge, 2.0 * de);
    grad.add_scaled(&force_pullback(model, &batch, &u, 1e-4), 1.0);
    let lhs: Vec<f64> = coords.iter().map(|c| grad.read(c)).collect();

    // explicit formula from the mixed-Hessian block
    let h = mixed_hessian(model, s, &g, coords, 1e-3);
    let rhs: Vec<f64> = coords
        .iter()
        .enumerate()
        .map(|(r, c)| 2.0 * de * ge.read(c) - 2.0 * lambda * (0..df.len()).map(|j| df[j] * h[[r, j]]).sum::<f64>())
        .collect();
    let ht = mixed_hessian_transposed(model, s, &g, coords, 1e-4);
    let hv: Vec<f64> = h.iter().copied().collect();
    let htv: Vec<f64> = ht.iter().copied().collect();
    Ok(GradCouplingResult {
        loss,
        discrepancy: scaled_discrepancy(&lhs, &rhs, 1e-3),
        commutation: scaled_discrepancy(&hv, &htv, 1e-3),
        gradient_norm: lhs.iter().map(|v| v * v).sum::<f64>().sqrt(),
        coordinates: coords.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplingResult {
    /// `max |ΔF|`, eV/Å.
    pub force_change: f64,
    /// `|ΔE|`, eV.
    pub energy_change: f64,
    pub delta_norm: f64,
    pub mode: EnergyHeadMode,
}

/// Perturbs the composition-stream parameters by `δ` of norm `delta_norm`
/// along `∇_θ E` restricted to them (random when that gradient vanishes)
/// and measures the change in forces and energy.
pub fn verify_additive_decoupling(model: &Model, s: &AtomicStructure, delta_norm: f64, seed: u64) -> Result<DecouplingResult> {
    let g = model.graph(s)?;
    let coords = model.params.coordinates("comp.");
    let batch = Batch::new(&[GraphSample::new(s, &g)]);
    let grad = energy_parameter_gradient(model, &batch, &positions_mat(s));
    let mut raw: Vec<f64> = coords.iter().map(|c| grad.read(c)).collect();
    if raw.iter().all(|v| *v == 0.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        raw = coords.iter().map(|_| StandardNormal.sample(&mut rng)).collect();
    }
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut moved = model.clone();
    if n > 0.0 && delta_norm > 0.0 {
        for (c, r) in coords.iter().zip(&raw) {
            let v = moved.params.read(c);
            moved.params.write(c, v + delta_norm * r / n);
        }
    }
    let sample = [GraphSample::new(s, &g)];
    let (e0, f0) = model.energy_and_forces(&sample);
    let (e1, f1) = moved.energy_and_forces(&sample);
    let force_change = f0[0].iter().flatten().zip(f1[0].iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(DecouplingResult {
        force_change,
        energy_change: (e1[0] - e0[0]).abs(),
        delta_norm,
        mode: model.config.heads.energy_mode,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Linear,
}

impl Activation {
    fn d1(self, a: f64) -> f64 {
        match self {
            Self::Silu => {
                let s = 1.0 / (1.0 + (-a).exp());
                s + a * s * (1.0 - s)
            }
            Self::Linear => 1.0,
        }
    }

    fn d2(self, a: f64) -> f64 {
        match self {
            Self::Silu => {
                let s = 1.0 / (1.0 + (-a).exp());
                s * (1.0 - s) * (2.0 + a * (1.0 - 2.0 * s))
            }
            Self::Linear => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankBoundSpec {
    pub d_c: usize,
    pub d_g: usize,
    pub m: usize,
    pub trials: usize,
    pub activation: Activation,
    /// Build `W_c` as a product of rank-`r` factors.
    pub wc_rank: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTrial {
    pub rank: usize,
    pub bound: usize,
    /// Analytic cross Hessian versus differences of the analytic `∂f/∂c`.
    pub fd_discrepancy: f64,
    pub max_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankBoundReport {
    pub spec: RankBoundSpec,
    pub trials: Vec<RankTrial>,
}

impl RankBoundReport {
    pub fn all_within_bound(&self) -> bool {
        self.trials.iter().all(|t| t.rank <= t.bound)
    }

    pub fn worst_fd(&self) -> f64 {
        self.trials.iter().map(|t| t.fd_discrepancy).fold(0.0, f64::max)
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Head `f(c, g) = vᵀσ(W_c c + W_g g + b)`. Cross Hessian
/// `∂²f/∂c∂g = W_cᵀ Diag(v ⊙ σ″(a)) W_g`.
pub fn verify_rank_bound(spec: &RankBoundSpec) -> RankBoundReport {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut trials = Vec::with_capacity(spec.trials);
    for _ in 0..spec.trials {
        let wc = match spec.wc_rank {
            Some(r) => gaussian_matrix(&mut rng, spec.m, r) * gaussian_matrix(&mut rng, r, spec.d_c),
            None => gaussian_matrix(&mut rng, spec.m, spec.d_c),
        };
        let wg = gaussian_matrix(&mut rng, spec.m, spec.d_g);
        let b = gaussian_matrix(&mut rng, spec.m, 1);
        let v = gaussian_matrix(&mut rng, spec.m, 1);
        let c = gaussian_matrix(&mut rng, spec.d_c, 1);
        let gv = gaussian_matrix(&mut rng, spec.d_g, 1);
        let pre = |g: &DMatrix<f64>| &wc * &c + &wg * g + &b;
        let a = pre(&gv);
        let diag = DMatrix::from_fn(spec.m, spec.m, |i, j| if i == j { v[i] * spec.activation.d2(a[i]) } else { 0.0 });
        let cross = wc.transpose() * diag * &wg;
        // ∂f/∂c = W_cᵀ (v ⊙ σ′(a)), differenced over g
        let grad_c = |g: &DMatrix<f64>| {
            let a = pre(g);
            let s = DMatrix::from_fn(spec.m, 1, |i, _| v[i] * spec.activation.d1(a[i]));
            wc.transpose() * s
        };
        let h = 1e-5;
        let mut fd = DMatrix::zeros(spec.d_c, spec.d_g);
        for j in 0..spec.d_g {
            let mut up = gv.clone();
            up[j] += h;
            let mut dn = gv.clone();
            dn[j] -= h;
            fd.set_column(j, &((grad_c(&up) - grad_c(&dn)) / (2.0 * h)).column(0));
        }
        let an: Vec<f64> = cross.iter().copied().collect();
        let num: Vec<f64> = fd.iter().copied().collect();
        let bound = numerical_rank(&wc, RANK_TOLERANCE).min(numerical_rank(&wg, RANK_TOLERANCE)).min(spec.m);
        trials.push(RankTrial {
            rank: numerical_rank(&cross, RANK_TOLERANCE),
            bound,
            fd_discrepancy: scaled_discrepancy(&an, &num, 1e-3),
            max_abs: an.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        });
    }
    RankBoundReport {
        spec: spec.clone(),
        trials,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackedRankResult {
    pub rank: usize,
    /// Hidden width of the one-layer energy head.
    pub width: usize,
    pub parameters: usize,
    pub null_dimension: usize,
    pub singular_values: Vec<f64>,
    /// `max |ΔF|` for a step along a sampled null direction.
    pub null_force_change: f64,
    /// `max |ΔF|` for the same step along the top singular direction.
    pub top_force_change: f64,
    pub step: f64,
}

impl StackedRankResult {
    pub fn ratio(&self) -> f64 {
        if self.null_force_change == 0.0 {
            f64::INFINITY
        } else {
            self.top_force_change / self.null_force_change
        }
    }
}

/// Stacks `∂²E/∂θ_comp∂x` over all composition coordinates, measures its
/// rank, and steps along a sampled null direction and along the top
/// singular direction.
pub fn verify_stacked_rank(model: &Model, s: &AtomicStructure, coords: &[ParamCoord], step: f64, seed: u64) -> Result<StackedRankResult> {
    let width = match (&model.config.heads.energy_mode, model.config.heads.energy_hidden.as_slice()) {
        (EnergyHeadMode::Fused, [m]) => *m,
        _ => return crate::error::input("the stacked rank check needs a fused energy head with one hidden layer"),
    };
    let g = model.graph(s)?;
    let h = mixed_hessian(model, s, &g, coords, 1e-3);
    // columns of Hᵀ are parameter directions
    let ht = DMatrix::from_fn(h.ncols(), h.nrows(), |i, j| h[[j, i]]);
    let rank = numerical_rank(&ht, RANK_TOLERANCE);
    let (_, vecs) = right_singular_vectors(&ht);
    let p = coords.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut null: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
    for v in vecs.iter().take(rank.max(1)) {
        let d: f64 = v.iter().zip(&null).map(|(a, b)| a * b).sum();
        for (n, a) in null.iter_mut().zip(v) {
            *n -= d * a;
        }
    }
    let nn = null.iter().map(|v| v * v).sum::<f64>().sqrt();
    null.iter_mut().for_each(|v| *v /= nn);

    let base = model.forces_conservative(s, &g);
    let change = |dir: &[f64]| {
        let mut m = model.clone();
        for (c, d) in coords.iter().zip(dir) {
            let v = m.params.read(c);
            m.params.write(c, v + step * d);
        }
        let f = m.forces_conservative(s, &g);
        f.iter().flatten().zip(base.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    Ok(StackedRankResult {
        rank,
        width,
        parameters: p,
        null_dimension: p - rank.min(p),
        singular_values: singular_values(&ht),
        null_force_change: change(&null),
        top_force_change: change(&vecs[0]),
        step,
    })
}

/// Configuration used by the suite: tiny streams and a one-hidden-layer
/// energy head of width `m`.
pub fn suite_config(m: usize, mode: EnergyHeadMode) -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.heads.energy_hidden = vec![m];
    cfg.heads.energy_mode = mode;
    cfg
}

/// Random non-periodic structure; `mono` uses a single element.
pub fn suite_structure(rng: &mut ChaCha8Rng, atoms: usize, mono: bool) -> AtomicStructure {
    let pool = [6u8, 8, 14, 26];
    let first = *pool.choose(rng).expect("pool");
    let species = (0..atoms).map(|_| if mono { first } else { *pool.choose(rng).expect("pool") }).collect();
    crate::synth::random_cluster(rng, species, 1.2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub trials: usize,
    pub seed: u64,
    pub head_width: usize,
    /// Sampled parameter coordinates for the gradient identity.
    pub coordinates: usize,
    pub lambda: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            seed: 0,
            head_width: 4,
            coordinates: 48,
            lambda: 0.5,
        }
    }
}

/// Every check over `trials` random (model, structure) instances.
pub fn run_suite(cfg: &SuiteConfig) -> Result<CouplingReport> {
    let mut checks = Vec::new();
    let instances: Vec<Vec<CheckRecord>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| -> Result<Vec<CheckRecord>> {
            let seed = cfg.seed.wrapping_mul(1000).wrapping_add(t as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Vec::new();

            let model = Model::new(suite_config(cfg.head_width, EnergyHeadMode::Fused), seed)?;
            let atoms = rng.random_range(3..6);
            let s = suite_structure(&mut rng, atoms, false);
            let coords = sample_coordinates(&model.params, "", cfg.coordinates, &mut rng);
            let e_t = rng.random_range(-5.0..5.0);
            let f_t: Vec<Vec3> = (0..s.len()).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
            let gc = verify_grad_coupling(&model, &s, e_t, &f_t, cfg.lambda, &coords)?;
            let detail = serde_json::to_value(&gc)?;
            out.push(CheckRecord::at_most(format!("grad_coupling[{t}]"), gc.discrepancy, 1e-3, detail.clone()));
            out.push(CheckRecord::at_most(format!("mixed_partials_commute[{t}]"), gc.commutation, 1e-3, detail));

            let additive = Model::new(suite_config(cfg.head_width, EnergyHeadMode::Additive), seed)?;
            let d = verify_additive_decoupling(&additive, &s, 1e-2, seed)?;
            let detail = serde_json::to_value(&d)?;
            out.push(CheckRecord::at_most(format!("additive_force_change[{t}]"), d.force_change, 1e-8, detail.clone()));
            out.push(CheckRecord::at_least(format!("additive_energy_change[{t}]"), d.energy_change, f64::MIN_POSITIVE, detail));
            let fused = verify_additive_decoupling(&model, &s, 1e-2, seed)?;
            out.push(CheckRecord {
                name: format!("fused_force_change[{t}]"),
                measured: fused.force_change,
                threshold: 0.0,
                passed: true,
                detail: serde_json::json!({ "reported_only": true, "energy_change": fused.energy_change }),
            });

            let rb = verify_rank_bound(&RankBoundSpec {
                d_c: 6,
                d_g: 7,
                m: cfg.head_width,
                trials: 1,
                activation: Activation::Silu,
                wc_rank: if t % 2 == 0 { None } else { Some(2) },
                seed,
            });
            let tr = &rb.trials[0];
            out.push(CheckRecord::at_most(
                format!("rank_bound[{t}]"),
                tr.rank as f64,
                tr.bound as f64,
                serde_json::to_value(tr)?,
            ));
            out.push(CheckRecord::at_most(format!("cross_hessian_fd[{t}]"), tr.fd_discrepancy, 1e-4, serde_json::Value::Null));

            let atoms = rng.random_range(3..6);
            let mono = suite_structure(&mut rng, atoms, true);
            let comp = model.params.coordinates("comp.");
            let sr = verify_stacked_rank(&model, &mono, &comp, 1e-4, seed)?;
            let detail = serde_json::json!({
                "rank": sr.rank,
                "width": sr.width,
                "parameters": sr.parameters,
                "null_dimension": sr.null_dimension,
                "null_force_change": sr.null_force_change,
                "top_force_change": sr.top_force_change,
            });
            out.push(CheckRecord::at_most(format!("stacked_rank[{t}]"), sr.rank as f64, sr.width as f64, detail.clone()));
            out.push(CheckRecord::at_most(format!("null_direction_force_change[{t}]"), sr.null_force_change, 1e-6, detail.clone()));
            out.push(CheckRecord::at_least(format!("top_to_null_ratio[{t}]"), sr.ratio(), 1e3, detail));
            Ok(out)
        })
        .collect::<Result<_>>()?;
    for v in instances {
        checks.extend(v);
    }
    Ok(CouplingReport { checks })
}
