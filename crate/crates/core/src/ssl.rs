//! Stochastic views and the self-supervised objectives.
//!
//! Every view gets Gaussian position noise and a random rotation (free for an
//! invariant backbone). On top of that, a random subset of {masking, cell
//! strain, graph re-parameterization} is applied, at most
//! `max_augmentations` of them. All corruption parameters are recorded
//! so a view can be rebuilt from the clean structure exactly.
//!
//! The collapse regularizer is an Epps–Pulley characteristic-function test:
//! batch values projected on random unit directions are compared against
//! `φ(t) = exp(−t²/2)` on a trapezoid grid over `[0, t_max]`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, Mat, Tape, Var};
use crate::error::{input, Result};
use crate::linalg::axis_angle;
use crate::model::{Batch, GraphConfig, GraphSample, Model};
use crate::structure::{build_graph, AtomicStructure, Mat3, NeighborGraph, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Noise standard deviation range, Å.
    pub noise_sigma: [f64; 2],
    pub mask_prob: f64,
    pub rotation_max_deg: f64,
    /// Symmetric strain standard deviation range (periodic only).
    pub cell_sigma: [f64; 2],
    pub graph_radius: [f64; 2],
    pub graph_neighbors: [usize; 2],
    pub max_augmentations: usize,
    pub views: usize,
    /// Chance that each optional augmentation is proposed.
    pub augment_prob: f64,
    /// Graph used when the graph augmentation is not drawn.
    pub base_graph: GraphConfig,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            noise_sigma: [0.05, 0.3],
            mask_prob: 0.3,
            rotation_max_deg: 180.0,
            cell_sigma: [0.01, 0.03],
            graph_radius: [4.0, 6.0],
            graph_neighbors: [20, 120],
            max_augmentations: 3,
            views: 2,
            augment_prob: 0.5,
            base_graph: GraphConfig::default(),
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] >= 0.0 && r[0] <= r[1];
        if !ordered(self.noise_sigma) || !ordered(self.cell_sigma) || !(self.graph_radius[0] > 0.0 && ordered(self.graph_radius)) {
            return input("augmentation ranges must be ordered and non-negative");
        }
        if self.graph_neighbors[0] == 0 || self.graph_neighbors[0] > self.graph_neighbors[1] {
            return input("graph neighbor range must be ordered and ≥ 1");
        }
        if !(0.0..=1.0).contains(&self.mask_prob) || !(0.0..=1.0).contains(&self.augment_prob) {
            return input("probabilities must lie in [0, 1]");
        }
        if self.views != 2 {
            return input("exactly two views per structure are supported");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    Mask,
    Rotation,
    Cell,
    Graph,
}

/// One corrupted copy with its exact corruption record.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub structure: AtomicStructure,
    pub graph: NeighborGraph,
    pub noise: Vec<Vec3>,
    pub sigma: f64,
    pub masked: Vec<usize>,
    pub rotation: Mat3,
    pub strain: Option<Mat3>,
    pub cutoff: f64,
    pub max_neighbors: usize,
    pub applied: Vec<Augmentation>,
}

impl View {
    pub fn sample(&self) -> GraphSample<'_> {
        GraphSample {
            structure: &self.structure,
            graph: &self.graph,
            masked: &self.masked,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub views: [View; 2],
}

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Strain, then rotation, then additive noise. Species are untouched:
/// masking acts through the view's index set.
pub fn apply_corruption(clean: &AtomicStructure, strain: Option<&Mat3>, rotation: &Mat3, noise: &[Vec3]) -> AtomicStructure {
    let mut s = clean.clone();
    if let Some(m) = strain {
        let apply = |v: &Vec3| -> Vec3 { std::array::from_fn(|c| (0..3).map(|k| v[k] * m[k][c]).sum()) };
        for p in &mut s.positions {
            *p = apply(p);
        }
        if let Some(cell) = &mut s.cell {
            for row in cell.iter_mut() {
                *row = apply(row);
            }
        }
    }
    let mut s = s.rotated(rotation);
    for (p, e) in s.positions.iter_mut().zip(noise) {
        for a in 0..3 {
            p[a] += e[a];
        }
    }
    s
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn sample_view<R: Rng + ?Sized>(clean: &AtomicStructure, cfg: &AugmentationConfig, rng: &mut R) -> Result<View> {
    let mut candidates = vec![Augmentation::Mask, Augmentation::Graph];
    if clean.periodic {
        candidates.insert(1, Augmentation::Cell);
    }
    let mut optional: Vec<Augmentation> = candidates
        .into_iter()
        .filter(|_| rng.random::<f64>() < cfg.augment_prob)
        .collect();
    if optional.len() > cfg.max_augmentations {
        optional.shuffle(rng);
        optional.truncate(cfg.max_augmentations);
        optional.sort_by_key(|a| *a as u8);
    }
    let mut applied = vec![Augmentation::Rotation];
    applied.extend(optional);
    applied.sort_by_key(|a| *a as u8);
    let has = |a: Augmentation| applied.contains(&a);

    let n = clean.len();
    let masked: Vec<usize> = if has(Augmentation::Mask) {
        (0..n).filter(|_| rng.random::<f64>() < cfg.mask_prob).collect()
    } else {
        Vec::new()
    };
    let rotation = if has(Augmentation::Rotation) {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
        let angle = rng.random::<f64>() * cfg.rotation_max_deg.to_radians();
        axis_angle(v.map(|x| x / norm), angle)
    } else {
        IDENTITY
    };
    let strain = if has(Augmentation::Cell) {
        let sd = uniform(rng, cfg.cell_sigma);
        let mut e = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in i..3 {
                let d: f64 = if sd > 0.0 { Normal::new(0.0, sd).expect("sd ≥ 0").sample(rng) } else { 0.0 };
                e[i][j] = d;
                e[j][i] = d;
            }
        }
        Some(std::array::from_fn(|i| std::array::from_fn(|j| e[i][j] + if i == j { 1.0 } else { 0.0 })))
    } else {
        None
    };
    let (cutoff, max_neighbors) = if has(Augmentation::Graph) {
        (
            uniform(rng, cfg.graph_radius),
            rng.random_range(cfg.graph_neighbors[0]..=cfg.graph_neighbors[1]),
        )
    } else {
        (cfg.base_graph.cutoff, cfg.base_graph.max_neighbors)
    };
    let sigma = uniform(rng, cfg.noise_sigma);
    let noise: Vec<Vec3> = (0..n)
        .map(|_| {
            std::array::from_fn(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * sigma
            })
        })
        .collect();
    let structure = apply_corruption(clean, strain.as_ref(), &rotation, &noise);
    let graph = build_graph(&structure, cutoff, max_neighbors)?;
    Ok(View {
        structure,
        graph,
        noise,
        sigma,
        masked,
        rotation,
        strain,
        cutoff,
        max_neighbors,
        applied,
    })
}

/// Two independently corrupted views of one structure.
pub fn sample_views<R: Rng + ?Sized>(structure: &AtomicStructure, cfg: &AugmentationConfig, rng: &mut R) -> Result<ViewPair> {
    cfg.validate()?;
    structure.validate()?;
    let a = sample_view(structure, cfg, rng)?;
    let b = sample_view(structure, cfg, rng)?;
    Ok(ViewPair { views: [a, b] })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslWeights {
    pub denoise: f64,
    pub mask: f64,
    pub lejepa_node: f64,
    pub lejepa_graph: f64,
    /// Share of the regularizer inside each LeJEPA term.
    pub sigreg: f64,
    pub slices: usize,
    pub t_max: f64,
    pub quadrature_points: usize,
}

impl Default for SslWeights {
    fn default() -> Self {
        Self {
            denoise: 10.0,
            mask: 0.1,
            lejepa_node: 0.1,
            lejepa_graph: 0.1,
            sigreg: 0.1,
            slices: 1024,
            t_max: 3.0,
            quadrature_points: 17,
        }
    }
}

/// Trapezoid nodes on `[0, t_max]`; the symmetric integrand over `[−t_max,
/// t_max]` doubles interior weights.
pub fn quadrature(t_max: f64, points: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(points >= 2);
    let dt = t_max / (points - 1) as f64;
    let nodes = (0..points).map(|j| j as f64 * dt).collect();
    let weights = (0..points)
        .map(|j| if j == 0 || j == points - 1 { dt } else { 2.0 * dt })
        .collect();
    (nodes, weights)
}

/// `dim × slices` matrix of random unit columns.
pub fn draw_projections<R: Rng + ?Sized>(dim: usize, slices: usize, rng: &mut R) -> Mat {
    let mut p = Mat::from_shape_fn((dim, slices), |_| StandardNormal.sample(rng));
    for mut col in p.columns_mut() {
        let n = col.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        col /= n;
    }
    p
}

/// Mean Epps–Pulley statistic of `z · projections` (tape op).
pub fn sigreg(tape: &mut Tape, z: Var, projections: &Mat, t_max: f64, points: usize) -> Var {
    let p = tape.constant(projections.clone());
    let proj = tape.matmul(z, p);
    let (nodes, weights) = quadrature(t_max, points);
    tape.epps_pulley(proj, &nodes, &weights)
}

/// Plain-value regularizer for a sample matrix.
pub fn sigreg_statistic<R: Rng + ?Sized>(z: &Mat, slices: usize, t_max: f64, points: usize, rng: &mut R) -> f64 {
    let proj = draw_projections(z.ncols(), slices, rng);
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let s = sigreg(&mut tape, v, &proj, t_max, points);
    tape.scalar(s)
}

/// `Σ_i ‖pred_i − ε_i‖²`.
pub fn denoise_loss(tape: &mut Tape, pred: Var, noise: &Mat) -> Var {
    let target = tape.constant(noise.clone());
    let d = tape.sub(pred, target);
    tape.sum_squares(d)
}

/// `−Σ log p(z_i)` over the rows of `logits`; `classes[r]` is the 0-based
/// true class of row `r`. Zero when there are no rows.
pub fn mask_loss(tape: &mut Tape, logits: Var, classes: &[usize]) -> Var {
    let (rows, cols) = tape.shape(logits);
    assert_eq!(rows, classes.len());
    if rows == 0 {
        return tape.zeros(1, 1);
    }
    let lp = tape.log_softmax_rows(logits);
    let mut sel = Mat::zeros((rows, cols));
    for (r, &c) in classes.iter().enumerate() {
        sel[[r, c]] = -1.0;
    }
    let sel = tape.constant(sel);
    let picked = tape.mul(lp, sel);
    tape.sum(picked)
}

/// Random projections for one step: independent node and graph draws.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections {
    pub node: Mat,
    pub graph: Mat,
}

impl Projections {
    pub fn draw<R: Rng + ?Sized>(dim: usize, slices: usize, rng: &mut R) -> Self {
        let node = draw_projections(dim, slices, rng);
        let graph = draw_projections(dim, slices, rng);
        Self { node, graph }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LejepaVars {
    pub node_pred: Var,
    pub graph_pred: Var,
    pub node_sigreg: Option<Var>,
    pub graph_sigreg: Option<Var>,
    pub total: Var,
}

/// `λ_node (λ SIG_node + (1−λ) Σ_i ‖h₁ᵢ − h₂ᵢ‖²) + λ_graph (λ SIG_graph + (1−λ) Σ_b ‖h̄₁ − h̄₂‖²)`.
/// The regularizer is skipped when `num_graphs == 1`.
#[allow(clippy::too_many_arguments)]
pub fn lejepa_loss(
    tape: &mut Tape,
    nodes: [Var; 2],
    graphs: [Var; 2],
    num_graphs: usize,
    weights: &SslWeights,
    projections: &Projections,
) -> LejepaVars {
    let dn = tape.sub(nodes[0], nodes[1]);
    let node_pred = tape.sum_squares(dn);
    let dg = tape.sub(graphs[0], graphs[1]);
    let graph_pred = tape.sum_squares(dg);
    let lam = weights.sigreg;
    let (node_sigreg, graph_sigreg) = if num_graphs > 1 {
        let zn = tape.transpose(nodes[0]);
        let zn2 = tape.transpose(nodes[1]);
        let zn = tape.concat_cols(&[zn, zn2]);
        let zn = tape.transpose(zn);
        let zg = tape.transpose(graphs[0]);
        let zg2 = tape.transpose(graphs[1]);
        let zg = tape.concat_cols(&[zg, zg2]);
        let zg = tape.transpose(zg);
        (
            Some(sigreg(tape, zn, &projections.node, weights.t_max, weights.quadrature_points)),
            Some(sigreg(tape, zg, &projections.graph, weights.t_max, weights.quadrature_points)),
        )
    } else {
        (None, None)
    };
    let term = |tape: &mut Tape, pred: Var, sig: Option<Var>, w: f64| -> Var {
        let p = tape.scale(pred, (1.0 - lam) * w);
        match sig {
            Some(s) => {
                let s = tape.scale(s, lam * w);
                tape.add(p, s)
            }
            None => p,
        }
    };
    let a = term(tape, node_pred, node_sigreg, weights.lejepa_node);
    let b = term(tape, graph_pred, graph_sigreg, weights.lejepa_graph);
    let total = tape.add(a, b);
    LejepaVars {
        node_pred,
        graph_pred,
        node_sigreg,
        graph_sigreg,
        total,
    }
}

/// Per-term values of one combined-loss evaluation (unweighted terms).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub denoise: f64,
    pub mask: f64,
    pub node_pred: f64,
    pub node_sigreg: f64,
    pub graph_pred: f64,
    pub graph_sigreg: f64,
    pub sigreg_skipped: bool,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,total,denoise,mask,node_pred,node_sigreg,graph_pred,graph_sigreg,lr";

    pub fn csv_row(&self, step: usize, lr: f64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{},{lr}",
            self.total, self.denoise, self.mask, self.node_pred, self.node_sigreg, self.graph_pred, self.graph_sigreg
        )
    }
}

/// Builds the combined objective for a batch of view pairs on `tape`.
/// Denoising and masking are averaged over the two views.
pub fn combined_loss(
    model: &Model,
    tape: &mut Tape,
    bind: &mut Binder,
    pairs: &[ViewPair],
    weights: &SslWeights,
    projections: &Projections,
    mut dropout: Option<&mut rand_chacha::ChaCha8Rng>,
) -> (Var, LossBreakdown) {
    let mut node_h = Vec::new();
    let mut graph_h = Vec::new();
    let mut den = Vec::new();
    let mut msk = Vec::new();
    for v in 0..2 {
        let samples: Vec<GraphSample> = pairs.iter().map(|p| p.views[v].sample()).collect();
        let batch = Batch::new(&samples);
        let pos = tape.constant(batch.positions.clone());
        let enc = model.encode(tape, bind, &batch, pos, dropout.as_deref_mut());
        let pred = model.directional_var("noise", tape, bind, &batch, &enc);
        let eps: Vec<f64> = pairs.iter().flat_map(|p| p.views[v].noise.iter().flatten().copied()).collect();
        let eps = Mat::from_shape_vec((batch.num_nodes, 3), eps).expect("noise rows");
        den.push(denoise_loss(tape, pred, &eps));
        let nodes = batch.masked_nodes();
        let classes: Vec<usize> = nodes.iter().map(|&i| batch.species[i] as usize - 1).collect();
        let logits = model.mask_logits_var(tape, bind, &enc, &nodes);
        msk.push(mask_loss(tape, logits, &classes));
        node_h.push(enc.fused);
        graph_h.push(enc.fused_pooled);
    }
    let d = tape.add(den[0], den[1]);
    let d = tape.scale(d, 0.5);
    let m = tape.add(msk[0], msk[1]);
    let m = tape.scale(m, 0.5);
    let lj = lejepa_loss(tape, [node_h[0], node_h[1]], [graph_h[0], graph_h[1]], pairs.len(), weights, projections);
    let dw = tape.scale(d, weights.denoise);
    let mw = tape.scale(m, weights.mask);
    let total = tape.add(dw, mw);
    let total = tape.add(total, lj.total);
    let br = LossBreakdown {
        total: tape.scalar(total),
        denoise: tape.scalar(d),
        mask: tape.scalar(m),
        node_pred: tape.scalar(lj.node_pred),
        node_sigreg: lj.node_sigreg.map_or(0.0, |v| tape.scalar(v)),
        graph_pred: tape.scalar(lj.graph_pred),
        graph_sigreg: lj.graph_sigreg.map_or(0.0, |v| tape.scalar(v)),
        sigreg_skipped: lj.node_sigreg.is_none(),
    };
    (total, br)
}
