//! AdamW training loops for self-supervised pretraining and supervised
//! energy/force fine-tuning, plus versioned binary checkpoints.
//!
//! Conservative fine-tuning needs `∂/∂θ` of a loss on `F = −∇ₓE`. The tape
//! is first-order only, so the force term's parameter gradient is formed as a
//! directional derivative of the exact parameter gradient:
//! `∂/∂θ (u·F) = −D_u ∇_θE ≈ −‖u‖ (∇_θE(x + hû) − ∇_θE(x − hû)) / 2h`,
//! on the fixed neighbor graph of the clean input.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradStore, Mat, ParameterStore, Tape};
use crate::error::{input, Error, Result};
use crate::linalg::least_squares;
use crate::model::{Batch, GraphSample, Model, ModelConfig};
use crate::ssl::{combined_loss, sample_views, AugmentationConfig, LossBreakdown, Projections, SslWeights};
use crate::structure::{AtomicStructure, NeighborGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub warmup: usize,
    pub steps: usize,
    pub weight_decay: f64,
    pub clip: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl OptimizerConfig {
    pub fn pretrain() -> Self {
        Self {
            lr: 3e-4,
            warmup: 500,
            steps: 10_000,
            weight_decay: 0.01,
            clip: 10.0,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn finetune() -> Self {
        Self {
            weight_decay: 1e-3,
            clip: 1.0,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || self.batch_size == 0 || !(self.clip > 0.0) || self.weight_decay < 0.0 {
            return input("optimizer needs lr ≥ 0, batch_size ≥ 1, clip > 0, weight_decay ≥ 0");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay to 0 at `steps`.
pub fn lr_at(step: usize, cfg: &OptimizerConfig) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * step as f64 / cfg.warmup as f64;
    }
    if cfg.steps <= cfg.warmup {
        return cfg.lr;
    }
    let progress = ((step - cfg.warmup) as f64 / (cfg.steps - cfg.warmup) as f64).min(1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut GradStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: GradStore,
    pub v: GradStore,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ParameterStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParameterStore, grads: &GradStore, lr: f64, cfg: &OptimizerConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * cfg.weight_decay;
        for (name, p) in params.iter_mut() {
            let g = &grads.grads[name];
            let m = self.m.grads.get_mut(name).expect("moment slot");
            let v = self.v.grads.get_mut(name).expect("moment slot");
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                *p = *p * decay - lr * update;
            });
        }
    }
}

/// Serializable ChaCha8 position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let wp: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position `{}`", self.word_pos)))?;
        rng.set_word_pos(wp);
        Ok(rng)
    }
}

const MAGIC: &[u8; 8] = b"TRISTCK\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    group: String,
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    seed: u64,
    step: usize,
    adam_t: Option<u64>,
    rng: Option<RngState>,
    meta: serde_json::Value,
    arrays: Vec<ArrayHeader>,
}

/// Parameters plus everything needed to resume: optimizer moments, step
/// counter and RNG position.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamW>,
    pub step: usize,
    pub rng: Option<RngState>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: Model) -> Self {
        Self {
            model,
            optimizer: None,
            step: 0,
            rng: None,
            meta: serde_json::Value::Null,
        }
    }

    /// `magic ‖ u32 version ‖ u64 header length ‖ JSON header ‖ f64 LE data`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<(&str, &String, &Mat)> = self.model.params.iter().map(|(n, m)| ("param", n, m)).collect();
        if let Some(opt) = &self.optimizer {
            entries.extend(opt.m.grads.iter().map(|(n, m)| ("adam_m", n, m)));
            entries.extend(opt.v.grads.iter().map(|(n, m)| ("adam_v", n, m)));
        }
        let arrays = entries
            .iter()
            .map(|(g, n, m)| ArrayHeader {
                group: g.to_string(),
                name: n.to_string(),
                shape: [m.nrows(), m.ncols()],
            })
            .collect();
        let header = CheckpointHeader {
            config: self.model.config.clone(),
            seed: self.model.params.seed,
            step: self.step,
            adam_t: self.optimizer.as_ref().map(|o| o.t),
            rng: self.rng.clone(),
            meta: self.meta.clone(),
            arrays,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, m) in entries {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..hend])?;
        let mut params = ParameterStore::new(header.seed);
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        let mut off = hend;
        for a in &header.arrays {
            let n = a.shape[0] * a.shape[1];
            let end = off + 8 * n;
            if end > bytes.len() {
                return Err(bad("truncated array data"));
            }
            let vals: Vec<f64> = bytes[off..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            off = end;
            let mat = Mat::from_shape_vec((a.shape[0], a.shape[1]), vals).map_err(|e| Error::Checkpoint(e.to_string()))?;
            match a.group.as_str() {
                "param" => params.insert(a.name.clone(), mat),
                "adam_m" => {
                    m.insert(a.name.clone(), mat);
                }
                "adam_v" => {
                    v.insert(a.name.clone(), mat);
                }
                g => return Err(Error::Checkpoint(format!("unknown array group `{g}`"))),
            }
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after array data"));
        }
        let reference = Model::new(header.config.clone(), header.seed)?;
        if reference.params.names().ne(params.names()) {
            return Err(bad("parameter names do not match the stored configuration"));
        }
        let optimizer = header.adam_t.map(|t| AdamW {
            m: GradStore { grads: m },
            v: GradStore { grads: v },
            t,
        });
        Ok(Self {
            model: Model {
                config: header.config,
                params,
            },
            optimizer,
            step: header.step,
            rng: header.rng,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub optimizer: OptimizerConfig,
    pub augment: AugmentationConfig,
    pub weights: SslWeights,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::pretrain(),
            augment: AugmentationConfig::default(),
            weights: SslWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<PretrainRecord>,
}

impl PretrainOutcome {
    pub fn csv(&self) -> String {
        let mut s = String::from(LossBreakdown::CSV_HEADER);
        s.push('\n');
        for r in &self.log {
            s.push_str(&r.loss.csv_row(r.step, r.lr));
            s.push('\n');
        }
        s
    }
}

fn sample_indices(rng: &mut ChaCha8Rng, len: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..len)).collect()
}

/// One self-supervised step; returns the loss breakdown and parameter grads.
pub fn pretrain_gradients(
    model: &Model,
    data: &[AtomicStructure],
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, GradStore)> {
    let idx = sample_indices(rng, data.len(), cfg.optimizer.batch_size);
    let seeds: Vec<u64> = idx.iter().map(|_| rng.random()).collect();
    let projections = Projections::draw(model.config.fused_width(), cfg.weights.slices, rng);
    let mut dropout = ChaCha8Rng::seed_from_u64(rng.random());
    let pairs = idx
        .par_iter()
        .zip(&seeds)
        .map(|(&i, &s)| sample_views(&data[i], &cfg.augment, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let mut bind = model.params.bind();
    let (loss, breakdown) = combined_loss(model, &mut tape, &mut bind, &pairs, &cfg.weights, &projections, Some(&mut dropout));
    let grads = bind.collect(&tape.backward(loss));
    Ok((breakdown, grads))
}

/// Runs pretraining from `start` until `cfg.optimizer.steps`.
pub fn pretrain_from(start: Checkpoint, data: &[AtomicStructure], cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    cfg.optimizer.validate()?;
    cfg.augment.validate()?;
    if data.is_empty() {
        return input("pretraining needs a nonempty dataset");
    }
    let Checkpoint {
        mut model,
        optimizer,
        mut step,
        rng,
        meta,
    } = start;
    let mut opt = optimizer.unwrap_or_else(|| AdamW::new(&model.params));
    let mut rng = match rng {
        Some(r) => r.restore()?,
        None => ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut log = Vec::new();
    while step < cfg.optimizer.steps {
        let lr = lr_at(step + 1, &cfg.optimizer);
        let (loss, mut grads) = pretrain_gradients(&model, data, cfg, &mut rng)?;
        if !loss.total.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {:?}", loss),
            });
        }
        clip_gradients(&mut grads, cfg.optimizer.clip);
        opt.step(&mut model.params, &grads, lr, &cfg.optimizer);
        step += 1;
        log::debug!("pretrain step {step} loss {:.6} lr {lr:.3e}", loss.total);
        log.push(PretrainRecord { step, lr, loss });
    }
    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            model,
            optimizer: Some(opt),
            step,
            rng: Some(RngState::capture(&rng)),
            meta,
        },
        log,
    })
}

pub fn pretrain(model: Model, data: &[AtomicStructure], cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    pretrain_from(Checkpoint::from_model(model), data, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForceMode {
    Conservative,
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mae,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub optimizer: OptimizerConfig,
    pub lambda_energy: f64,
    pub lambda_force: f64,
    pub mode: ForceMode,
    pub loss: LossKind,
    pub seed: u64,
    /// Least-squares per-element reference energies before the first step.
    pub fit_reference: bool,
    /// Position step (Å) of the force-gradient directional derivative.
    pub hvp_step: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::finetune(),
            lambda_energy: 50.0,
            lambda_force: 100.0,
            mode: ForceMode::Conservative,
            loss: LossKind::Mae,
            seed: 0,
            fit_reference: true,
            hvp_step: 1e-4,
        }
    }
}

/// Energy-per-atom and force MAEs in meV/atom and meV/Å.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub energy_mae: f64,
    pub force_mae: f64,
    pub structures: usize,
}

/// A labelled structure with its fixed graph.
#[derive(Clone, Debug)]
pub struct Labelled {
    pub structure: AtomicStructure,
    pub graph: NeighborGraph,
    pub energy: f64,
    pub forces: Option<Vec<[f64; 3]>>,
}

pub fn prepare(model: &Model, data: &[AtomicStructure], need_forces: bool) -> Result<Vec<Labelled>> {
    data.par_iter()
        .enumerate()
        .map(|(i, s)| {
            let energy = s
                .labels
                .energy()
                .ok_or_else(|| Error::MissingLabel(format!("energy (structure {i})")))?;
            let forces = s.labels.forces().map(|f| f.to_vec());
            if need_forces && forces.is_none() {
                return Err(Error::MissingLabel(format!("forces (structure {i})")));
            }
            Ok(Labelled {
                graph: model.graph(s)?,
                structure: s.clone(),
                energy,
                forces,
            })
        })
        .collect()
}

fn predictions(model: &Model, items: &[&Labelled], mode: ForceMode) -> (Vec<f64>, Vec<Vec<[f64; 3]>>) {
    let samples: Vec<GraphSample> = items.iter().map(|l| GraphSample::new(&l.structure, &l.graph)).collect();
    match mode {
        ForceMode::Conservative => model.energy_and_forces(&samples),
        ForceMode::Direct => {
            let e = model.energies(&samples);
            let f = items.iter().map(|l| model.forces_direct(&l.structure, &l.graph)).collect();
            (e, f)
        }
    }
}

/// `MAE_E = mean_b |Ê_b − E_b| / N_b`, `MAE_F = mean |F̂ − F|` over atoms and
/// axes, both reported in meV units.
pub fn evaluate_prepared(model: &Model, data: &[Labelled], mode: ForceMode) -> Metrics {
    if data.is_empty() {
        return Metrics::default();
    }
    let chunks: Vec<Vec<&Labelled>> = data.chunks(64).map(|c| c.iter().collect()).collect();
    let parts: Vec<(f64, f64, usize)> = chunks
        .par_iter()
        .map(|chunk| {
            let (e, f) = predictions(model, chunk, mode);
            let mut ae = 0.0;
            let mut af = 0.0;
            let mut nf = 0;
            for (k, l) in chunk.iter().enumerate() {
                ae += (e[k] - l.energy).abs() / l.structure.len() as f64;
                if let Some(t) = &l.forces {
                    for (p, q) in f[k].iter().zip(t) {
                        for a in 0..3 {
                            af += (p[a] - q[a]).abs();
                        }
                        nf += 3;
                    }
                }
            }
            (ae, af, nf)
        })
        .collect();
    let ae: f64 = parts.iter().map(|p| p.0).sum();
    let af: f64 = parts.iter().map(|p| p.1).sum();
    let nf: usize = parts.iter().map(|p| p.2).sum();
    Metrics {
        energy_mae: 1000.0 * ae / data.len() as f64,
        force_mae: if nf > 0 { 1000.0 * af / nf as f64 } else { 0.0 },
        structures: data.len(),
    }
}

pub fn evaluate(model: &Model, data: &[AtomicStructure], mode: ForceMode) -> Result<Metrics> {
    let prepared = prepare(model, data, false)?;
    Ok(evaluate_prepared(model, &prepared, mode))
}

/// Adds a least-squares per-element offset fitted to the energy residuals.
pub fn fit_reference_energies(model: &mut Model, data: &[Labelled]) {
    if data.is_empty() {
        return;
    }
    let mut elements: Vec<u8> = data.iter().flat_map(|l| l.structure.species.iter().copied()).collect();
    elements.sort_unstable();
    elements.dedup();
    let refs: Vec<&Labelled> = data.iter().collect();
    let pred: Vec<f64> = refs
        .chunks(64)
        .flat_map(|c| {
            let s: Vec<GraphSample> = c.iter().map(|l| GraphSample::new(&l.structure, &l.graph)).collect();
            model.energies(&s)
        })
        .collect();
    let x = DMatrix::from_fn(data.len(), elements.len(), |i, k| {
        data[i].structure.species.iter().filter(|&&z| z == elements[k]).count() as f64
    });
    let y = DMatrix::from_fn(data.len(), 1, |i, _| data[i].energy - pred[i]);
    if let Some(w) = least_squares(&x, &y, 1e-8) {
        let table = model.params.get_mut("head.atom_ref").expect("reference table");
        for (k, &z) in elements.iter().enumerate() {
            table[[z as usize - 1, 0]] += w[(k, 0)];
        }
    }
}

/// Exact parameter gradient of `Σ E_b` on a fixed graph at `positions`.
pub fn energy_parameter_gradient(model: &Model, batch: &Batch, positions: &Mat) -> GradStore {
    let mut tape = Tape::new();
    let mut bind = model.params.bind();
    let pos = tape.constant(positions.clone());
    let enc = model.encode(&mut tape, &mut bind, batch, pos, None);
    let e = model.energy_var(&mut tape, &mut bind, batch, &enc);
    let t = tape.sum(e);
    bind.collect(&tape.backward(t))
}

/// `∂/∂θ Σ_k u_k·F_k = −D_u ∇_θE`, by a central difference of exact
/// parameter gradients along `u/‖u‖` with position step `h`.
pub fn force_pullback(model: &Model, batch: &Batch, u: &Mat, h: f64) -> GradStore {
    let unorm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = model.params.zeros_like();
    if unorm == 0.0 {
        return out;
    }
    let dir = u * (h / unorm);
    let (gp, gm) = rayon::join(
        || energy_parameter_gradient(model, batch, &(&batch.positions + &dir)),
        || energy_parameter_gradient(model, batch, &(&batch.positions - &dir)),
    );
    let k = unorm / (2.0 * h);
    out.add_scaled(&gp, -k);
    out.add_scaled(&gm, k);
    out
}

/// Loss and gradient of one supervised batch.
pub fn finetune_gradients(model: &Model, items: &[&Labelled], cfg: &FinetuneConfig) -> (f64, f64, GradStore) {
    let samples: Vec<GraphSample> = items.iter().map(|l| GraphSample::new(&l.structure, &l.graph)).collect();
    let batch = Batch::new(&samples);
    let b = items.len() as f64;
    let nf = 3.0 * batch.num_nodes as f64;
    let target_f: Vec<f64> = items
        .iter()
        .flat_map(|l| l.forces.as_ref().expect("forces").iter().flatten().copied())
        .collect();
    let target_f = Mat::from_shape_vec((batch.num_nodes, 3), target_f).expect("force rows");
    let natoms: Vec<f64> = items.iter().map(|l| l.structure.len() as f64).collect();

    let energy_weights = |e: &[f64]| -> (f64, Vec<f64>) {
        let mut loss = 0.0;
        let mut c = Vec::with_capacity(e.len());
        for (k, l) in items.iter().enumerate() {
            let d = (e[k] - l.energy) / natoms[k];
            match cfg.loss {
                LossKind::Mae => {
                    loss += d.abs();
                    c.push(cfg.lambda_energy * d.signum() / (b * natoms[k]));
                }
                LossKind::Mse => {
                    loss += d * d;
                    c.push(cfg.lambda_energy * 2.0 * d / (b * natoms[k]));
                }
            }
        }
        (cfg.lambda_energy * loss / b, c)
    };

    match cfg.mode {
        ForceMode::Direct => {
            let mut tape = Tape::new();
            let mut bind = model.params.bind();
            let pos = tape.constant(batch.positions.clone());
            let enc = model.encode(&mut tape, &mut bind, &batch, pos, None);
            let e = model.energy_var(&mut tape, &mut bind, &batch, &enc);
            let ev: Vec<f64> = tape.value(e).column(0).to_vec();
            let (le, c) = energy_weights(&ev);
            let f = model.directional_var("force", &mut tape, &mut bind, &batch, &enc);
            let t = tape.constant(target_f.clone());
            let d = tape.sub(f, t);
            let (lf_var, lf_scale) = match cfg.loss {
                LossKind::Mae => (tape.abs(d), cfg.lambda_force / nf),
                LossKind::Mse => (tape.mul(d, d), cfg.lambda_force / nf),
            };
            let lf = tape.sum(lf_var);
            let lf = tape.scale(lf, lf_scale);
            let cw = tape.constant(Mat::from_shape_vec((1, c.len()), c).expect("row"));
            let se = tape.matmul(cw, e);
            let total = tape.add(se, lf);
            let grads = bind.collect(&tape.backward(total));
            (le, tape.scalar(lf), grads)
        }
        ForceMode::Conservative => {
            let mut tape = Tape::new();
            let mut bind = model.params.bind();
            let pos = tape.variable(batch.positions.clone());
            let enc = model.encode(&mut tape, &mut bind, &batch, pos, None);
            let e = model.energy_var(&mut tape, &mut bind, &batch, &enc);
            let total = tape.sum(e);
            let dedx = tape.backward(total).get_or_zeros(pos, (batch.num_nodes, 3));
            let ev: Vec<f64> = tape.value(e).column(0).to_vec();
            let (le, c) = energy_weights(&ev);
            let cw = tape.constant(Mat::from_shape_vec((1, c.len()), c).expect("row"));
            let se = tape.matmul(cw, e);
            let mut grads = bind.collect(&tape.backward(se));

            // u = ∂L_F/∂F
            let diff = -&dedx - &target_f;
            let (lf, u) = match cfg.loss {
                LossKind::Mae => (
                    cfg.lambda_force * diff.iter().map(|x| x.abs()).sum::<f64>() / nf,
                    diff.mapv(|x| cfg.lambda_force * x.signum() / nf),
                ),
                LossKind::Mse => (
                    cfg.lambda_force * diff.iter().map(|x| x * x).sum::<f64>() / nf,
                    diff.mapv(|x| cfg.lambda_force * 2.0 * x / nf),
                ),
            };
            grads.add_scaled(&force_pullback(model, &batch, &u, cfg.hvp_step), 1.0);
            (le, lf, grads)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub step: usize,
    pub lr: f64,
    pub energy_loss: f64,
    pub force_loss: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub initial: Metrics,
    pub metrics: Metrics,
    pub log: Vec<FinetuneRecord>,
    /// Batch indices per step, for data-order comparisons.
    pub order: Vec<Vec<usize>>,
}

impl FinetuneOutcome {
    pub fn csv(&self) -> String {
        let mut s = String::from("step,energy_loss,force_loss,lr\n");
        for r in &self.log {
            s.push_str(&format!("{},{},{},{}\n", r.step, r.energy_loss, r.force_loss, r.lr));
        }
        s
    }
}

/// Supervised training on energies and forces; metrics are reported on
/// `held_out` before and after training.
pub fn finetune(model: Model, train: &[AtomicStructure], held_out: &[AtomicStructure], cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.optimizer.validate()?;
    if train.is_empty() {
        return input("fine-tuning needs a nonempty training set");
    }
    let train_p = prepare(&model, train, true)?;
    let test_p = prepare(&model, held_out, false)?;
    let initial = evaluate_prepared(&model, &test_p, cfg.mode);
    let mut model = model;
    if cfg.fit_reference && cfg.optimizer.steps > 0 {
        fit_reference_energies(&mut model, &train_p);
    }
    let mut opt = AdamW::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut order = Vec::new();
    for step in 0..cfg.optimizer.steps {
        let lr = lr_at(step + 1, &cfg.optimizer);
        let idx = sample_indices(&mut rng, train_p.len(), cfg.optimizer.batch_size);
        let items: Vec<&Labelled> = idx.iter().map(|&i| &train_p[i]).collect();
        let (le, lf, mut grads) = finetune_gradients(&model, &items, cfg);
        if !(le + lf).is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("energy loss {le}, force loss {lf}"),
            });
        }
        clip_gradients(&mut grads, cfg.optimizer.clip);
        opt.step(&mut model.params, &grads, lr, &cfg.optimizer);
        log.push(FinetuneRecord {
            step: step + 1,
            lr,
            energy_loss: le,
            force_loss: lf,
        });
        order.push(idx);
    }
    let metrics = evaluate_prepared(&model, &test_p, cfg.mode);
    Ok(FinetuneOutcome {
        checkpoint: Checkpoint {
            model,
            optimizer: Some(opt),
            step: cfg.optimizer.steps,
            rng: Some(RngState::capture(&rng)),
            meta: serde_json::json!({ "mode": cfg.mode, "loss": cfg.loss }),
        },
        initial,
        metrics,
        log,
        order,
    })
}
