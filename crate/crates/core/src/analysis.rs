//! Frozen-embedding analysis: per-stream retrieval, probing, latent
//! uniformity and per-stream gradient sensitivity.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape};
use crate::error::{domain, input, Error, Result};
use crate::linalg::least_squares;
use crate::model::nn::Mlp;
use crate::model::{Batch, GraphSample, Model, Stream};
use crate::structure::{compress_species, mean_nearest_neighbor_distance, AtomicStructure, NeighborGraph};
use crate::train::{clip_gradients, lr_at, AdamW, OptimizerConfig};

/// Labels aligned with the index rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordLabels {
    /// Sorted distinct atomic numbers.
    pub element_set: Vec<u8>,
    pub space_group: Option<i64>,
    pub crystal_system: Option<i64>,
    pub formation_energy: Option<f64>,
    pub mean_nn_distance: Option<f64>,
    /// Most frequent element, ties to the lower atomic number.
    pub majority_element: u8,
}

impl RecordLabels {
    pub fn of(s: &AtomicStructure) -> Self {
        let comp = compress_species(&s.species);
        let majority = comp
            .tokens
            .iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map_or(0, |t| t.0);
        Self {
            element_set: comp.element_set(),
            space_group: s.labels.int("space_group"),
            crystal_system: s.labels.int("crystal_system"),
            formation_energy: s.labels.float("formation_energy"),
            mean_nn_distance: mean_nearest_neighbor_distance(s),
            majority_element: majority,
        }
    }
}

/// Per-structure pooled vectors for each stream, one row per record.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub comp: Mat,
    pub structure: Mat,
    pub interaction: Mat,
    pub joint: Mat,
    pub labels: Vec<RecordLabels>,
}

const INDEX_MAGIC: &[u8; 8] = b"TRISTIDX";
const INDEX_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    records: usize,
    widths: [usize; 4],
    labels: Vec<RecordLabels>,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn space(&self, stream: Stream) -> &Mat {
        match stream {
            Stream::Comp => &self.comp,
            Stream::Struct => &self.structure,
            Stream::Int => &self.interaction,
            Stream::Joint => &self.joint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for s in Stream::ALL {
            let m = self.space(s);
            if m.nrows() != n {
                return input(format!("{} space has {} rows for {n} records", s.name(), m.nrows()));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return domain(format!("{} space has non-finite entries", s.name()));
            }
        }
        Ok(())
    }

    /// `magic ‖ u32 version ‖ u64 header length ‖ JSON header ‖ four f32 LE
    /// matrices (comp, struct, int, joint), row-major`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = IndexHeader {
            records: self.len(),
            widths: Stream::ALL.map(|s| self.space(s).ncols()),
            labels: self.labels.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for s in Stream::ALL {
            for v in self.space(s).iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Input(format!("index file: {m}"));
        if bytes.len() < 20 || &bytes[..8] != INDEX_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != INDEX_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: IndexHeader = serde_json::from_slice(&bytes[20..hend])?;
        let mut off = hend;
        let mut mats = Vec::with_capacity(4);
        for w in header.widths {
            let n = header.records * w;
            let end = off + 4 * n;
            if end > bytes.len() {
                return Err(bad("truncated data"));
            }
            let vals = bytes[off..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            mats.push(Mat::from_shape_vec((header.records, w), vals).map_err(|e| bad(&e.to_string()))?);
            off = end;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let joint = mats.pop().expect("four spaces");
        let interaction = mats.pop().expect("four spaces");
        let structure = mats.pop().expect("four spaces");
        let comp = mats.pop().expect("four spaces");
        let index = Self {
            comp,
            structure,
            interaction,
            joint,
            labels: header.labels,
        };
        index.validate()?;
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Pooled embeddings of every structure, each encoded on its own.
pub fn embed_dataset(model: &Model, data: &[AtomicStructure]) -> Result<EmbeddingIndex> {
    let rows = data
        .par_iter()
        .map(|s| {
            let g = model.graph(s)?;
            let e = model.embed(&[GraphSample::new(s, &g)]);
            Ok((Stream::ALL.map(|st| e.pooled(st).row(0).to_vec()), RecordLabels::of(s)))
        })
        .collect::<Result<Vec<_>>>()?;
    let stack = |k: usize| {
        let w = rows.first().map_or(0, |r| r.0[k].len());
        Mat::from_shape_fn((rows.len(), w), |(i, j)| rows[i].0[k][j])
    };
    let index = EmbeddingIndex {
        comp: stack(0),
        structure: stack(1),
        interaction: stack(2),
        joint: stack(3),
        labels: rows.iter().map(|r| r.1.clone()).collect(),
    };
    index.validate()?;
    Ok(index)
}

fn unit_rows(m: &Mat) -> (Mat, Vec<bool>) {
    let mut out = m.clone();
    let mut ok = Vec::with_capacity(m.nrows());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        ok.push(n > 0.0);
        if n > 0.0 {
            row /= n;
        }
    }
    (out, ok)
}

/// Cosine similarities against a normalized space.
fn ranked(units: &Mat, valid: &[bool], q: &[f64], exclude: Option<usize>, k: usize) -> Vec<(usize, f64)> {
    let mut scores: Vec<(usize, f64)> = (0..units.nrows())
        .filter(|&i| valid[i] && Some(i) != exclude)
        .map(|i| (i, units.row(i).iter().zip(q).map(|(a, b)| a * b).sum()))
        .collect();
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scores.truncate(k);
    scores
}

/// Top-`k` records by cosine similarity to `vector`; ties go to the lower id.
pub fn knn_query(index: &EmbeddingIndex, vector: &[f64], stream: Stream, k: usize, exclude: Option<usize>) -> Result<Vec<(usize, f64)>> {
    let space = index.space(stream);
    if vector.len() != space.ncols() {
        return input(format!("query width {} does not match {} space width {}", vector.len(), stream.name(), space.ncols()));
    }
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        log::warn!("zero-norm query in {} space; nothing to rank", stream.name());
        return Ok(Vec::new());
    }
    let (units, valid) = unit_rows(space);
    let skipped = valid.iter().filter(|v| !**v).count();
    if skipped > 0 {
        log::warn!("{skipped} zero-norm records excluded from {} retrieval", stream.name());
    }
    let q: Vec<f64> = vector.iter().map(|v| v / norm).collect();
    Ok(ranked(&units, &valid, &q, exclude, k))
}

/// Neighbors of record `query`, which is itself excluded.
pub fn knn_retrieve(index: &EmbeddingIndex, query: usize, stream: Stream, k: usize) -> Result<Vec<(usize, f64)>> {
    if query >= index.len() {
        return input(format!("query id {query} out of range for {} records", index.len()));
    }
    if k >= index.len() {
        return input(format!("k = {k} must be below the record count {}", index.len()));
    }
    let v = index.space(stream).row(query).to_vec();
    knn_query(index, &v, stream, k, Some(query))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalTarget {
    ElementSet,
    SpaceGroup,
}

impl RetrievalTarget {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "element_set" => Some(Self::ElementSet),
            "space_group" => Some(Self::SpaceGroup),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub recall: f64,
    /// Queries with at least one positive in the database.
    pub evaluated: usize,
    pub skipped: usize,
}

fn same_target(a: &RecordLabels, b: &RecordLabels, t: RetrievalTarget) -> bool {
    match t {
        RetrievalTarget::ElementSet => a.element_set == b.element_set,
        RetrievalTarget::SpaceGroup => a.space_group == b.space_group,
    }
}

/// Fraction of queries whose top-`k` holds a record with the same target
/// label; queries without any positive are left out of the denominator.
pub fn recall_at_k(index: &EmbeddingIndex, stream: Stream, target: RetrievalTarget, k: usize) -> Result<Recall> {
    if target == RetrievalTarget::SpaceGroup && index.labels.iter().any(|l| l.space_group.is_none()) {
        return Err(Error::MissingLabel("space_group".into()));
    }
    let (units, valid) = unit_rows(index.space(stream));
    let hits: Vec<Option<bool>> = (0..index.len())
        .into_par_iter()
        .map(|q| {
            let lq = &index.labels[q];
            let positive = (0..index.len()).any(|i| i != q && valid[i] && same_target(lq, &index.labels[i], target));
            if !positive || !valid[q] {
                return None;
            }
            let top = ranked(&units, &valid, &units.row(q).to_vec(), Some(q), k);
            Some(top.iter().any(|(i, _)| same_target(lq, &index.labels[*i], target)))
        })
        .collect();
    let evaluated = hits.iter().flatten().count();
    let found = hits.iter().flatten().filter(|h| **h).count();
    Ok(Recall {
        recall: if evaluated == 0 { 0.0 } else { found as f64 / evaluated as f64 },
        evaluated,
        skipped: index.len() - evaluated,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    CrystalSystem,
    MajorityElement,
    FormationEnergy,
    MeanNnDistance,
}

impl ProbeTarget {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "crystal_system" => Some(Self::CrystalSystem),
            "majority_element" => Some(Self::MajorityElement),
            "formation_energy" => Some(Self::FormationEnergy),
            "mean_nn_distance" => Some(Self::MeanNnDistance),
            _ => None,
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, Self::CrystalSystem | Self::MajorityElement)
    }
}

/// Target values for a probe, either class ids or reals.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeLabels {
    Classes(Vec<i64>),
    Values(Vec<f64>),
}

pub fn probe_labels(index: &EmbeddingIndex, target: ProbeTarget) -> Result<ProbeLabels> {
    let missing = || Error::MissingLabel(format!("{target:?}"));
    let l = &index.labels;
    Ok(match target {
        ProbeTarget::CrystalSystem => ProbeLabels::Classes(l.iter().map(|r| r.crystal_system.ok_or_else(missing)).collect::<Result<_>>()?),
        ProbeTarget::MajorityElement => ProbeLabels::Classes(l.iter().map(|r| r.majority_element as i64).collect()),
        ProbeTarget::FormationEnergy => ProbeLabels::Values(l.iter().map(|r| r.formation_energy.ok_or_else(missing)).collect::<Result<_>>()?),
        ProbeTarget::MeanNnDistance => ProbeLabels::Values(l.iter().map(|r| r.mean_nn_distance.ok_or_else(missing)).collect::<Result<_>>()?),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeHead {
    Linear,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// `batch_size` is ignored: probes train full batch.
    pub optimizer: OptimizerConfig,
    pub hidden: usize,
    pub seed: u64,
    /// Permute the training labels (control run).
    pub shuffle_labels: bool,
    /// Ridge strength of the closed-form linear regression probe.
    pub ridge: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig {
                lr: 1e-2,
                warmup: 20,
                steps: 1000,
                weight_decay: 1e-4,
                clip: 10.0,
                batch_size: 1,
                ..OptimizerConfig::pretrain()
            },
            hidden: 128,
            seed: 0,
            shuffle_labels: false,
            ridge: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeReport {
    Classification {
        accuracy: f64,
        /// Accuracy of always predicting the most frequent training class.
        majority_baseline: f64,
        chance: f64,
        classes: usize,
        /// Test classes never seen in training; those records count as errors.
        absent_from_train: Vec<i64>,
    },
    Regression {
        mae: f64,
        /// MAE of predicting the training mean.
        mean_baseline: f64,
        target_scale: f64,
    },
}

/// Standardizes columns with training statistics; constant columns pass
/// through centered.
fn standardize(x: &Mat, train: &[usize]) -> Mat {
    let d = x.ncols();
    let n = train.len() as f64;
    let mut out = x.clone();
    for j in 0..d {
        let mean = train.iter().map(|&i| x[[i, j]]).sum::<f64>() / n;
        let var = train.iter().map(|&i| (x[[i, j]] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
        out.column_mut(j).mapv_inplace(|v| (v - mean) / sd);
    }
    out
}

fn rows(x: &Mat, ids: &[usize]) -> Mat {
    Mat::from_shape_fn((ids.len(), x.ncols()), |(i, j)| x[[ids[i], j]])
}

/// Trains a head on `x` (`n × d`) by full-batch AdamW on the given loss
/// and returns a predictor for arbitrary rows.
fn fit_head(x: &Mat, outputs: usize, head: ProbeHead, cfg: &ProbeConfig, loss: impl Fn(&mut Tape, crate::autodiff::Var) -> crate::autodiff::Var) -> impl Fn(&Mat) -> Mat {
    let dims = match head {
        ProbeHead::Linear => vec![x.ncols(), outputs],
        ProbeHead::Mlp => vec![x.ncols(), cfg.hidden, cfg.hidden, outputs],
    };
    let mlp = Mlp::new("probe", dims);
    let mut params = crate::autodiff::ParameterStore::new(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mlp.init(&mut params, &mut rng);
    let mut opt = AdamW::new(&params);
    for step in 0..cfg.optimizer.steps {
        let mut tape = Tape::new();
        let mut bind = params.bind();
        let xin = tape.constant(x.clone());
        let out = mlp.forward(&mut tape, &mut bind, xin);
        let l = loss(&mut tape, out);
        let mut g = bind.collect(&tape.backward(l));
        clip_gradients(&mut g, cfg.optimizer.clip);
        opt.step(&mut params, &g, lr_at(step + 1, &cfg.optimizer), &cfg.optimizer);
    }
    move |q: &Mat| {
        let mut tape = Tape::new();
        let mut bind = params.bind_frozen();
        let xin = tape.constant(q.clone());
        let out = mlp.forward(&mut tape, &mut bind, xin);
        tape.value(out).clone()
    }
}

/// Trains a probe on frozen `stream` embeddings of `train` and scores it on
/// `test`.
pub fn probe(
    index: &EmbeddingIndex,
    stream: Stream,
    target: ProbeTarget,
    head: ProbeHead,
    train: &[usize],
    test: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let labels = probe_labels(index, target)?;
    probe_with_labels(index.space(stream), &labels, head, train, test, cfg)
}

/// Probe on an explicit feature matrix and label vector.
pub fn probe_with_labels(features: &Mat, labels: &ProbeLabels, head: ProbeHead, train: &[usize], test: &[usize], cfg: &ProbeConfig) -> Result<ProbeReport> {
    if train.is_empty() || test.is_empty() {
        return input("probe needs nonempty train and test splits");
    }
    let n = features.nrows();
    if train.iter().chain(test).any(|&i| i >= n) {
        return input("split index out of range");
    }
    let x = standardize(features, train);
    let xtr = rows(&x, train);
    let xte = rows(&x, test);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    if cfg.shuffle_labels {
        order.shuffle(&mut rng);
    }
    match labels {
        ProbeLabels::Classes(c) => {
            let ytr: Vec<i64> = order.iter().map(|&k| c[train[k]]).collect();
            let yte: Vec<i64> = test.iter().map(|&i| c[i]).collect();
            let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
            for y in &ytr {
                *counts.entry(*y).or_default() += 1;
            }
            let classes: Vec<i64> = counts.keys().copied().collect();
            let slot = |y: i64| classes.binary_search(&y).ok();
            let majority = *counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).expect("nonempty").0;
            let mut absent: Vec<i64> = yte.iter().copied().filter(|y| slot(*y).is_none()).collect();
            absent.sort_unstable();
            absent.dedup();
            if !absent.is_empty() {
                log::warn!("test classes absent from training: {absent:?}");
            }
            let m = classes.len();
            let onehot = Mat::from_shape_fn((ytr.len(), m), |(i, j)| if slot(ytr[i]) == Some(j) { 1.0 } else { 0.0 });
            let scale = 1.0 / ytr.len() as f64;
            let predict = fit_head(&xtr, m, head, cfg, |tape, out| {
                let lp = tape.log_softmax_rows(out);
                let t = tape.constant(onehot.clone());
                let picked = tape.mul(lp, t);
                let s = tape.sum(picked);
                tape.scale(s, -scale)
            });
            let logits = predict(&xte);
            let correct = yte
                .iter()
                .enumerate()
                .filter(|(i, y)| {
                    let row = logits.row(*i);
                    let best = (0..m).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).expect("classes");
                    Some(best) == slot(**y)
                })
                .count();
            let base = yte.iter().filter(|&&y| y == majority).count();
            Ok(ProbeReport::Classification {
                accuracy: correct as f64 / yte.len() as f64,
                majority_baseline: base as f64 / yte.len() as f64,
                chance: 1.0 / m as f64,
                classes: m,
                absent_from_train: absent,
            })
        }
        ProbeLabels::Values(v) => {
            let ytr: Vec<f64> = order.iter().map(|&k| v[train[k]]).collect();
            let yte: Vec<f64> = test.iter().map(|&i| v[i]).collect();
            let mean = ytr.iter().sum::<f64>() / ytr.len() as f64;
            let sd = (ytr.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ytr.len() as f64).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            let pred: Vec<f64> = match head {
                ProbeHead::Linear => {
                    // the affine least-squares optimum, solved exactly
                    let d = xtr.ncols();
                    let design = |m: &Mat| nalgebra::DMatrix::from_fn(m.nrows(), d + 1, |i, j| if j == d { 1.0 } else { m[[i, j]] });
                    let y = nalgebra::DMatrix::from_fn(ytr.len(), 1, |i, _| ytr[i]);
                    let w = least_squares(&design(&xtr), &y, cfg.ridge).ok_or_else(|| Error::Domain("singular probe design".into()))?;
                    let p = design(&xte) * w;
                    p.iter().copied().collect()
                }
                ProbeHead::Mlp => {
                    let t = Mat::from_shape_fn((ytr.len(), 1), |(i, _)| (ytr[i] - mean) / sd);
                    let scale = 1.0 / ytr.len() as f64;
                    let predict = fit_head(&xtr, 1, head, cfg, |tape, out| {
                        let tv = tape.constant(t.clone());
                        let d = tape.sub(out, tv);
                        let s = tape.sum_squares(d);
                        tape.scale(s, scale)
                    });
                    predict(&xte).column(0).iter().map(|p| mean + sd * p).collect()
                }
            };
            let mae = pred.iter().zip(&yte).map(|(p, y)| (p - y).abs()).sum::<f64>() / yte.len() as f64;
            let base = yte.iter().map(|y| (y - mean).abs()).sum::<f64>() / yte.len() as f64;
            Ok(ProbeReport::Regression {
                mae,
                mean_baseline: base,
                target_scale: sd,
            })
        }
    }
}

/// `log mean_{i<j} exp(−2 ‖x_i − x_j‖²)` over L2-normalized rows.
pub fn uniformity(vectors: &Mat) -> Result<f64> {
    let n = vectors.nrows();
    if n < 2 {
        return domain("uniformity needs at least two vectors");
    }
    let (u, ok) = unit_rows(vectors);
    if ok.iter().any(|v| !v) {
        return domain("uniformity is undefined for zero vectors");
    }
    let sum: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| {
                    let d2: f64 = u.row(i).iter().zip(u.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (-2.0 * d2).exp()
                })
                .sum::<f64>()
        })
        .sum();
    Ok((sum / (n * (n - 1) / 2) as f64).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityTarget {
    Energy,
    ForceNormSum,
}

/// Target scalar with an additive offset on the fused node features.
pub fn target_with_offset(model: &Model, s: &AtomicStructure, g: &NeighborGraph, target: SensitivityTarget, offset: &Mat) -> f64 {
    let batch = Batch::new(&[GraphSample::new(s, g)]);
    let mut tape = Tape::new();
    let mut bind = model.params.bind_frozen();
    let pos = tape.variable(batch.positions.clone());
    let mut enc = model.encode(&mut tape, &mut bind, &batch, pos, None);
    let off = tape.constant(offset.clone());
    enc.fused = tape.add(enc.fused, off);
    let e = model.energy_var(&mut tape, &mut bind, &batch, &enc);
    let e = tape.sum(e);
    match target {
        SensitivityTarget::Energy => tape.scalar(e),
        SensitivityTarget::ForceNormSum => {
            let f = tape.backward(e).get_or_zeros(pos, (batch.num_nodes, 3));
            f.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum()
        }
    }
}

/// `∂E/∂h` and `−∂E/∂x` on the fixed graph at the given positions.
fn fused_gradient(model: &Model, s: &AtomicStructure, g: &NeighborGraph, positions: &Mat) -> (Mat, Mat) {
    let batch = Batch::new(&[GraphSample::new(s, g)]);
    let mut tape = Tape::new();
    let mut bind = model.params.bind_frozen();
    let pos = tape.variable(positions.clone());
    let mut enc = model.encode(&mut tape, &mut bind, &batch, pos, None);
    // the tape keeps leaf gradients only, so differentiate a zero offset
    let shape = tape.shape(enc.fused);
    let offset = tape.variable(Mat::zeros(shape));
    enc.fused = tape.add(enc.fused, offset);
    let e = model.energy_var(&mut tape, &mut bind, &batch, &enc);
    let e = tape.sum(e);
    let grads = tape.backward(e);
    (grads.get_or_zeros(offset, shape), -grads.get_or_zeros(pos, (batch.num_nodes, 3)))
}

/// Gradient of the target with respect to the fused node features (`N × D`).
/// The force target uses `∂T/∂h = −D_û (∂E/∂h)`, `û_k = F_k/‖F_k‖`, by a
/// central difference of exact gradients along `û`.
pub fn sensitivity_gradient(model: &Model, s: &AtomicStructure, g: &NeighborGraph, target: SensitivityTarget) -> Mat {
    let x = Mat::from_shape_fn((s.len(), 3), |(i, a)| s.positions[i][a]);
    let (gh, f) = fused_gradient(model, s, g, &x);
    match target {
        SensitivityTarget::Energy => gh,
        SensitivityTarget::ForceNormSum => {
            let mut u = f;
            for mut r in u.rows_mut() {
                let n = r.dot(&r).sqrt();
                if n > 0.0 {
                    r /= n;
                }
            }
            let h = 1e-4;
            let (gp, _) = fused_gradient(model, s, g, &(&x + &(&u * h)));
            let (gm, _) = fused_gradient(model, s, g, &(&x - &(&u * h)));
            (gm - gp) / (2.0 * h)
        }
    }
}

/// Mean per-node L2 norm of the target gradient restricted to each stream's
/// columns, as `[comp, struct, int]`.
pub fn stream_sensitivity(model: &Model, s: &AtomicStructure, target: SensitivityTarget) -> Result<[f64; 3]> {
    let g = model.graph(s)?;
    let grad = sensitivity_gradient(model, s, &g, target);
    let n = grad.nrows().max(1) as f64;
    Ok(model.slices().map(|(a, b)| {
        grad.rows()
            .into_iter()
            .map(|r| r.slice(ndarray::s![a..b]).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / n
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniformity_closed_forms() {
        let same = Mat::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(uniformity(&same).unwrap(), 0.0);
        let anti = Mat::from_shape_vec((2, 2), vec![1.0, 0.0, -3.0, 0.0]).unwrap();
        assert!((uniformity(&anti).unwrap() + 8.0).abs() < 1e-12);
        assert!(uniformity(&Mat::zeros((1, 3))).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let units = Mat::from_shape_vec((3, 2), vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = ranked(&units, &[true; 3], &[1.0, 0.0], None, 3);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(r[2].1, 0.0);
    }
}
