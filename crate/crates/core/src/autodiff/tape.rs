//! Tensor-level reverse-mode tape.
//!
//! Values are dense row-major `f64` matrices. Every operation appends a node
//! holding its value and whatever it needs for the reverse sweep. The tape
//! only supports first derivatives; second-order quantities are obtained by
//! finite differences of these exact gradients (see [`super::fd`]).

use ndarray::{s, Array2, Axis};

use crate::basis::Dual;
use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Flattening of density coefficients `[α][l m]` into power-spectrum
/// invariants `[(α ≤ α')][l]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpectrumLayout {
    pub channels: usize,
    pub l_max: usize,
}

impl SpectrumLayout {
    pub fn num_harmonics(&self) -> usize {
        (self.l_max + 1) * (self.l_max + 1)
    }

    pub fn input_width(&self) -> usize {
        self.channels * self.num_harmonics()
    }

    pub fn num_pairs(&self) -> usize {
        self.channels * (self.channels + 1) / 2
    }

    pub fn output_width(&self) -> usize {
        self.num_pairs() * (self.l_max + 1)
    }

    /// `(α, α')` for each pair index, upper triangle in row order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_pairs());
        for a in 0..self.channels {
            for b in a..self.channels {
                out.push((a, b));
            }
        }
        out
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    DivColSafe(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Abs(Var),
    Sum(Var),
    Transpose(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
    RowOuter(Var, Var),
    LayerNorm { x: Var, xhat: Mat, inv_std: Vec<f64> },
    LogSoftmax(Var),
    RowJacobian { x: Var, jac: Vec<f64> },
    PowerSpectrum(Var, SpectrumLayout),
    Attention(Box<AttentionRecord>),
    EppsPulley(Box<EppsPulleyRecord>),
    Unbacked,
}

struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    segments: Vec<Segment>,
    /// probabilities per (segment, head), each `len × len` row-major
    probs: Vec<Vec<f64>>,
}

struct EppsPulleyRecord {
    z: Var,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    target: Vec<f64>,
    cos_mean: Vec<f64>,
    sin_mean: Vec<f64>,
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar output, indexed by the variable that received them.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn add_into(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Differentiable input.
    pub fn variable(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Mat::zeros((rows, cols)))
    }

    /// Neighbor lists are built from plain positions and fixed per input.
    /// Re-enumerating edges from a recorded variable is not differentiable.
    pub fn rebuild_graph(&self, _positions: Var) -> Result<()> {
        Err(Error::Unsupported(
            "neighbor-graph construction is not differentiable; the graph is fixed per input"
                .into(),
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a + row` with `row` of shape `1 × cols` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    /// `a * col` with `col` of shape `rows × 1` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) * self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(v, Op::MulCol(a, col), ng)
    }

    /// Row-wise division; rows whose divisor is exactly zero produce zeros.
    pub fn div_col_safe(&mut self, a: Var, col: Var) -> Var {
        let mut v = self.value(a).clone();
        let w = self.value(col);
        for (mut row, d) in v.rows_mut().into_iter().zip(w.column(0)) {
            if *d == 0.0 {
                row.fill(0.0);
            } else {
                row /= *d;
            }
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(v, Op::DivColSafe(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(silu);
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum(sq)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must match");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::Slice(a, start), ng)
    }

    /// `out[r] = a[index[r]]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), index);
        let ng = self.ng(a);
        self.push(v, Op::Gather(a, index.to_vec()), ng)
    }

    /// `out[index[r]] += a[r]` with `rows` output rows.
    pub fn scatter_add_rows(&mut self, a: Var, index: &[usize], rows: usize) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros((rows, src.ncols()));
        for (r, &dst) in index.iter().enumerate() {
            let mut row = v.row_mut(dst);
            row += &src.row(r);
        }
        let ng = self.ng(a);
        self.push(v, Op::ScatterAdd(a, index.to_vec()), ng)
    }

    /// Per-row outer product flattened as `out[r, i * q + j] = a[r, i] b[r, j]`.
    pub fn row_outer(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, p) = av.dim();
        let q = bv.ncols();
        let mut v = Mat::zeros((n, p * q));
        for r in 0..n {
            for i in 0..p {
                let ai = av[[r, i]];
                for j in 0..q {
                    v[[r, i * q + j]] = ai * bv[[r, j]];
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::RowOuter(a, b), ng)
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (n, m) = x.dim();
        let mut xhat = Mat::zeros((n, m));
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = x.row(r);
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..m {
                xhat[[r, c]] = (row[c] - mean) * is;
            }
        }
        let ng = self.ng(a);
        self.push(
            xhat.clone(),
            Op::LayerNorm {
                x: a,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let mx = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            row -= lse;
        }
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmax(a), ng)
    }

    /// Applies `f` independently to every row of `a` (width `N`) using
    /// forward-mode duals, recording the exact per-row Jacobian.
    pub fn map_rows<const N: usize>(
        &mut self,
        a: Var,
        out_width: usize,
        mut f: impl FnMut(&[Dual<N>; N], &mut Vec<Dual<N>>),
    ) -> Var {
        let x = self.value(a);
        assert_eq!(x.ncols(), N, "map_rows input width");
        let rows = x.nrows();
        let mut v = Mat::zeros((rows, out_width));
        let mut jac = vec![0.0; rows * out_width * N];
        let mut buf = Vec::with_capacity(out_width);
        for r in 0..rows {
            let inp: [Dual<N>; N] = std::array::from_fn(|c| Dual::variable(x[[r, c]], c));
            buf.clear();
            f(&inp, &mut buf);
            assert_eq!(buf.len(), out_width, "map_rows output width");
            for (o, d) in buf.iter().enumerate() {
                v[[r, o]] = d.v;
                let base = (r * out_width + o) * N;
                jac[base..base + N].copy_from_slice(&d.d);
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::RowJacobian { x: a, jac }, ng)
    }

    /// Rotation-invariant contraction `p[(α,α'), l] = Σ_m c[α,l,m] c[α',l,m]`.
    pub fn power_spectrum(&mut self, c: Var, layout: SpectrumLayout) -> Var {
        let cv = self.value(c);
        assert_eq!(cv.ncols(), layout.input_width(), "density coefficient width");
        let nh = layout.num_harmonics();
        let pairs = layout.pairs();
        let lw = layout.l_max + 1;
        let mut v = Mat::zeros((cv.nrows(), layout.output_width()));
        for r in 0..cv.nrows() {
            let row = cv.row(r);
            for (p, &(a, b)) in pairs.iter().enumerate() {
                for l in 0..lw {
                    let mut acc = 0.0;
                    for idx in l * l..(l + 1) * (l + 1) {
                        acc += row[a * nh + idx] * row[b * nh + idx];
                    }
                    v[[r, p * lw + l]] = acc;
                }
            }
        }
        let ng = self.ng(c);
        self.push(v, Op::PowerSpectrum(c, layout), ng)
    }

    /// Multi-head softmax attention restricted to contiguous row segments,
    /// with an additive per-key logit bias (e.g. `ln count`).
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        key_bias: &[f64],
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.dim();
        assert_eq!(width % heads, 0, "width divisible by heads");
        assert_eq!(key_bias.len(), rows);
        let dh = width / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((rows, width));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut logits = vec![0.0; seg.len * seg.len];
                for t in 0..seg.len {
                    for s in 0..seg.len {
                        let mut dot = 0.0;
                        for c in cols.clone() {
                            dot += qv[[seg.start + t, c]] * kv[[seg.start + s, c]];
                        }
                        logits[t * seg.len + s] = dot * inv;
                    }
                }
                let p = biased_softmax(&logits, seg.len, &key_bias[seg.start..seg.start + seg.len]);
                for t in 0..seg.len {
                    for s in 0..seg.len {
                        let w = p[t * seg.len + s];
                        for c in cols.clone() {
                            out[[seg.start + t, c]] += w * vv[[seg.start + s, c]];
                        }
                    }
                }
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention(Box::new(AttentionRecord {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            })),
            ng,
        )
    }

    /// Attention probabilities recorded by [`Tape::segment_attention`], per
    /// `(segment, head)` in segment-major order.
    pub fn attention_probs(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention(rec) => Some(&rec.probs),
            _ => None,
        }
    }

    /// Epps–Pulley statistic of each column of `z` (samples × slices) against
    /// the standard normal, integrated on `nodes` with `weights`; returns the
    /// mean over slices as a `1 × 1` value.
    pub fn epps_pulley(&mut self, z: Var, nodes: &[f64], weights: &[f64]) -> Var {
        let zv = self.value(z);
        let (b, slices) = zv.dim();
        let nt = nodes.len();
        let target: Vec<f64> = nodes.iter().map(|t| (-0.5 * t * t).exp()).collect();
        let mut cos_mean = vec![0.0; slices * nt];
        let mut sin_mean = vec![0.0; slices * nt];
        for s in 0..slices {
            for (j, t) in nodes.iter().enumerate() {
                let (mut cs, mut sn) = (0.0, 0.0);
                for r in 0..b {
                    let (si, co) = (t * zv[[r, s]]).sin_cos();
                    cs += co;
                    sn += si;
                }
                cos_mean[s * nt + j] = cs / b as f64;
                sin_mean[s * nt + j] = sn / b as f64;
            }
        }
        let mut total = 0.0;
        for s in 0..slices {
            for j in 0..nt {
                let dc = cos_mean[s * nt + j] - target[j];
                let ds = sin_mean[s * nt + j];
                total += weights[j] * target[j] * (dc * dc + ds * ds);
            }
        }
        let value = total * b as f64 / slices as f64;
        let ng = self.ng(z);
        self.push(
            Mat::from_elem((1, 1), value),
            Op::EppsPulley(Box::new(EppsPulleyRecord {
                z,
                nodes: nodes.to_vec(),
                weights: weights.to_vec(),
                target,
                cos_mean,
                sin_mean,
            })),
            ng,
        )
    }

    /// A value whose gradient is deliberately not tracked.
    pub fn detached(&mut self, value: Mat) -> Var {
        self.push(value, Op::Unbacked, false)
    }

    /// Reverse sweep from the scalar `out`. Only leaf gradients are kept.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar output");
        let n = out.0 + 1;
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(Mat::ones((1, 1)));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.reverse(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn reverse(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Unbacked => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    add_into(&mut grads[a.0], g.dot(&val(*b).t()));
                }
                if want(*b) {
                    add_into(&mut grads[b.0], val(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if want(*b) {
                    add_into(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if want(*b) {
                    add_into(&mut grads[b.0], -g);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    add_into(&mut grads[a.0], g * val(*b));
                }
                if want(*b) {
                    add_into(&mut grads[b.0], g * val(*a));
                }
            }
            Op::AddRow(a, row) => {
                if want(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if want(*row) {
                    add_into(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if want(*a) {
                    add_into(&mut grads[a.0], g * val(*row));
                }
                if want(*row) {
                    let p = g * val(*a);
                    add_into(&mut grads[row.0], p.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, col) => {
                if want(*a) {
                    add_into(&mut grads[a.0], g * val(*col));
                }
                if want(*col) {
                    let p = g * val(*a);
                    add_into(&mut grads[col.0], p.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::DivColSafe(a, col) => {
                let w = val(*col);
                let av = val(*a);
                if want(*a) {
                    let mut ga = g.clone();
                    for (mut row, d) in ga.rows_mut().into_iter().zip(w.column(0)) {
                        if *d == 0.0 {
                            row.fill(0.0);
                        } else {
                            row /= *d;
                        }
                    }
                    add_into(&mut grads[a.0], ga);
                }
                if want(*col) {
                    let mut gw = Mat::zeros(w.dim());
                    for r in 0..w.nrows() {
                        let d = w[[r, 0]];
                        if d != 0.0 {
                            let dot: f64 = g.row(r).dot(&av.row(r));
                            gw[[r, 0]] = -dot / (d * d);
                        }
                    }
                    add_into(&mut grads[col.0], gw);
                }
            }
            Op::Scale(a, c) => add_into(&mut grads[a.0], g * *c),
            Op::Silu(a) => {
                let mut ga = val(*a).mapv(silu_grad);
                ga *= g;
                add_into(&mut grads[a.0], ga);
            }
            Op::Abs(a) => {
                let mut ga = val(*a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                ga *= g;
                add_into(&mut grads[a.0], ga);
            }
            Op::Sum(a) => {
                let gs = g[[0, 0]];
                add_into(&mut grads[a.0], Mat::from_elem(val(*a).dim(), gs));
            }
            Op::Transpose(a) => add_into(&mut grads[a.0], g.t().to_owned()),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if want(*p) {
                        add_into(&mut grads[p.0], g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::Slice(a, start) => {
                let mut ga = Mat::zeros(val(*a).dim());
                let w = g.ncols();
                ga.slice_mut(s![.., *start..*start + w]).assign(g);
                add_into(&mut grads[a.0], ga);
            }
            Op::Gather(a, index) => {
                let mut ga = Mat::zeros(val(*a).dim());
                for (r, &src) in index.iter().enumerate() {
                    let mut row = ga.row_mut(src);
                    row += &g.row(r);
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::ScatterAdd(a, index) => {
                add_into(&mut grads[a.0], g.select(Axis(0), index));
            }
            Op::RowOuter(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, p) = av.dim();
                let q = bv.ncols();
                if want(*a) {
                    let mut ga = Mat::zeros((n, p));
                    for r in 0..n {
                        for i in 0..p {
                            let mut acc = 0.0;
                            for j in 0..q {
                                acc += g[[r, i * q + j]] * bv[[r, j]];
                            }
                            ga[[r, i]] = acc;
                        }
                    }
                    add_into(&mut grads[a.0], ga);
                }
                if want(*b) {
                    let mut gb = Mat::zeros((n, q));
                    for r in 0..n {
                        for i in 0..p {
                            let ai = av[[r, i]];
                            for j in 0..q {
                                gb[[r, j]] += g[[r, i * q + j]] * ai;
                            }
                        }
                    }
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let (n, m) = xhat.dim();
                let mut gx = Mat::zeros((n, m));
                for r in 0..n {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let mg = gr.sum() / m as f64;
                    let mgx = gr.dot(&xr) / m as f64;
                    for c in 0..m {
                        gx[[r, c]] = inv_std[r] * (gr[c] - mg - xr[c] * mgx);
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut ga = g.clone();
                for r in 0..y.nrows() {
                    let gs = g.row(r).sum();
                    for c in 0..y.ncols() {
                        ga[[r, c]] -= y[[r, c]].exp() * gs;
                    }
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::RowJacobian { x, jac } => {
                let (rows, n_in) = val(*x).dim();
                let n_out = g.ncols();
                let mut gx = Mat::zeros((rows, n_in));
                for r in 0..rows {
                    for o in 0..n_out {
                        let go = g[[r, o]];
                        if go == 0.0 {
                            continue;
                        }
                        let base = (r * n_out + o) * n_in;
                        for c in 0..n_in {
                            gx[[r, c]] += go * jac[base + c];
                        }
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::PowerSpectrum(c, layout) => {
                let cv = val(*c);
                let nh = layout.num_harmonics();
                let lw = layout.l_max + 1;
                let mut gc = Mat::zeros(cv.dim());
                for (p, &(a, b)) in layout.pairs().iter().enumerate() {
                    for l in 0..lw {
                        for r in 0..cv.nrows() {
                            let gp = g[[r, p * lw + l]];
                            if gp == 0.0 {
                                continue;
                            }
                            for idx in l * l..(l + 1) * (l + 1) {
                                gc[[r, a * nh + idx]] += gp * cv[[r, b * nh + idx]];
                                gc[[r, b * nh + idx]] += gp * cv[[r, a * nh + idx]];
                            }
                        }
                    }
                }
                add_into(&mut grads[c.0], gc);
            }
            Op::Attention(rec) => self.reverse_attention(rec, g, grads),
            Op::EppsPulley(rec) => {
                let zv = val(rec.z);
                let (b, slices) = zv.dim();
                let nt = rec.nodes.len();
                // value = (B / S) Σ_s Σ_j w_j φ_j [(c - φ)² + s²]
                let scale = g[[0, 0]] * b as f64 / slices as f64;
                let mut gz = Mat::zeros((b, slices));
                for s in 0..slices {
                    for j in 0..nt {
                        let t = rec.nodes[j];
                        let w = rec.weights[j] * rec.target[j] * scale;
                        let dc = 2.0 * (rec.cos_mean[s * nt + j] - rec.target[j]) * w / b as f64;
                        let ds = 2.0 * rec.sin_mean[s * nt + j] * w / b as f64;
                        for r in 0..b {
                            let (si, co) = (t * zv[[r, s]]).sin_cos();
                            gz[[r, s]] += -dc * t * si + ds * t * co;
                        }
                    }
                }
                add_into(&mut grads[rec.z.0], gz);
            }
        }
    }

    fn reverse_attention(&self, rec: &AttentionRecord, g: &Mat, grads: &mut [Option<Mat>]) {
        let (qv, kv, vv) = (
            &self.nodes[rec.q.0].value,
            &self.nodes[rec.k.0].value,
            &self.nodes[rec.v.0].value,
        );
        let (rows, width) = qv.dim();
        let dh = width / rec.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut gq = Mat::zeros((rows, width));
        let mut gk = Mat::zeros((rows, width));
        let mut gv = Mat::zeros((rows, width));
        let mut idx = 0;
        for seg in &rec.segments {
            let n = seg.len;
            for h in 0..rec.heads {
                let p = &rec.probs[idx];
                idx += 1;
                let cols = h * dh..(h + 1) * dh;
                // dP[t,s] = g_t · v_s ; dV_s += Σ_t P[t,s] g_t
                let mut dp = vec![0.0; n * n];
                for t in 0..n {
                    for s_ in 0..n {
                        let mut acc = 0.0;
                        let w = p[t * n + s_];
                        for c in cols.clone() {
                            acc += g[[seg.start + t, c]] * vv[[seg.start + s_, c]];
                            gv[[seg.start + s_, c]] += w * g[[seg.start + t, c]];
                        }
                        dp[t * n + s_] = acc;
                    }
                }
                for t in 0..n {
                    let row_dot: f64 = (0..n).map(|s_| p[t * n + s_] * dp[t * n + s_]).sum();
                    for s_ in 0..n {
                        let da = p[t * n + s_] * (dp[t * n + s_] - row_dot) * inv;
                        if da == 0.0 {
                            continue;
                        }
                        for c in cols.clone() {
                            gq[[seg.start + t, c]] += da * kv[[seg.start + s_, c]];
                            gk[[seg.start + s_, c]] += da * qv[[seg.start + t, c]];
                        }
                    }
                }
            }
        }
        if self.nodes[rec.q.0].needs_grad {
            add_into(&mut grads[rec.q.0], gq);
        }
        if self.nodes[rec.k.0].needs_grad {
            add_into(&mut grads[rec.k.0], gk);
        }
        if self.nodes[rec.v.0].needs_grad {
            add_into(&mut grads[rec.v.0], gv);
        }
    }
}

/// Row-stochastic `softmax_s(logits[t,s] + bias[s])` for an `n × n` block.
pub fn biased_softmax(logits: &[f64], n: usize, bias: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; n * n];
    for t in 0..n {
        let row = &logits[t * n..(t + 1) * n];
        let mx = row
            .iter()
            .zip(bias)
            .map(|(l, b)| l + b)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in 0..n {
            let e = (row[s] + bias[s] - mx).exp();
            p[t * n + s] = e;
            z += e;
        }
        for s in 0..n {
            p[t * n + s] /= z;
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::Scalar;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(input) for every input entry.
    fn check(inputs: Vec<Mat>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.variable(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], m.dim());
            for idx in 0..m.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, mm)| {
                            let mut mm = mm.clone();
                            if j == k {
                                let r = idx / m.ncols();
                                let c = idx % m.ncols();
                                mm[[r, c]] += delta;
                            }
                            t.variable(mm)
                        })
                        .collect();
                    let o = build(&mut t, &vs);
                    t.scalar(o)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic[[idx / m.ncols(), idx % m.ncols()]];
                let scale = fd.abs().max(an.abs()).max(1e-3);
                assert!(
                    (fd - an).abs() / scale < 1e-5,
                    "input {k} entry {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    /// Random projection to a scalar so every output entry matters.
    fn project(t: &mut Tape, x: Var, seed: u64) -> Var {
        let (r, c) = t.shape(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = t.constant(rand_mat(&mut rng, r, c));
        let m = t.mul(x, w);
        t.sum(m)
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.variable(Mat::from_shape_vec((1, 3), vec![1.0, -2.0, 0.5]).unwrap());
        let y = t.sum_squares(x);
        let g = t.backward(y);
        assert_eq!(g.get(x).unwrap().as_slice().unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constant_output_gives_zero_gradient() {
        let mut t = Tape::new();
        let x = t.variable(Mat::ones((2, 2)));
        let c = t.constant(Mat::from_elem((1, 1), 3.0));
        let z = t.scale(x, 0.0);
        let s = t.sum(z);
        let out = t.add(s, c);
        let g = t.backward(out);
        assert!(g.get_or_zeros(x, (2, 2)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn graph_rebuild_is_rejected() {
        let mut t = Tape::new();
        let x = t.variable(Mat::zeros((2, 3)));
        assert!(matches!(t.rebuild_graph(x), Err(Error::Unsupported(_))));
    }

    #[test]
    fn primitive_reverse_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 3, 5);
        check(vec![a.clone(), b.clone()], |t, v| {
            let m = t.matmul(v[0], v[1]);
            project(t, m, 1)
        });
        let c = rand_mat(&mut rng, 4, 3);
        let row = rand_mat(&mut rng, 1, 3);
        let col = rand_mat(&mut rng, 4, 1);
        check(vec![a.clone(), c.clone(), row.clone(), col.clone()], |t, v| {
            let x = t.add(v[0], v[1]);
            let x = t.sub(x, v[1]);
            let x = t.mul(x, v[1]);
            let x = t.add_row(x, v[2]);
            let x = t.mul_row(x, v[2]);
            let x = t.mul_col(x, v[3]);
            let x = t.scale(x, 1.7);
            let x = t.silu(x);
            project(t, x, 2)
        });
        let denom = Mat::from_shape_vec((4, 1), vec![0.7, -1.3, 2.0, 0.9]).unwrap();
        check(vec![a.clone(), denom], |t, v| {
            let x = t.div_col_safe(v[0], v[1]);
            project(t, x, 3)
        });
        check(vec![a.clone(), c.clone()], |t, v| {
            let x = t.concat_cols(&[v[0], v[1]]);
            let x = t.slice_cols(x, 1, 5);
            let x = t.transpose(x);
            let x = t.gather_rows(x, &[0, 2, 2, 3, 1]);
            let x = t.scatter_add_rows(x, &[1, 0, 1, 2, 2], 3);
            project(t, x, 4)
        });
        let p = rand_mat(&mut rng, 5, 2);
        let q = rand_mat(&mut rng, 5, 3);
        check(vec![p, q], |t, v| {
            let x = t.row_outer(v[0], v[1]);
            project(t, x, 5)
        });
        check(vec![a.clone()], |t, v| {
            let x = t.layer_norm(v[0], 1e-5);
            project(t, x, 6)
        });
        check(vec![a.clone()], |t, v| {
            let x = t.log_softmax_rows(v[0]);
            project(t, x, 7)
        });
        check(vec![a.clone()], |t, v| {
            let x = t.abs(v[0]);
            project(t, x, 8)
        });
        let disp = rand_mat(&mut rng, 6, 3);
        check(vec![disp], |t, v| {
            let x = t.map_rows::<3>(v[0], 2, |d, out| {
                let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                out.push(r.sin() * d[2]);
                out.push((d[0] / r).exp());
            });
            project(t, x, 9)
        });
        let layout = SpectrumLayout {
            channels: 3,
            l_max: 2,
        };
        let coeffs = rand_mat(&mut rng, 4, layout.input_width());
        check(vec![coeffs], |t, v| {
            let x = t.power_spectrum(v[0], layout);
            project(t, x, 10)
        });
    }

    #[test]
    fn attention_reverse_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, k, v) = (
            rand_mat(&mut rng, 5, 4),
            rand_mat(&mut rng, 5, 4),
            rand_mat(&mut rng, 5, 4),
        );
        let segs = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 3 }];
        let bias = [0.0, 2f64.ln(), 0.0, 3f64.ln(), 1f64.ln()];
        check(vec![q, k, v], |t, x| {
            let o = t.segment_attention(x[0], x[1], x[2], 2, &segs, &bias);
            project(t, o, 11)
        });
    }

    #[test]
    fn epps_pulley_reverse_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = rand_mat(&mut rng, 6, 4) * 2.0;
        let nodes: Vec<f64> = (0..5).map(|i| i as f64 * 0.75).collect();
        let weights = vec![0.375, 0.75, 0.75, 0.75, 0.375];
        check(vec![z], |t, x| t.epps_pulley(x[0], &nodes, &weights));
    }

    #[test]
    fn dual_sqrt_matches() {
        let d = Dual::<1>::variable(4.0, 0).sqrt();
        assert_eq!(d.v, 2.0);
        assert_eq!(d.d[0], 0.25);
    }
}
