//! Row-major 2-D tensors and a single-use reverse-mode tape.
//!
//! Every network in this crate is a composition of the row-wise operations
//! below. Orbit features are stored with one row per `(point, slot)` pair, so
//! group actions are row gathers and shared per-slot maps are plain matmuls.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

use crate::error::{EonError, Result};

/// Floating-point element type of network computations.
pub trait Real: Float + NumAssign + Sum + Send + Sync + Debug + Display + Default + 'static {
    const DTYPE: &'static str;
    const BYTES: usize;
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Self { rows, cols, data }
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// `a [m×k] · b [k×n]`; each output entry accumulates over `k` in order.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` for `a [m×k]`, `b [m×n]`.
fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(k, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a [m×n]`, `b [k×n]`.
fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, n, k) = (a.rows, a.cols, b.rows);
    let mut out = Tensor::zeros(m, k);
    for i in 0..m {
        let arow = &a.data[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b.data[kk * n..(kk + 1) * n];
            let mut acc = T::zero();
            for (x, y) in arow.iter().zip(brow) {
                acc += *x * *y;
            }
            out.data[i * k + kk] = acc;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

enum Op<T> {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Relu(Var),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    MulRow(Var, Var),
    Exp(Var),
    Gather(Var, Vec<usize>),
    /// Winning source row per output element, `usize::MAX` for empty segments.
    SegmentMax(Var, Vec<usize>),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    Reshape(Var),
    RotateXY(Var, Vec<(T, T)>),
    SumAll(Var),
    WeightedSum(Vec<(Var, T)>),
    L1 { input: Var, target: Tensor<T>, weight: Tensor<T> },
    SoftmaxCe { logits: Var, probs: Tensor<T>, targets: Vec<usize>, weights: Vec<T> },
    BceLogits { logits: Var, targets: Vec<T>, weights: Vec<T> },
    AngularL1 { sc: Var, offsets: Vec<T>, targets: Vec<T>, weights: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Relu(_) => "relu",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::MulRow(..) => "mul_row",
            Op::Exp(_) => "exp",
            Op::Gather(..) => "gather",
            Op::SegmentMax(..) => "segment_max",
            Op::ConcatCols(..) => "concat",
            Op::SliceCols(..) => "slice",
            Op::Reshape(_) => "reshape",
            Op::RotateXY(..) => "rotate_xy",
            Op::SumAll(_) => "sum",
            Op::WeightedSum(_) => "weighted_sum",
            Op::L1 { .. } => "l1_loss",
            Op::SoftmaxCe { .. } => "softmax_ce_loss",
            Op::BceLogits { .. } => "bce_loss",
            Op::AngularL1 { .. } => "angular_l1_loss",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    label: Option<String>,
}

/// Records a forward computation; [`Tape::backward`] consumes it.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the parameters used on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub by_param: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows, t.cols)
    }

    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Const)
    }

    pub fn param(&mut self, id: ParamId, value: &Tensor<T>, name: &str) -> Var {
        let v = self.push(value.clone(), Op::Param(id));
        self.set_label(v, name);
        v
    }

    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let out = matmul(self.value(a), self.value(w));
        self.push(out, Op::MatMul(a, w))
    }

    /// Adds a `[1×n]` bias to every row.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows, 1);
        assert_eq!(bias.cols, self.value(a).cols);
        let mut out = self.value(a).clone();
        let n = out.cols;
        for row in out.data.chunks_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(&bias.data) {
                *o += *bv;
            }
        }
        self.push(out, Op::AddBias(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let mut out = self.value(a).clone();
        for (o, bv) in out.data.iter_mut().zip(&self.value(b).data) {
            *o -= *bv;
        }
        self.push(out, Op::Sub(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            if !(*v > T::zero()) {
                *v = T::zero();
            }
        }
        self.push(out, Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        out.scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Var {
        assert_eq!(self.shape(a), (c.rows, c.cols), "mul_const shapes");
        let mut out = self.value(a).clone();
        for (o, cv) in out.data.iter_mut().zip(&c.data) {
            *o *= *cv;
        }
        self.push(out, Op::MulConst(a, c))
    }

    /// Multiplies every row elementwise by a `[1×n]` row vector.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let row = self.value(r).clone();
        assert_eq!(row.rows, 1);
        assert_eq!(row.cols, self.value(a).cols);
        let mut out = self.value(a).clone();
        let n = out.cols;
        for chunk in out.data.chunks_mut(n.max(1)) {
            for (o, rv) in chunk.iter_mut().zip(&row.data) {
                *o *= *rv;
            }
        }
        self.push(out, Op::MulRow(a, r))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            *v = v.exp();
        }
        self.push(out, Op::Exp(a))
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = self.value(a);
        let n = src.cols;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::from_vec(idx.len(), n, data);
        self.push(out, Op::Gather(a, idx))
    }

    /// Columnwise max over each segment of input rows; empty segments yield
    /// zeros. Ties go to the earliest row in the segment.
    pub fn segment_max(&mut self, a: Var, segments: &[Vec<usize>]) -> Var {
        let src = self.value(a);
        let n = src.cols;
        let mut out = Tensor::zeros(segments.len(), n);
        let mut arg = vec![usize::MAX; segments.len() * n];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                continue;
            }
            let orow = &mut out.data[s * n..(s + 1) * n];
            let arow = &mut arg[s * n..(s + 1) * n];
            orow.copy_from_slice(src.row(seg[0]));
            arow.fill(seg[0]);
            for &r in &seg[1..] {
                for (j, v) in src.row(r).iter().enumerate() {
                    if *v > orow[j] {
                        orow[j] = *v;
                        arow[j] = r;
                    }
                }
            }
        }
        self.push(out, Op::SegmentMax(a, arg))
    }

    /// Max over consecutive groups of `group` rows.
    pub fn group_max(&mut self, a: Var, group: usize) -> Var {
        let rows = self.value(a).rows;
        assert_eq!(rows % group, 0, "group_max row count");
        let segments: Vec<Vec<usize>> = (0..rows / group)
            .map(|p| (p * group..(p + 1) * group).collect())
            .collect();
        self.segment_max(a, &segments)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rows, tb.rows, "concat rows");
        let mut data = Vec::with_capacity(ta.rows * (ta.cols + tb.cols));
        for i in 0..ta.rows {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let out = Tensor::from_vec(ta.rows, ta.cols + tb.cols, data);
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        assert!(start + len <= src.cols, "slice out of range");
        let mut data = Vec::with_capacity(src.rows * len);
        for i in 0..src.rows {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let out = Tensor::from_vec(src.rows, len, data);
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape size");
        let out = Tensor::from_vec(rows, cols, src.data.clone());
        self.push(out, Op::Reshape(a))
    }

    /// Rotates columns 0 and 1 of each row by its own `(cos, sin)`.
    pub fn rotate_xy(&mut self, a: Var, rot: Vec<(T, T)>) -> Var {
        let src = self.value(a);
        assert!(src.cols >= 2);
        assert_eq!(rot.len(), src.rows);
        let mut out = src.clone();
        for (i, (c, s)) in rot.iter().enumerate() {
            let row = out.row_mut(i);
            let (x, y) = (row[0], row[1]);
            row[0] = *c * x - *s * y;
            row[1] = *s * x + *c * y;
        }
        self.push(out, Op::RotateXY(a, rot))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// `Σ coef · scalar` over `1×1` inputs.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, T)>) -> Var {
        let mut acc = T::zero();
        for (v, c) in &terms {
            assert_eq!(self.shape(*v), (1, 1));
            acc += *c * self.value(*v).data[0];
        }
        self.push(Tensor::scalar(acc), Op::WeightedSum(terms))
    }

    /// `Σ weight · |input − target|`.
    pub fn l1_loss(&mut self, input: Var, target: Tensor<T>, weight: Tensor<T>) -> Var {
        let x = self.value(input);
        assert_eq!((x.rows, x.cols), (target.rows, target.cols));
        assert_eq!(target.len(), weight.len());
        let s = x
            .data
            .iter()
            .zip(&target.data)
            .zip(&weight.data)
            .map(|((a, t), w)| *w * (*a - *t).abs())
            .sum();
        self.push(
            Tensor::scalar(s),
            Op::L1 {
                input,
                target,
                weight,
            },
        )
    }

    /// `Σ_i w_i · CE(softmax(logits_i), targets_i)`.
    pub fn softmax_ce(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<T>) -> Var {
        let x = self.value(logits);
        assert_eq!(targets.len(), x.rows);
        assert_eq!(weights.len(), x.rows);
        let k = x.cols;
        let mut probs = Tensor::zeros(x.rows, k);
        let mut total = T::zero();
        for i in 0..x.rows {
            let row = x.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, v) in row.iter().enumerate() {
                let e = (*v - m).exp();
                probs.data[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                probs.data[i * k + j] /= z;
            }
            if weights[i] != T::zero() {
                let lse = m + z.ln();
                total += weights[i] * (lse - row[targets[i]]);
            }
        }
        self.push(
            Tensor::scalar(total),
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
                weights,
            },
        )
    }

    /// `Σ_i w_i · BCE(σ(logit_i), target_i)` for a single-column input.
    pub fn bce_logits(&mut self, logits: Var, targets: Vec<T>, weights: Vec<T>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.cols, 1);
        assert_eq!(targets.len(), x.rows);
        let mut total = T::zero();
        for i in 0..x.rows {
            let z = x.data[i];
            // log(1 + e^{-|z|}) + max(z, 0) - z t
            let loss = (T::one() + (-z.abs()).exp()).ln() + z.max(T::zero()) - z * targets[i];
            total += weights[i] * loss;
        }
        self.push(
            Tensor::scalar(total),
            Op::BceLogits {
                logits,
                targets,
                weights,
            },
        )
    }

    /// `Σ_i w_i · |wrap(atan2(s_i, c_i) + offset_i − target_i)|` on a
    /// `[m×2]` input of `(sin, cos)` pairs.
    pub fn angular_l1(&mut self, sc: Var, offsets: Vec<T>, targets: Vec<T>, weights: Vec<T>) -> Var {
        let x = self.value(sc);
        assert_eq!(x.cols, 2);
        let mut total = T::zero();
        for i in 0..x.rows {
            let d = angular_residual(x.at(i, 0), x.at(i, 1), offsets[i], targets[i]);
            total += weights[i] * d.abs();
        }
        self.push(
            Tensor::scalar(total),
            Op::AngularL1 {
                sc,
                offsets,
                targets,
                weights,
            },
        )
    }

    /// Description of the first node holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.is_finite() {
                None
            } else {
                Some(match &n.label {
                    Some(l) => format!("{l} ({} #{i})", n.op.name()),
                    None => format!("{} #{i}", n.op.name()),
                })
            }
        })
    }

    /// Reverse pass from a `1×1` loss. Parameters never touched get `None`.
    pub fn backward(self, loss: Var, n_params: usize) -> Result<Gradients<T>> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        if !self.value(loss).data[0].is_finite() {
            let tensor = self
                .first_non_finite()
                .unwrap_or_else(|| "loss".to_string());
            return Err(EonError::NonFinite { tensor });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut out = Gradients {
            by_param: (0..n_params).map(|_| None).collect(),
        };
        let nodes = self.nodes;

        fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => match &mut out.by_param[id.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, w) => {
                    let ga = matmul_nt(&g, &nodes[w.0].value);
                    let gw = matmul_tn(&nodes[a.0].value, &g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *w, gw);
                }
                Op::AddBias(a, b) => {
                    let n = g.cols;
                    let mut gb = Tensor::zeros(1, n);
                    for row in g.data.chunks(n.max(1)) {
                        for (o, v) in gb.data.iter_mut().zip(row) {
                            *o += *v;
                        }
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let mut gb = g.clone();
                    gb.scale(-T::one());
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    for (gv, y) in ga.data.iter_mut().zip(&node.value.data) {
                        if !(*y > T::zero()) {
                            *gv = T::zero();
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.scale(*s);
                    acc(&mut grads, *a, ga);
                }
                Op::MulConst(a, c) => {
                    let mut ga = g;
                    for (gv, cv) in ga.data.iter_mut().zip(&c.data) {
                        *gv *= *cv;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MulRow(a, r) => {
                    let row = &nodes[r.0].value;
                    let x = &nodes[a.0].value;
                    let n = row.cols;
                    let mut gr = Tensor::zeros(1, n);
                    let mut ga = g.clone();
                    for (i, chunk) in ga.data.chunks_mut(n.max(1)).enumerate() {
                        for j in 0..n {
                            gr.data[j] += chunk[j] * x.data[i * n + j];
                            chunk[j] *= row.data[j];
                        }
                    }
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let mut ga = g;
                    for (gv, y) in ga.data.iter_mut().zip(&node.value.data) {
                        *gv *= *y;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(a, idx_map) => {
                    let src = &nodes[a.0].value;
                    let n = src.cols;
                    let mut ga = Tensor::zeros(src.rows, n);
                    for (i, &r) in idx_map.iter().enumerate() {
                        let grow = &g.data[i * n..(i + 1) * n];
                        for (o, v) in ga.data[r * n..(r + 1) * n].iter_mut().zip(grow) {
                            *o += *v;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SegmentMax(a, arg) => {
                    let src = &nodes[a.0].value;
                    let n = src.cols;
                    let mut ga = Tensor::zeros(src.rows, n);
                    for (e, &r) in arg.iter().enumerate() {
                        if r != usize::MAX {
                            ga.data[r * n + e % n] += g.data[e];
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let na = nodes[a.0].value.cols;
                    let nb = nodes[b.0].value.cols;
                    let rows = g.rows;
                    let mut ga = Tensor::zeros(rows, na);
                    let mut gb = Tensor::zeros(rows, nb);
                    for i in 0..rows {
                        let grow = g.row(i);
                        ga.row_mut(i).copy_from_slice(&grow[..na]);
                        gb.row_mut(i).copy_from_slice(&grow[na..]);
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::SliceCols(a, start) => {
                    let src = &nodes[a.0].value;
                    let mut ga = Tensor::zeros(src.rows, src.cols);
                    for i in 0..src.rows {
                        ga.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let src = &nodes[a.0].value;
                    acc(&mut grads, *a, Tensor::from_vec(src.rows, src.cols, g.data));
                }
                Op::RotateXY(a, rot) => {
                    let mut ga = g;
                    for (i, (c, s)) in rot.iter().enumerate() {
                        let row = ga.row_mut(i);
                        let (gx, gy) = (row[0], row[1]);
                        row[0] = *c * gx + *s * gy;
                        row[1] = -*s * gx + *c * gy;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let src = &nodes[a.0].value;
                    let gv = g.data[0];
                    acc(&mut grads, *a, Tensor::from_vec(src.rows, src.cols, vec![gv; src.len()]));
                }
                Op::WeightedSum(terms) => {
                    let gv = g.data[0];
                    for (v, c) in terms {
                        acc(&mut grads, *v, Tensor::scalar(gv * *c));
                    }
                }
                Op::L1 {
                    input,
                    target,
                    weight,
                } => {
                    let x = &nodes[input.0].value;
                    let gv = g.data[0];
                    let data = x
                        .data
                        .iter()
                        .zip(&target.data)
                        .zip(&weight.data)
                        .map(|((a, t), w)| gv * *w * sign(*a - *t))
                        .collect();
                    acc(&mut grads, *input, Tensor::from_vec(x.rows, x.cols, data));
                }
                Op::SoftmaxCe {
                    logits,
                    probs,
                    targets,
                    weights,
                } => {
                    let gv = g.data[0];
                    let k = probs.cols;
                    let mut gl = probs.clone();
                    for i in 0..probs.rows {
                        let w = weights[i] * gv;
                        let row = gl.row_mut(i);
                        if weights[i] == T::zero() {
                            row.fill(T::zero());
                            continue;
                        }
                        row[targets[i]] -= T::one();
                        for v in row.iter_mut().take(k) {
                            *v *= w;
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::BceLogits {
                    logits,
                    targets,
                    weights,
                } => {
                    let x = &nodes[logits.0].value;
                    let gv = g.data[0];
                    let data = x
                        .data
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((z, t), w)| gv * *w * (sigmoid(*z) - *t))
                        .collect();
                    acc(&mut grads, *logits, Tensor::from_vec(x.rows, 1, data));
                }
                Op::AngularL1 {
                    sc,
                    offsets,
                    targets,
                    weights,
                } => {
                    let x = &nodes[sc.0].value;
                    let gv = g.data[0];
                    let mut gsc = Tensor::zeros(x.rows, 2);
                    for i in 0..x.rows {
                        let (s, c) = (x.at(i, 0), x.at(i, 1));
                        let r2 = s * s + c * c;
                        if r2 == T::zero() || weights[i] == T::zero() {
                            continue;
                        }
                        let d = angular_residual(s, c, offsets[i], targets[i]);
                        let k = gv * weights[i] * sign(d);
                        gsc.data[2 * i] = k * c / r2;
                        gsc.data[2 * i + 1] = -k * s / r2;
                    }
                    acc(&mut grads, *sc, gsc);
                }
            }
        }
        Ok(out)
    }
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `atan2` with the degenerate `(0, 0)` input mapped to angle zero.
pub fn safe_atan2<T: Real>(s: T, c: T) -> T {
    if s == T::zero() && c == T::zero() {
        T::zero()
    } else {
        s.atan2(c)
    }
}

pub fn wrap_real<T: Real>(x: T) -> T {
    let pi = T::of(std::f64::consts::PI);
    let two_pi = pi + pi;
    let mut w = x - two_pi * ((x + pi) / two_pi).floor();
    if w >= pi {
        w -= two_pi;
    }
    if w < -pi {
        w += two_pi;
    }
    w
}

fn angular_residual<T: Real>(s: T, c: T, offset: T, target: T) -> T {
    wrap_real(safe_atan2(s, c) + offset - target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff_check<F>(n_inputs: usize, build: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut base = Vec::new();
        for i in 0..n_inputs {
            let data: Vec<f64> = (0..6).map(|j| ((i * 7 + j * 3) % 11) as f64 * 0.17 - 0.8).collect();
            base.push(Tensor::from_vec(2, 3, data));
        }
        let eval = |inputs: &[Tensor<f64>]| -> (f64, Option<Gradients<f64>>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| tape.param(ParamId(i), t, "x"))
                .collect();
            let loss = build(&mut tape, &vars);
            let v = tape.value(loss).data[0];
            (v, tape.backward(loss, n_inputs).ok())
        };
        let (_, grads) = eval(&base);
        let grads = grads.unwrap();
        let h = 1e-6;
        for p in 0..n_inputs {
            for e in 0..base[p].len() {
                let mut plus = base.clone();
                plus[p].data[e] += h;
                let mut minus = base.clone();
                minus[p].data[e] -= h;
                let num = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let ana = grads.by_param[p].as_ref().map(|g| g.data[e]).unwrap_or(0.0);
                assert!((num - ana).abs() < 1e-6 * (1.0 + num.abs()), "param {p} elem {e}: {num} vs {ana}");
            }
        }
    }

    #[test]
    fn elementwise_ops_gradients() {
        finite_diff_check(2, |t, v| {
            let a = t.add(v[0], v[1]);
            let b = t.sub(a, v[1]);
            let c = t.exp(b);
            let d = t.scale(c, 0.3);
            let e = t.mul_const(d, Tensor::from_vec(2, 3, vec![1.0, 2.0, -1.0, 0.5, 3.0, 1.5]));
            let f = t.relu(e);
            let g = t.concat_cols(f, v[1]);
            let h = t.slice_cols(g, 1, 4);
            t.sum_all(h)
        });
    }

    #[test]
    fn matmul_gather_max_gradients() {
        finite_diff_check(2, |t, v| {
            let w = t.reshape(v[1], 3, 2);
            let m = t.matmul(v[0], w);
            let g = t.gather(m, vec![1, 0, 1]);
            let s = t.segment_max(g, &[vec![0, 1], vec![2], vec![]]);
            let b = t.slice_cols(v[0], 0, 2);
            let b0 = t.gather(b, vec![0]);
            let sb = t.add_bias(s, b0);
            let r = t.rotate_xy(sb, vec![(0.6, 0.8), (0.0, 1.0), (-1.0, 0.0)]);
            let r2 = t.gather(v[0], vec![1]);
            let mr = t.mul_row(v[0], r2);
            let a = t.sum_all(r);
            let bsum = t.sum_all(mr);
            t.weighted_sum(vec![(a, 1.0), (bsum, -0.5)])
        });
    }

    #[test]
    fn loss_ops_gradients() {
        finite_diff_check(1, |t, v| {
            let l1 = t.l1_loss(
                v[0],
                Tensor::from_vec(2, 3, vec![0.05, 0.1, -0.2, 0.33, 0.0, 0.9]),
                Tensor::from_vec(2, 3, vec![1.0, 0.5, 2.0, 1.0, 1.0, 0.0]),
            );
            let ce = t.softmax_ce(v[0], vec![2, 0], vec![1.0, 0.7]);
            let col = t.slice_cols(v[0], 1, 1);
            let bce = t.bce_logits(col, vec![1.0, 0.0], vec![0.4, 1.3]);
            let sc = t.slice_cols(v[0], 0, 2);
            let ang = t.angular_l1(sc, vec![0.3, -1.2], vec![2.0, 0.4], vec![1.0, 2.0]);
            t.weighted_sum(vec![(l1, 1.0), (ce, 0.5), (bce, 2.0), (ang, 0.7)])
        });
    }

    #[test]
    fn segment_max_empty_is_zero_and_ties_pick_first() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_vec(3, 1, vec![2.0, 2.0, -1.0]));
        let m = t.segment_max(x, &[vec![0, 1], vec![], vec![2]]);
        assert_eq!(t.value(m).data, vec![2.0, 0.0, -1.0]);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut t = Tape::<f64>::new();
        let x = t.param(ParamId(0), &Tensor::scalar(1000.0), "big");
        let e = t.exp(x);
        let l = t.sum_all(e);
        match t.backward(l, 1) {
            Err(EonError::NonFinite { tensor }) => assert!(tensor.contains("exp"), "{tensor}"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn doubling_loss_doubles_gradients() {
        let w = Tensor::from_vec(2, 2, vec![0.3, -0.1, 0.7, 0.2]);
        let run = |scale: f64| {
            let mut t = Tape::<f64>::new();
            let x = t.constant(Tensor::from_vec(1, 2, vec![1.0, -2.0]));
            let wv = t.param(ParamId(0), &w, "w");
            let y = t.matmul(x, wv);
            let r = t.relu(y);
            let s = t.sum_all(r);
            let l = t.scale(s, scale);
            t.backward(l, 1).unwrap().by_param[0].clone().unwrap()
        };
        let g1 = run(1.0);
        let g2 = run(2.0);
        for (a, b) in g1.data.iter().zip(&g2.data) {
            assert_eq!(2.0 * a, *b);
        }
    }
}
