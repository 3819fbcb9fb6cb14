//! Tape-based reverse-mode differentiation over dense [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value and whatever
//! it needs for the reverse sweep. [`Tape::backward`] walks the nodes in
//! reverse order, so a node's inputs are always visited after it.
//!
//! Leaves come in two flavours: parameters ([`Tape::param`]) accumulate
//! gradients across backward calls, constants ([`Tape::constant`]) never do.
//! Subgraphs built purely from constants are not differentiated at all.

use rand::Rng;

use super::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};
use crate::error::{Result, TkgError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train mode samples stochastic slopes; eval mode is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Cosine similarity is defined as 0 when either norm falls below this.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;
/// Probabilities are clipped to `[BCE_CLIP, 1 - BCE_CLIP]` before logs.
pub const BCE_CLIP: f64 = 1e-12;
const STD_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    /// Piecewise-linear activation; stores the slope applied to each entry.
    Leaky(Var, Vec<f64>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    MulCol(Var, Var),
    RowSum(Var),
    Sum(Var),
    SegmentPna {
        x: Var,
        segments: Vec<usize>,
        counts: Vec<usize>,
        argmax: Vec<usize>,
        argmin: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<usize>,
        counts: Vec<usize>,
    },
    SegmentSoftmax(Var, Vec<usize>),
    Conv {
        subject: Var,
        relation: Var,
        kernel: Var,
        bias: Var,
        width: usize,
    },
    Bce(Var, Vec<f64>),
    RowCosine(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient for parameter leaves.
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TkgError::shape(format!(
            "{what}: expected a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TkgError::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_segments(segments: &[usize], rows: usize, num_segments: usize) -> Result<()> {
    if segments.len() != rows {
        return Err(TkgError::shape(format!(
            "{} segment ids for {rows} rows",
            segments.len()
        )));
    }
    if let Some(&bad) = segments.iter().find(|&&s| s >= num_segments) {
        return Err(TkgError::shape(format!(
            "segment id {bad} out of range {num_segments}"
        )));
    }
    Ok(())
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: impl IntoIterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drops every recorded node so the tape can host a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a parameter leaf; `None` for constants and
    /// intermediate values.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        let grad = Some(Tensor::zeros(value.shape()));
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = matrix_dims(self.value(a), "matmul lhs")?;
        let (k2, p) = matrix_dims(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(TkgError::shape(format!(
                "matmul inner dimensions {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; n * p];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, p);
        Ok(self.push(Tensor::new(vec![n, p], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [n×k]`, `b: [p×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = matrix_dims(self.value(a), "matmul_bt lhs")?;
        let (p, k2) = matrix_dims(self.value(b), "matmul_bt rhs")?;
        if k != k2 {
            return Err(TkgError::shape(format!(
                "matmul_bt inner dimensions {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; n * p];
        gemm_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, p);
        Ok(self.push(Tensor::new(vec![n, p], out)?, Op::MatMulBt(a, b), &[a, b]))
    }

    // ----- elementwise ----------------------------------------------------

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`d` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(row).len() != cols {
            return Err(TkgError::shape(format!(
                "add_row: bias of {} values for {cols} columns",
                self.value(row).len()
            )));
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(x).clone();
        for chunk in t.data_mut().chunks_mut(cols.max(1)) {
            add_into(chunk, r.iter().copied());
        }
        Ok(self.push(t, Op::AddRow(x, row), &[x, row]))
    }

    /// `scale · x + shift`, entrywise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = scale * *v + shift);
        self.push(t, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.push(t, Op::Tanh(x), &[x])
    }

    /// Randomized leaky rectifier. Negative entries are scaled by a slope
    /// drawn from `U[lower, upper]` in train mode, or by the midpoint in
    /// eval mode.
    pub fn rrelu<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        mode: Mode,
        lower: f64,
        upper: f64,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0 < lower && lower <= upper && upper < 1.0) {
            return Err(TkgError::contract(format!(
                "rrelu bounds must satisfy 0 < lower <= upper < 1, got [{lower}, {upper}]"
            )));
        }
        let mid = 0.5 * (lower + upper);
        let mut t = self.value(x).clone();
        let mut slopes = Vec::with_capacity(t.len());
        for v in t.data_mut() {
            let slope = if *v >= 0.0 {
                1.0
            } else {
                match mode {
                    Mode::Eval => mid,
                    Mode::Train if lower == upper => lower,
                    Mode::Train => rng.gen_range(lower..upper),
                }
            };
            *v *= slope;
            slopes.push(slope);
        }
        Ok(self.push(t, Op::Leaky(x, slopes), &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if c == 0 {
            return Err(TkgError::shape("softmax over zero columns"));
        }
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(t, Op::SoftmaxRows(x), &[x]))
    }

    /// Per-row standardization with population variance, then `gain ⊗ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, d) = matrix_dims(self.value(x), "layer_norm")?;
        if d == 0 {
            return Err(TkgError::shape("layer_norm over zero columns"));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(TkgError::shape("layer_norm gain/bias length mismatch"));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    // ----- structural -----------------------------------------------------

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != tb.rank() || ta.rank() == 0 || ta.rank() > 2 {
            return Err(TkgError::shape(format!(
                "concat: incompatible shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        if ta.rank() == 2 && ta.shape()[0] != tb.shape()[0] {
            return Err(TkgError::shape(format!(
                "concat: leading dimensions {} vs {}",
                ta.shape()[0],
                tb.shape()[0]
            )));
        }
        let (c1, c2) = (ta.cols(), tb.cols());
        let rows = if ta.rank() == 2 { ta.shape()[0] } else { 1 };
        let mut data = Vec::with_capacity(rows * (c1 + c2));
        for i in 0..rows {
            data.extend_from_slice(&ta.data()[i * c1..(i + 1) * c1]);
            data.extend_from_slice(&tb.data()[i * c2..(i + 1) * c2]);
        }
        let shape = if ta.rank() == 2 {
            vec![rows, c1 + c2]
        } else {
            vec![c1 + c2]
        };
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Stacks the rows of `b` beneath the rows of `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n1, c1) = matrix_dims(self.value(a), "concat_rows")?;
        let (n2, c2) = matrix_dims(self.value(b), "concat_rows")?;
        if c1 != c2 {
            return Err(TkgError::shape(format!("concat_rows: {c1} vs {c2} columns")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::new(vec![n1 + n2, c1], data)?;
        Ok(self.push(t, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Selects rows of `x` (a vector counts as one row); indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let (rows, d) = (src.rows(), src.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TkgError::shape(format!("gather index {bad} out of {rows} rows")));
        }
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            data.extend_from_slice(&src.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![index.len(), d], data)?;
        Ok(self.push(t, Op::Gather(x, index.to_vec()), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = matrix_dims(self.value(x), "slice_cols")?;
        if start + len > d {
            return Err(TkgError::shape(format!(
                "slice_cols {start}..{} of {d} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&src[i * d + start..i * d + start + len]);
        }
        let t = Tensor::new(vec![n, len], data)?;
        Ok(self.push(t, Op::SliceCols(x, start), &[x]))
    }

    /// Scales row `i` of `x` by `w[i]`.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, d) = matrix_dims(self.value(x), "mul_col")?;
        if self.value(w).len() != n {
            return Err(TkgError::shape(format!(
                "mul_col: {} weights for {n} rows",
                self.value(w).len()
            )));
        }
        let wv = self.value(w).data().to_vec();
        let mut t = self.value(x).clone();
        for (row, s) in t.data_mut().chunks_mut(d.max(1)).zip(wv) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(t, Op::MulCol(x, w), &[x, w]))
    }

    /// `[n×d] → [n]` row sums.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (n, d) = matrix_dims(self.value(x), "row_sum")?;
        let src = self.value(x).data();
        let data = (0..n).map(|i| src[i * d..(i + 1) * d].iter().sum()).collect();
        let t = Tensor::new(vec![n], data)?;
        Ok(self.push(t, Op::RowSum(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(TkgError::contract("mean of an empty tensor"));
        }
        let s = self.sum(x);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    // ----- segment reductions ----------------------------------------------

    /// Principal-neighbourhood statistics per segment: `[mean | max | min | std]`
    /// concatenated into `[num_segments × 4d]`. Standard deviation is the
    /// population one. Empty segments produce zeros.
    pub fn segment_pna(&mut self, x: Var, segments: &[usize], num_segments: usize) -> Result<Var> {
        let (m, d) = matrix_dims(self.value(x), "segment_pna")?;
        check_segments(segments, m, num_segments)?;
        let src = self.value(x).data();
        let mut counts = vec![0usize; num_segments];
        let mut sum = vec![0.0; num_segments * d];
        let mut argmax = vec![usize::MAX; num_segments * d];
        let mut argmin = vec![usize::MAX; num_segments * d];
        for (i, &s) in segments.iter().enumerate() {
            counts[s] += 1;
            for j in 0..d {
                let v = src[i * d + j];
                sum[s * d + j] += v;
                let am = &mut argmax[s * d + j];
                if *am == usize::MAX || v > src[*am * d + j] {
                    *am = i;
                }
                let an = &mut argmin[s * d + j];
                if *an == usize::MAX || v < src[*an * d + j] {
                    *an = i;
                }
            }
        }
        let mut mean = vec![0.0; num_segments * d];
        for s in 0..num_segments {
            if counts[s] > 0 {
                for j in 0..d {
                    mean[s * d + j] = sum[s * d + j] / counts[s] as f64;
                }
            }
        }
        let mut sq = vec![0.0; num_segments * d];
        for (i, &s) in segments.iter().enumerate() {
            for j in 0..d {
                sq[s * d + j] += (src[i * d + j] - mean[s * d + j]).powi(2);
            }
        }
        let mut out = vec![0.0; num_segments * 4 * d];
        for s in 0..num_segments {
            if counts[s] == 0 {
                continue;
            }
            let row = &mut out[s * 4 * d..(s + 1) * 4 * d];
            for j in 0..d {
                row[j] = mean[s * d + j];
                row[d + j] = src[argmax[s * d + j] * d + j];
                row[2 * d + j] = src[argmin[s * d + j] * d + j];
                row[3 * d + j] = (sq[s * d + j] / counts[s] as f64).sqrt();
            }
        }
        let t = Tensor::new(vec![num_segments, 4 * d], out)?;
        Ok(self.push(
            t,
            Op::SegmentPna {
                x,
                segments: segments.to_vec(),
                counts,
                argmax,
                argmin,
            },
            &[x],
        ))
    }

    /// Arithmetic mean of the rows in each segment; empty segments are zero.
    pub fn segment_mean(&mut self, x: Var, segments: &[usize], num_segments: usize) -> Result<Var> {
        let (m, d) = matrix_dims(self.value(x), "segment_mean")?;
        check_segments(segments, m, num_segments)?;
        let src = self.value(x).data();
        let mut counts = vec![0usize; num_segments];
        let mut out = vec![0.0; num_segments * d];
        for (i, &s) in segments.iter().enumerate() {
            counts[s] += 1;
            add_into(&mut out[s * d..(s + 1) * d], src[i * d..(i + 1) * d].iter().copied());
        }
        for s in 0..num_segments {
            if counts[s] > 1 {
                let inv = 1.0 / counts[s] as f64;
                out[s * d..(s + 1) * d].iter_mut().for_each(|v| *v *= inv);
            }
        }
        let t = Tensor::new(vec![num_segments, d], out)?;
        Ok(self.push(
            t,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
                counts,
            },
            &[x],
        ))
    }

    /// Softmax of a score vector within each segment.
    pub fn segment_softmax(&mut self, x: Var, segments: &[usize], num_segments: usize) -> Result<Var> {
        let m = self.value(x).len();
        check_segments(segments, m, num_segments)?;
        let src = self.value(x).data();
        let mut max = vec![f64::NEG_INFINITY; num_segments];
        for (i, &s) in segments.iter().enumerate() {
            max[s] = max[s].max(src[i]);
        }
        let mut out: Vec<f64> = segments
            .iter()
            .enumerate()
            .map(|(i, &s)| (src[i] - max[s]).exp())
            .collect();
        let mut total = vec![0.0; num_segments];
        for (i, &s) in segments.iter().enumerate() {
            total[s] += out[i];
        }
        for (i, &s) in segments.iter().enumerate() {
            out[i] /= total[s];
        }
        let t = Tensor::new(vec![m], out)?;
        Ok(self.push(t, Op::SegmentSoftmax(x, segments.to_vec()), &[x]))
    }

    // ----- model-specific fused ops ---------------------------------------

    /// Same-length 1-D convolution over the two-row signal `[subject; relation]`.
    ///
    /// `subject`, `relation`: `[q×d]`; `kernel`: `[c × 2w]` (first `w` taps
    /// read the subject row, the next `w` the relation row); `bias`: `[c]`.
    /// Output is `[q × c·d]` with channel-major layout.
    pub fn conv_pair(&mut self, subject: Var, relation: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (q, d) = matrix_dims(self.value(subject), "conv subject")?;
        same_shape(self.value(subject), self.value(relation), "conv inputs")?;
        let (c, w2) = matrix_dims(self.value(kernel), "conv kernel")?;
        if w2 % 2 != 0 || (w2 / 2) % 2 == 0 {
            return Err(TkgError::shape(format!("conv kernel width {} must be odd", w2 / 2)));
        }
        if self.value(bias).len() != c {
            return Err(TkgError::shape("conv bias length mismatch"));
        }
        let w = w2 / 2;
        let pad = w / 2;
        let (sv, rv, kv, bv) = (
            self.value(subject).data(),
            self.value(relation).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let mut out = vec![0.0; q * c * d];
        for qi in 0..q {
            let srow = &sv[qi * d..(qi + 1) * d];
            let rrow = &rv[qi * d..(qi + 1) * d];
            for ch in 0..c {
                let taps = &kv[ch * w2..(ch + 1) * w2];
                let orow = &mut out[(qi * c + ch) * d..(qi * c + ch + 1) * d];
                for (i, o) in orow.iter_mut().enumerate() {
                    let mut acc = bv[ch];
                    for j in 0..w {
                        let pos = i + j;
                        if pos < pad || pos - pad >= d {
                            continue;
                        }
                        acc += taps[j] * srow[pos - pad] + taps[w + j] * rrow[pos - pad];
                    }
                    *o = acc;
                }
            }
        }
        let t = Tensor::new(vec![q, c * d], out)?;
        Ok(self.push(
            t,
            Op::Conv {
                subject,
                relation,
                kernel,
                bias,
                width: w,
            },
            &[subject, relation, kernel, bias],
        ))
    }

    /// `−Σ [y log p + (1−y) log(1−p)]` over all entries, with `p` clipped
    /// to `[BCE_CLIP, 1−BCE_CLIP]`.
    pub fn bce_sum(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        if self.value(p).len() != targets.len() {
            return Err(TkgError::shape(format!(
                "bce: {} targets for {} scores",
                targets.len(),
                self.value(p).len()
            )));
        }
        let loss = self
            .value(p)
            .data()
            .iter()
            .zip(targets)
            .map(|(&pv, &y)| {
                let pc = pv.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        Ok(self.push(Tensor::scalar(loss), Op::Bce(p, targets.to_vec()), &[p]))
    }

    /// Row-wise cosine similarity `[n×d] × [n×d] → [n]`, guarded to 0 when a
    /// norm is below [`COSINE_NORM_FLOOR`].
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "row_cosine")?;
        let (n, d) = matrix_dims(self.value(a), "row_cosine")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = (0..n)
            .map(|i| {
                let (x, y) = (&av[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d]);
                let (nx, ny) = (norm(x), norm(y));
                if nx < COSINE_NORM_FLOOR || ny < COSINE_NORM_FLOOR {
                    0.0
                } else {
                    dot(x, y) / (nx * ny)
                }
            })
            .collect();
        let t = Tensor::new(vec![n], data)?;
        Ok(self.push(t, Op::RowCosine(a, b), &[a, b]))
    }

    // ----- reverse sweep --------------------------------------------------

    /// Back-propagates from a scalar objective. Parameter leaves accumulate
    /// into their stored gradients, so two calls add up.
    pub fn backward(&mut self, objective: Var) -> Result<()> {
        if self.value(objective).len() != 1 {
            return Err(TkgError::contract(format!(
                "backward needs a scalar objective, got shape {:?}",
                self.value(objective).shape()
            )));
        }
        if !self.nodes[objective.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=objective.0).map(|_| None).collect();
        grads[objective.0] = Some(vec![1.0]);
        for i in (0..=objective.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if let Some(acc) = self.nodes[i].grad.as_mut() {
                add_into(acc.data_mut(), g.iter().copied());
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Returns the accumulator for `v`, allocating zeros on first use.
        fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (n, k, p) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    gemm_bt_acc(g, tb.data(), slot(grads, nodes, *a), n, p, k);
                }
                if wants(*b) {
                    gemm_at_acc(ta.data(), g, slot(grads, nodes, *b), n, k, p);
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (n, k, p) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if wants(*a) {
                    gemm_acc(g, tb.data(), slot(grads, nodes, *a), n, p, k);
                }
                if wants(*b) {
                    gemm_at_acc(g, ta.data(), slot(grads, nodes, *b), n, p, k);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(slot(grads, nodes, *a), g.iter().copied());
                }
                if wants(*b) {
                    add_into(slot(grads, nodes, *b), g.iter().copied());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(slot(grads, nodes, *a), g.iter().copied());
                }
                if wants(*b) {
                    add_into(slot(grads, nodes, *b), g.iter().map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    add_into(slot(grads, nodes, *a), g.iter().zip(tb.data()).map(|(x, y)| x * y));
                }
                if wants(*b) {
                    add_into(slot(grads, nodes, *b), g.iter().zip(ta.data()).map(|(x, y)| x * y));
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    add_into(slot(grads, nodes, *x), g.iter().copied());
                }
                if wants(*row) {
                    let d = out.cols().max(1);
                    let acc = slot(grads, nodes, *row);
                    for chunk in g.chunks(d) {
                        add_into(acc, chunk.iter().copied());
                    }
                }
            }
            Op::Affine(x, s) => {
                add_into(slot(grads, nodes, *x), g.iter().map(|v| v * s));
            }
            Op::Sigmoid(x) => {
                add_into(
                    slot(grads, nodes, *x),
                    g.iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)),
                );
            }
            Op::Tanh(x) => {
                add_into(
                    slot(grads, nodes, *x),
                    g.iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)),
                );
            }
            Op::Leaky(x, slopes) => {
                add_into(slot(grads, nodes, *x), g.iter().zip(slopes).map(|(gv, s)| gv * s));
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                let acc = slot(grads, nodes, *x);
                for ((y, gr), a) in out.data().chunks(c).zip(g.chunks(c)).zip(acc.chunks_mut(c)) {
                    let inner = dot(y, gr);
                    for j in 0..c {
                        a[j] += y[j] * (gr[j] - inner);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let n = out.rows();
                let gv = nodes[gain.0].value.data();
                if wants(*x) {
                    let acc = slot(grads, nodes, *x);
                    for r in 0..n {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dot(&dxhat, xh) / d as f64;
                        for j in 0..d {
                            acc[r * d + j] += inv_std[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
                if wants(*gain) {
                    let acc = slot(grads, nodes, *gain);
                    for r in 0..n {
                        for j in 0..d {
                            acc[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if wants(*bias) {
                    let acc = slot(grads, nodes, *bias);
                    for chunk in g.chunks(d) {
                        add_into(acc, chunk.iter().copied());
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (c1, c2) = (nodes[a.0].value.cols(), nodes[b.0].value.cols());
                let rows = nodes[a.0].value.rows();
                if wants(*a) {
                    let acc = slot(grads, nodes, *a);
                    for r in 0..rows {
                        add_into(&mut acc[r * c1..(r + 1) * c1], g[r * (c1 + c2)..r * (c1 + c2) + c1].iter().copied());
                    }
                }
                if wants(*b) {
                    let acc = slot(grads, nodes, *b);
                    for r in 0..rows {
                        add_into(
                            &mut acc[r * c2..(r + 1) * c2],
                            g[r * (c1 + c2) + c1..(r + 1) * (c1 + c2)].iter().copied(),
                        );
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let split = nodes[a.0].value.len();
                if wants(*a) {
                    add_into(slot(grads, nodes, *a), g[..split].iter().copied());
                }
                if wants(*b) {
                    add_into(slot(grads, nodes, *b), g[split..].iter().copied());
                }
            }
            Op::Gather(x, index) => {
                let d = out.cols();
                let acc = slot(grads, nodes, *x);
                for (r, &src) in index.iter().enumerate() {
                    add_into(&mut acc[src * d..(src + 1) * d], g[r * d..(r + 1) * d].iter().copied());
                }
            }
            Op::SliceCols(x, start) => {
                let d = nodes[x.0].value.cols();
                let len = out.cols();
                let acc = slot(grads, nodes, *x);
                for r in 0..out.rows() {
                    add_into(
                        &mut acc[r * d + start..r * d + start + len],
                        g[r * len..(r + 1) * len].iter().copied(),
                    );
                }
            }
            Op::MulCol(x, w) => {
                let d = out.cols().max(1);
                let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                if wants(*x) {
                    let acc = slot(grads, nodes, *x);
                    for (r, s) in tw.data().iter().enumerate() {
                        add_into(&mut acc[r * d..(r + 1) * d], g[r * d..(r + 1) * d].iter().map(|v| v * s));
                    }
                }
                if wants(*w) {
                    let acc = slot(grads, nodes, *w);
                    for (r, a) in acc.iter_mut().enumerate() {
                        *a += dot(&g[r * d..(r + 1) * d], &tx.data()[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::RowSum(x) => {
                let d = nodes[x.0].value.cols();
                let acc = slot(grads, nodes, *x);
                for (r, gv) in g.iter().enumerate() {
                    acc[r * d..(r + 1) * d].iter_mut().for_each(|a| *a += gv);
                }
            }
            Op::Sum(x) => {
                let gv = g[0];
                slot(grads, nodes, *x).iter_mut().for_each(|a| *a += gv);
            }
            Op::SegmentPna {
                x,
                segments,
                counts,
                argmax,
                argmin,
            } => {
                let tx = &nodes[x.0].value;
                let d = tx.cols();
                let src = tx.data();
                let acc = slot(grads, nodes, *x);
                for (i, &s) in segments.iter().enumerate() {
                    let cnt = counts[s] as f64;
                    let row = &g[s * 4 * d..(s + 1) * 4 * d];
                    let stats = &out.data()[s * 4 * d..(s + 1) * 4 * d];
                    for j in 0..d {
                        let mut v = row[j] / cnt;
                        if argmax[s * d + j] == i {
                            v += row[d + j];
                        }
                        if argmin[s * d + j] == i {
                            v += row[2 * d + j];
                        }
                        let std = stats[3 * d + j];
                        if std > STD_FLOOR {
                            v += row[3 * d + j] * (src[i * d + j] - stats[j]) / (cnt * std);
                        }
                        acc[i * d + j] += v;
                    }
                }
            }
            Op::SegmentMean { x, segments, counts } => {
                let d = out.cols();
                let acc = slot(grads, nodes, *x);
                for (i, &s) in segments.iter().enumerate() {
                    let inv = 1.0 / counts[s] as f64;
                    add_into(&mut acc[i * d..(i + 1) * d], g[s * d..(s + 1) * d].iter().map(|v| v * inv));
                }
            }
            Op::SegmentSoftmax(x, segments) => {
                let y = out.data();
                let num = segments.iter().copied().max().map_or(0, |m| m + 1);
                let mut inner = vec![0.0; num];
                for (i, &s) in segments.iter().enumerate() {
                    inner[s] += y[i] * g[i];
                }
                let acc = slot(grads, nodes, *x);
                for (i, &s) in segments.iter().enumerate() {
                    acc[i] += y[i] * (g[i] - inner[s]);
                }
            }
            Op::Conv {
                subject,
                relation,
                kernel,
                bias,
                width,
            } => {
                let w = *width;
                let pad = w / 2;
                let ts = &nodes[subject.0].value;
                let (q, d) = (ts.shape()[0], ts.shape()[1]);
                let kv = nodes[kernel.0].value.data();
                let c = nodes[kernel.0].value.shape()[0];
                let sv = ts.data();
                let rv = nodes[relation.0].value.data();
                let mut ds = wants(*subject).then(|| vec![0.0; q * d]);
                let mut dr = wants(*relation).then(|| vec![0.0; q * d]);
                let mut dk = wants(*kernel).then(|| vec![0.0; c * 2 * w]);
                let mut db = wants(*bias).then(|| vec![0.0; c]);
                for qi in 0..q {
                    for ch in 0..c {
                        let go = &g[(qi * c + ch) * d..(qi * c + ch + 1) * d];
                        for (i, &gv) in go.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            if let Some(db) = db.as_mut() {
                                db[ch] += gv;
                            }
                            for j in 0..w {
                                let pos = i + j;
                                if pos < pad || pos - pad >= d {
                                    continue;
                                }
                                let src = qi * d + pos - pad;
                                if let Some(ds) = ds.as_mut() {
                                    ds[src] += gv * kv[ch * 2 * w + j];
                                }
                                if let Some(dr) = dr.as_mut() {
                                    dr[src] += gv * kv[ch * 2 * w + w + j];
                                }
                                if let Some(dk) = dk.as_mut() {
                                    dk[ch * 2 * w + j] += gv * sv[src];
                                    dk[ch * 2 * w + w + j] += gv * rv[src];
                                }
                            }
                        }
                    }
                }
                for (v, buf) in [(*subject, ds), (*relation, dr), (*kernel, dk), (*bias, db)] {
                    if let Some(buf) = buf {
                        add_into(slot(grads, nodes, v), buf);
                    }
                }
            }
            Op::Bce(p, targets) => {
                let gv = g[0];
                let pv = nodes[p.0].value.data();
                let acc = slot(grads, nodes, *p);
                for ((a, &pr), &y) in acc.iter_mut().zip(pv).zip(targets) {
                    if pr > BCE_CLIP && pr < 1.0 - BCE_CLIP {
                        *a += gv * (-y / pr + (1.0 - y) / (1.0 - pr));
                    }
                }
            }
            Op::RowCosine(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let d = ta.cols();
                let n = ta.rows();
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; n * d];
                for r in 0..n {
                    let (x, y) = (&ta.data()[r * d..(r + 1) * d], &tb.data()[r * d..(r + 1) * d]);
                    let (nx, ny) = (norm(x), norm(y));
                    if nx < COSINE_NORM_FLOOR || ny < COSINE_NORM_FLOOR {
                        continue;
                    }
                    let cos = out.data()[r];
                    for j in 0..d {
                        da[r * d + j] = g[r] * (y[j] / (nx * ny) - cos * x[j] / (nx * nx));
                        db[r * d + j] = g[r] * (x[j] / (nx * ny) - cos * y[j] / (ny * ny));
                    }
                }
                if wants(*a) {
                    add_into(slot(grads, nodes, *a), da);
                }
                if wants(*b) {
                    add_into(slot(grads, nodes, *b), db);
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
