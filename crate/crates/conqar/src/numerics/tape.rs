//! Reverse-mode autodiff on a gradient tape.
//!
//! Every differentiable operation is a method on [`Tape`]. The method
//! validates shapes, computes the forward value eagerly, and — when any
//! input requires gradients — records the operation. [`Tape::backward`]
//! replays the records in reverse, accumulating vector-Jacobian products
//! into the leaves.
//!
//! Backward rules follow a strict discipline: compute every input gradient
//! into a fresh `Vec` using only immutable borrows, then accumulate them
//! one tensor at a time. This keeps `RefCell` happy even when an operation
//! is applied to the same tensor twice (e.g. `mul(x, x)`).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Pointwise nonlinearity selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            // alpha = 1; exp_m1 keeps precision near zero and exp is only
            // evaluated on the non-positive branch, so it cannot overflow.
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::Elu => write!(f, "elu"),
            Activation::Identity => write!(f, "identity"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Activation> {
        match s {
            "relu" => Ok(Activation::Relu),
            "elu" => Ok(Activation::Elu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!(
                "unknown activation {:?} (expected relu, elu or identity)",
                other
            ))),
        }
    }
}

/// One recorded operation. Holds handles to operands and output plus
/// whatever forward-pass state the reverse rule needs.
enum Op {
    Matmul { a: Tensor, b: Tensor, out: Tensor },
    Transpose { x: Tensor, out: Tensor },
    MatVec { m: Tensor, v: Tensor, out: Tensor },
    VecMat { v: Tensor, m: Tensor, out: Tensor },
    Add { a: Tensor, b: Tensor, out: Tensor },
    Sub { a: Tensor, b: Tensor, out: Tensor },
    Mul { a: Tensor, b: Tensor, out: Tensor },
    Scale { x: Tensor, factor: f64, out: Tensor },
    AddScalar { x: Tensor, out: Tensor },
    Activation { x: Tensor, kind: Activation, out: Tensor },
    Softmax { x: Tensor, out: Tensor },
    /// `norms[j]` is the pre-normalization L2 norm of column j; columns with
    /// `norms[j] < eps` were zeroed and get zero gradient.
    L2NormCols { x: Tensor, out: Tensor, norms: Vec<f64>, eps: f64 },
    ScaleCols { x: Tensor, w: Tensor, out: Tensor },
    /// Embedding gather. `pad_id` columns are structural zeros: the table is
    /// never read for them and no gradient flows back.
    Embed { table: Tensor, ids: Vec<usize>, pad_id: usize, out: Tensor },
    Conv1d { x: Tensor, w: Tensor, b: Tensor, out: Tensor },
    Trace { x: Tensor, out: Tensor },
    Diag { x: Tensor, out: Tensor },
    RowMeans { x: Tensor, out: Tensor },
    ColMeans { x: Tensor, out: Tensor },
    RowMaxes { x: Tensor, arg: Vec<usize>, out: Tensor },
    ColMaxes { x: Tensor, arg: Vec<usize>, out: Tensor },
    Concat { parts: Vec<Tensor>, out: Tensor },
    ConcatRows { parts: Vec<Tensor>, out: Tensor },
    Mean { x: Tensor, out: Tensor },
    Dropout { x: Tensor, mask: Vec<f64>, out: Tensor },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::MatVec { .. } => "matvec",
            Op::VecMat { .. } => "vecmat",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Activation { .. } => "activation",
            Op::Softmax { .. } => "softmax",
            Op::L2NormCols { .. } => "l2_normalize",
            Op::ScaleCols { .. } => "scale_columns",
            Op::Embed { .. } => "embed",
            Op::Conv1d { .. } => "conv1d",
            Op::Trace { .. } => "trace",
            Op::Diag { .. } => "diag",
            Op::RowMeans { .. } => "row_means",
            Op::ColMeans { .. } => "col_means",
            Op::RowMaxes { .. } => "row_maxes",
            Op::ColMaxes { .. } => "col_maxes",
            Op::Concat { .. } => "concat",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Mean { .. } => "mean",
            Op::Dropout { .. } => "dropout",
        }
    }

    fn out(&self) -> &Tensor {
        match self {
            Op::Matmul { out, .. }
            | Op::Transpose { out, .. }
            | Op::MatVec { out, .. }
            | Op::VecMat { out, .. }
            | Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::AddScalar { out, .. }
            | Op::Activation { out, .. }
            | Op::Softmax { out, .. }
            | Op::L2NormCols { out, .. }
            | Op::ScaleCols { out, .. }
            | Op::Embed { out, .. }
            | Op::Conv1d { out, .. }
            | Op::Trace { out, .. }
            | Op::Diag { out, .. }
            | Op::RowMeans { out, .. }
            | Op::ColMeans { out, .. }
            | Op::RowMaxes { out, .. }
            | Op::ColMaxes { out, .. }
            | Op::Concat { out, .. }
            | Op::ConcatRows { out, .. }
            | Op::Mean { out, .. }
            | Op::Dropout { out, .. } => out,
        }
    }
}

/// Gradient tape: records operations during the forward pass, replays them
/// in reverse on [`Tape::backward`]. One tape per forward pass; call
/// [`Tape::clear`] (or drop the tape) between passes so stale records do
/// not pin old buffers.
#[derive(Default)]
pub struct Tape {
    records: Vec<Op>,
}

/// Make an output tensor for `data`/`shape`, marking it for gradients when
/// any of `inputs` requires them. Returns `(tensor, recorded)`.
fn output(shape: &[usize], data: Vec<f64>, inputs: &[&Tensor]) -> Result<(Tensor, bool)> {
    let out = Tensor::from_vec(shape, data)?;
    let needs_grad = inputs.iter().any(|t| t.requires_grad());
    if needs_grad {
        Ok((out.requiring_grad(), true))
    } else {
        Ok((out, false))
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// Drop all records (and the handles they hold).
    pub fn clear(&mut self) {
        self.records.clear();
    }

    fn record(&mut self, op: Op) {
        self.records.push(op);
    }

    /// Scan recorded outputs in execution order and report the first one
    /// containing a NaN or infinity, as `(op index, op kind)`.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.records
            .iter()
            .enumerate()
            .find(|(_, op)| !op.out().all_finite())
            .map(|(i, op)| (i, op.kind()))
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    /// Matrix product `a [m,k] x b [k,p] -> [m,p]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.dims2("matmul lhs")?;
        let (k2, p) = b.dims2("matmul rhs")?;
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul: inner dimensions disagree, lhs {:?} vs rhs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let ad = a.data();
        let bd = b.data();
        let mut data = vec![0.0; m * p];
        for i in 0..m {
            for l in 0..k {
                let ail = ad[i * k + l];
                if ail == 0.0 {
                    continue;
                }
                let brow = &bd[l * p..(l + 1) * p];
                let orow = &mut data[i * p..(i + 1) * p];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += ail * bv;
                }
            }
        }
        drop(ad);
        drop(bd);
        let (out, rec) = output(&[m, p], data, &[a, b])?;
        if rec {
            self.record(Op::Matmul { a: a.clone(), b: b.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// Matrix transpose `[r,c] -> [c,r]`.
    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2("transpose")?;
        let xd = x.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        drop(xd);
        let (out, rec) = output(&[c, r], data, &[x])?;
        if rec {
            self.record(Op::Transpose { x: x.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// Matrix-vector product `m [r,c] x v [c] -> [r]`.
    pub fn matvec(&mut self, m: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (r, c) = m.dims2("matvec lhs")?;
        let n = v.dim1("matvec rhs")?;
        if c != n {
            return Err(Error::Dim(format!(
                "matvec: matrix {:?} x vector {:?} incompatible",
                m.shape(),
                v.shape()
            )));
        }
        let md = m.data();
        let vd = v.data();
        let data: Vec<f64> = (0..r)
            .map(|i| md[i * c..(i + 1) * c].iter().zip(vd.iter()).map(|(a, b)| a * b).sum())
            .collect();
        drop(md);
        drop(vd);
        let (out, rec) = output(&[r], data, &[m, v])?;
        if rec {
            self.record(Op::MatVec { m: m.clone(), v: v.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// Vector-matrix product `v [r] x m [r,c] -> [c]`.
    pub fn vecmat(&mut self, v: &Tensor, m: &Tensor) -> Result<Tensor> {
        let n = v.dim1("vecmat lhs")?;
        let (r, c) = m.dims2("vecmat rhs")?;
        if n != r {
            return Err(Error::Dim(format!(
                "vecmat: vector {:?} x matrix {:?} incompatible",
                v.shape(),
                m.shape()
            )));
        }
        let vd = v.data();
        let md = m.data();
        let mut data = vec![0.0; c];
        for i in 0..r {
            let vi = vd[i];
            if vi == 0.0 {
                continue;
            }
            for j in 0..c {
                data[j] += vi * md[i * c + j];
            }
        }
        drop(vd);
        drop(md);
        let (out, rec) = output(&[c], data, &[v, m])?;
        if rec {
            self.record(Op::VecMat { v: v.clone(), m: m.clone(), out: out.clone() });
        }
        Ok(out)
    }

    // ------------------------------------------------------------------
    // Pointwise
    // ------------------------------------------------------------------

    fn elementwise_pair(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        op_name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        if a.shape() != b.shape() {
            return Err(Error::Dim(format!(
                "{}: shapes {:?} and {:?} differ",
                op_name,
                a.shape(),
                b.shape()
            )));
        }
        let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        output(&a.shape(), data, &[a, b])
    }

    /// Elementwise sum (same shapes).
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (out, rec) = self.elementwise_pair(a, b, "add", |x, y| x + y)?;
        if rec {
            self.record(Op::Add { a: a.clone(), b: b.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// Elementwise difference (same shapes).
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (out, rec) = self.elementwise_pair(a, b, "sub", |x, y| x - y)?;
        if rec {
            self.record(Op::Sub { a: a.clone(), b: b.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// Hadamard (elementwise) product (same shapes).
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (out, rec) = self.elementwise_pair(a, b, "mul", |x, y| x * y)?;
        if rec {
            self.record(Op::Mul { a: a.clone(), b: b.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: &Tensor, factor: f64) -> Result<Tensor> {
        let data: Vec<f64> = x.data().iter().map(|&v| v * factor).collect();
        let (out, rec) = output(&x.shape(), data, &[x])?;
        if rec {
            self.record(Op::Scale { x: x.clone(), factor, out: out.clone() });
        }
        Ok(out)
    }

    /// Add a constant to every element.
    pub fn add_scalar(&mut self, x: &Tensor, shift: f64) -> Result<Tensor> {
        let data: Vec<f64> = x.data().iter().map(|&v| v + shift).collect();
        let (out, rec) = output(&x.shape(), data, &[x])?;
        if rec {
            self.record(Op::AddScalar { x: x.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// Pointwise nonlinearity (any shape).
    pub fn activation(&mut self, x: &Tensor, kind: Activation) -> Result<Tensor> {
        let data: Vec<f64> = x.data().iter().map(|&v| kind.apply(v)).collect();
        let (out, rec) = output(&x.shape(), data, &[x])?;
        if rec {
            self.record(Op::Activation { x: x.clone(), kind, out: out.clone() });
        }
        Ok(out)
    }

    /// Numerically stable softmax over a vector (max subtraction).
    pub fn softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim1("softmax")?;
        if n == 0 {
            return Err(Error::Empty("softmax over an empty vector".into()));
        }
        let xd = x.data();
        let max = xd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xd.iter().map(|&v| (v - max).exp()).collect();
        drop(xd);
        let sum: f64 = exps.iter().sum();
        let data: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
        let (out, rec) = output(&[n], data, &[x])?;
        if rec {
            self.record(Op::Softmax { x: x.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// L2-normalize. A rank-1 tensor is treated as a single column; for a
    /// rank-2 tensor every column is normalized independently. Columns whose
    /// norm falls below `eps` become exact zeros (and receive zero gradient)
    /// instead of dividing by a vanishing norm.
    pub fn l2_normalize(&mut self, x: &Tensor, eps: f64) -> Result<Tensor> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!(
                "l2_normalize: eps must be positive, got {}",
                eps
            )));
        }
        let shape = x.shape();
        let (rows, cols) = match shape.len() {
            1 => (shape[0], 1),
            2 => (shape[0], shape[1]),
            _ => {
                return Err(Error::Dim(format!(
                    "l2_normalize: expected rank 1 or 2, got shape {:?}",
                    shape
                )))
            }
        };
        let xd = x.data();
        let mut norms = vec![0.0; cols];
        for j in 0..cols {
            let mut sq = 0.0;
            for i in 0..rows {
                let v = xd[i * cols + j];
                sq += v * v;
            }
            norms[j] = sq.sqrt();
        }
        let mut data = vec![0.0; rows * cols];
        for j in 0..cols {
            if norms[j] < eps {
                continue; // column stays zero
            }
            for i in 0..rows {
                data[i * cols + j] = xd[i * cols + j] / norms[j];
            }
        }
        drop(xd);
        let (out, rec) = output(&shape, data, &[x])?;
        if rec {
            self.record(Op::L2NormCols { x: x.clone(), out: out.clone(), norms, eps });
        }
        Ok(out)
    }

    /// Scale column `j` of `x [r,c]` by `w[j]` (`w` has length `c`).
    pub fn scale_columns(&mut self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2("scale_columns lhs")?;
        let n = w.dim1("scale_columns weights")?;
        if n != c {
            return Err(Error::Dim(format!(
                "scale_columns: matrix {:?} needs {} weights, got {:?}",
                x.shape(),
                c,
                w.shape()
            )));
        }
        let xd = x.data();
        let wd = w.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = xd[i * c + j] * wd[j];
            }
        }
        drop(xd);
        drop(wd);
        let (out, rec) = output(&[r, c], data, &[x, w])?;
        if rec {
            self.record(Op::ScaleCols { x: x.clone(), w: w.clone(), out: out.clone() });
        }
        Ok(out)
    }

    // ------------------------------------------------------------------
    // Lookup and convolution
    // ------------------------------------------------------------------

    /// Gather embedding columns: `table [d,V]`, `ids` of length `L`,
    /// output `[d,L]` with column `l = table[:, ids[l]]`.
    ///
    /// Positions whose id equals `pad_id` are structural zeros: the table
    /// column is never read and never receives gradient, so padding stays
    /// exactly zero for the lifetime of the model.
    pub fn embed(&mut self, table: &Tensor, ids: &[usize], pad_id: usize) -> Result<Tensor> {
        let (d, vocab) = table.dims2("embed table")?;
        if ids.is_empty() {
            return Err(Error::Empty("embed: no token ids".into()));
        }
        for &id in ids {
            if id >= vocab && id != pad_id {
                return Err(Error::Unknown(format!(
                    "embed: token id {} exceeds vocabulary size {}",
                    id, vocab
                )));
            }
        }
        let len = ids.len();
        let td = table.data();
        let mut data = vec![0.0; d * len];
        for (l, &id) in ids.iter().enumerate() {
            if id == pad_id {
                continue;
            }
            for r in 0..d {
                data[r * len + l] = td[r * vocab + id];
            }
        }
        drop(td);
        let (out, rec) = output(&[d, len], data, &[table])?;
        if rec {
            self.record(Op::Embed {
                table: table.clone(),
                ids: ids.to_vec(),
                pad_id,
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// 1-D convolution over the column (position) axis with SAME output
    /// length. `x [d,L]`, `w [f,d,h]`, `b [f]` -> `[f,L]`.
    ///
    /// Windows are left-aligned: output position `i` covers columns
    /// `i..i+h`, with `h-1` implicit zero columns appended on the right so
    /// every output position exists. Requires `L >= h`.
    pub fn conv1d_same(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (d, len) = x.dims2("conv1d input")?;
        let wshape = w.shape();
        if wshape.len() != 3 {
            return Err(Error::Dim(format!(
                "conv1d: weights must be rank 3 [filters, channels, width], got {:?}",
                wshape
            )));
        }
        let (f, wd, h) = (wshape[0], wshape[1], wshape[2]);
        if wd != d {
            return Err(Error::Dim(format!(
                "conv1d: input has {} channels but weights expect {}",
                d, wd
            )));
        }
        let bn = b.dim1("conv1d bias")?;
        if bn != f {
            return Err(Error::Dim(format!(
                "conv1d: {} filters but {} bias entries",
                f, bn
            )));
        }
        if h == 0 || len < h {
            return Err(Error::Dim(format!(
                "conv1d: window width {} does not fit document length {}",
                h, len
            )));
        }
        let xd = x.data();
        let wv = w.data();
        let bd = b.data();
        let mut data = vec![0.0; f * len];
        for s in 0..f {
            for i in 0..len {
                let mut acc = bd[s];
                for r in 0..d {
                    for j in 0..h {
                        if i + j < len {
                            acc += wv[s * d * h + r * h + j] * xd[r * len + i + j];
                        }
                    }
                }
                data[s * len + i] = acc;
            }
        }
        drop(xd);
        drop(wv);
        drop(bd);
        let (out, rec) = output(&[f, len], data, &[x, w, b])?;
        if rec {
            self.record(Op::Conv1d {
                x: x.clone(),
                w: w.clone(),
                b: b.clone(),
                out: out.clone(),
            });
        }
        Ok(out)
    }

    // ------------------------------------------------------------------
    // Reductions and restructuring
    // ------------------------------------------------------------------

    /// Trace of a square matrix, as a shape-`[1]` tensor.
    pub fn trace(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2("trace")?;
        if r != c {
            return Err(Error::Dim(format!(
                "trace: matrix must be square, got {:?}",
                x.shape()
            )));
        }
        let xd = x.data();
        let t: f64 = (0..r).map(|i| xd[i * c + i]).sum();
        drop(xd);
        let (out, rec) = output(&[1], vec![t], &[x])?;
        if rec {
            self.record(Op::Trace { x: x.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// Main diagonal of a square matrix, as a vector.
    pub fn diag(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2("diag")?;
        if r != c {
            return Err(Error::Dim(format!(
                "diag: matrix must be square, got {:?}",
                x.shape()
            )));
        }
        let xd = x.data();
        let data: Vec<f64> = (0..r).map(|i| xd[i * c + i]).collect();
        drop(xd);
        let (out, rec) = output(&[r], data, &[x])?;
        if rec {
            self.record(Op::Diag { x: x.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// Mean of each row of `x [r,c]` -> `[r]`.
    pub fn row_means(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2("row_means")?;
        if c == 0 {
            return Err(Error::Empty("row_means: zero columns".into()));
        }
        let xd = x.data();
        let data: Vec<f64> = (0..r)
            .map(|i| xd[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        drop(xd);
        let (out, rec) = output(&[r], data, &[x])?;
        if rec {
            self.record(Op::RowMeans { x: x.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// Mean of each column of `x [r,c]` -> `[c]`.
    pub fn col_means(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2("col_means")?;
        if r == 0 {
            return Err(Error::Empty("col_means: zero rows".into()));
        }
        let xd = x.data();
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += xd[i * c + j];
            }
        }
        for v in data.iter_mut() {
            *v /= r as f64;
        }
        drop(xd);
        let (out, rec) = output(&[c], data, &[x])?;
        if rec {
            self.record(Op::ColMeans { x: x.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// Maximum of each row of `x [r,c]` -> `[r]`. Ties go to the earliest
    /// column; the gradient flows only to the winning entry.
    pub fn row_maxes(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2("row_maxes")?;
        if c == 0 {
            return Err(Error::Empty("row_maxes: zero columns".into()));
        }
        let xd = x.data();
        let mut data = Vec::with_capacity(r);
        let mut arg = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            data.push(row[best]);
            arg.push(best);
        }
        drop(xd);
        let (out, rec) = output(&[r], data, &[x])?;
        if rec {
            self.record(Op::RowMaxes { x: x.clone(), arg, out: out.clone() });
        }
        Ok(out)
    }

    /// Maximum of each column of `x [r,c]` -> `[c]`. Ties go to the earliest
    /// row; the gradient flows only to the winning entry.
    pub fn col_maxes(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2("col_maxes")?;
        if r == 0 {
            return Err(Error::Empty("col_maxes: zero rows".into()));
        }
        let xd = x.data();
        let mut data = Vec::with_capacity(c);
        let mut arg = Vec::with_capacity(c);
        for j in 0..c {
            let mut best = 0;
            for i in 1..r {
                if xd[i * c + j] > xd[best * c + j] {
                    best = i;
                }
            }
            data.push(xd[best * c + j]);
            arg.push(best);
        }
        drop(xd);
        let (out, rec) = output(&[c], data, &[x])?;
        if rec {
            self.record(Op::ColMaxes { x: x.clone(), arg, out: out.clone() });
        }
        Ok(out)
    }

    /// Concatenate rank-1 tensors into one vector, in order.
    pub fn concat(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Empty("concat: no tensors".into()));
        }
        let mut data = Vec::new();
        for part in parts {
            part.dim1("concat")?;
            data.extend_from_slice(&part.data());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let (out, rec) = output(&[data.len()], data, &refs)?;
        if rec {
            self.record(Op::Concat { parts: parts.to_vec(), out: out.clone() });
        }
        Ok(out)
    }

    /// Stack rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows: no tensors".into()));
        }
        let (_, cols) = parts[0].dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for part in parts {
            let (r, c) = part.dims2("concat_rows")?;
            if c != cols {
                return Err(Error::Dim(format!(
                    "concat_rows: column counts differ ({} vs {})",
                    cols, c
                )));
            }
            rows += r;
            data.extend_from_slice(&part.data());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let (out, rec) = output(&[rows, cols], data, &refs)?;
        if rec {
            self.record(Op::ConcatRows { parts: parts.to_vec(), out: out.clone() });
        }
        Ok(out)
    }

    /// Mean over all elements, as a shape-`[1]` tensor.
    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = x.numel();
        if n == 0 {
            return Err(Error::Empty("mean of an empty tensor".into()));
        }
        let m = x.data().iter().sum::<f64>() / n as f64;
        let (out, rec) = output(&[1], vec![m], &[x])?;
        if rec {
            self.record(Op::Mean { x: x.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// Inverted dropout: each element is kept with probability `1 - rate`
    /// and scaled by `1/(1 - rate)`, so the expectation is unchanged.
    /// `rate == 0` is an exact no-op (nothing recorded).
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor,
        rate: f64,
        rng: &mut R,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout: rate must lie in [0, 1), got {}",
                rate
            )));
        }
        if rate == 0.0 {
            return Ok(x.clone());
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() >= rate { keep_scale } else { 0.0 })
            .collect();
        let data: Vec<f64> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let (out, rec) = output(&x.shape(), data, &[x])?;
        if rec {
            self.record(Op::Dropout { x: x.clone(), mask, out: out.clone() });
        }
        Ok(out)
    }

    // ------------------------------------------------------------------
    // Reverse sweep
    // ------------------------------------------------------------------

    /// Run the reverse sweep from `loss` (a single-element tensor), adding
    /// dL/dθ into the gradient buffer of every tensor that requires grad.
    ///
    /// Call `zero_grad` on the leaves first if the previous step's gradients
    /// should not accumulate.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Dim(format!(
                "backward: loss must be a single element, got shape {:?}",
                loss.shape()
            )));
        }
        if !loss.requires_grad() {
            return Err(Error::Dim(
                "backward: loss does not depend on any tensor that requires grad".into(),
            ));
        }
        loss.seed_grad(1.0);
        for op in self.records.iter().rev() {
            backward_op(op);
        }
        Ok(())
    }
}

/// Dispatch one reverse-mode rule. Every rule materializes the input
/// gradients as owned vectors before accumulating, so aliased operands
/// (`mul(x, x)`) never hold overlapping borrows.
fn backward_op(op: &Op) {
    let g = match op.out().grad() {
        Some(g) => g,
        None => return,
    };
    match op {
        Op::Matmul { a, b, out: _ } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let p = b.shape()[1];
            let ad = a.data();
            let bd = b.data();
            // dA = G . B^T
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for l in 0..k {
                    let mut acc = 0.0;
                    for j in 0..p {
                        acc += g[i * p + j] * bd[l * p + j];
                    }
                    da[i * k + l] = acc;
                }
            }
            // dB = A^T . G
            let mut db = vec![0.0; k * p];
            for l in 0..k {
                for j in 0..p {
                    let mut acc = 0.0;
                    for i in 0..m {
                        acc += ad[i * k + l] * g[i * p + j];
                    }
                    db[l * p + j] = acc;
                }
            }
            drop(ad);
            drop(bd);
            a.accumulate_grad(&da);
            b.accumulate_grad(&db);
        }
        Op::Transpose { x, out: _ } => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = g[j * r + i];
                }
            }
            x.accumulate_grad(&dx);
        }
        Op::MatVec { m, v, out: _ } => {
            let (r, c) = (m.shape()[0], m.shape()[1]);
            let md = m.data();
            let vd = v.data();
            let mut dm = vec![0.0; r * c];
            let mut dv = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    dm[i * c + j] = g[i] * vd[j];
                    dv[j] += g[i] * md[i * c + j];
                }
            }
            drop(md);
            drop(vd);
            m.accumulate_grad(&dm);
            v.accumulate_grad(&dv);
        }
        Op::VecMat { v, m, out: _ } => {
            let (r, c) = (m.shape()[0], m.shape()[1]);
            let vd = v.data();
            let md = m.data();
            let mut dv = vec![0.0; r];
            let mut dm = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dv[i] += g[j] * md[i * c + j];
                    dm[i * c + j] = vd[i] * g[j];
                }
            }
            drop(vd);
            drop(md);
            v.accumulate_grad(&dv);
            m.accumulate_grad(&dm);
        }
        Op::Add { a, b, out: _ } => {
            a.accumulate_grad(&g);
            b.accumulate_grad(&g);
        }
        Op::Sub { a, b, out: _ } => {
            a.accumulate_grad(&g);
            let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
            b.accumulate_grad(&neg);
        }
        Op::Mul { a, b, out: _ } => {
            let da: Vec<f64> = g.iter().zip(b.data().iter()).map(|(&gv, &bv)| gv * bv).collect();
            let db: Vec<f64> = g.iter().zip(a.data().iter()).map(|(&gv, &av)| gv * av).collect();
            a.accumulate_grad(&da);
            b.accumulate_grad(&db);
        }
        Op::Scale { x, factor, out: _ } => {
            let dx: Vec<f64> = g.iter().map(|&v| v * factor).collect();
            x.accumulate_grad(&dx);
        }
        Op::AddScalar { x, out: _ } => {
            x.accumulate_grad(&g);
        }
        Op::Activation { x, kind, out: _ } => {
            let dx: Vec<f64> = g
                .iter()
                .zip(x.data().iter())
                .map(|(&gv, &xv)| gv * kind.derivative(xv))
                .collect();
            x.accumulate_grad(&dx);
        }
        Op::Softmax { x, out } => {
            // dx = y * (g - <g, y>)
            let y = out.to_vec();
            let dot: f64 = g.iter().zip(&y).map(|(&gv, &yv)| gv * yv).sum();
            let dx: Vec<f64> = g.iter().zip(&y).map(|(&gv, &yv)| yv * (gv - dot)).collect();
            x.accumulate_grad(&dx);
        }
        Op::L2NormCols { x, out, norms, eps } => {
            let shape = x.shape();
            let (rows, cols) = if shape.len() == 1 { (shape[0], 1) } else { (shape[0], shape[1]) };
            let y = out.to_vec();
            let mut dx = vec![0.0; rows * cols];
            for j in 0..cols {
                if norms[j] < *eps {
                    continue; // zeroed column: gradient is identically zero
                }
                let mut dot = 0.0;
                for i in 0..rows {
                    dot += g[i * cols + j] * y[i * cols + j];
                }
                for i in 0..rows {
                    dx[i * cols + j] = (g[i * cols + j] - y[i * cols + j] * dot) / norms[j];
                }
            }
            x.accumulate_grad(&dx);
        }
        Op::ScaleCols { x, w, out: _ } => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let xd = x.data();
            let wd = w.data();
            let mut dx = vec![0.0; r * c];
            let mut dw = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = g[i * c + j] * wd[j];
                    dw[j] += g[i * c + j] * xd[i * c + j];
                }
            }
            drop(xd);
            drop(wd);
            x.accumulate_grad(&dx);
            w.accumulate_grad(&dw);
        }
        Op::Embed { table, ids, pad_id, out: _ } => {
            let (d, vocab) = (table.shape()[0], table.shape()[1]);
            let len = ids.len();
            let mut dt = vec![0.0; d * vocab];
            for (l, &id) in ids.iter().enumerate() {
                if id == *pad_id {
                    continue; // structural zero: no gradient to the table
                }
                for r in 0..d {
                    dt[r * vocab + id] += g[r * len + l];
                }
            }
            table.accumulate_grad(&dt);
        }
        Op::Conv1d { x, w, b, out: _ } => {
            let (d, len) = (x.shape()[0], x.shape()[1]);
            let wshape = w.shape();
            let (f, h) = (wshape[0], wshape[2]);
            let xd = x.data();
            let wv = w.data();
            let mut db = vec![0.0; f];
            let mut dw = vec![0.0; f * d * h];
            let mut dx = vec![0.0; d * len];
            for s in 0..f {
                for i in 0..len {
                    let gv = g[s * len + i];
                    if gv == 0.0 {
                        continue;
                    }
                    db[s] += gv;
                    for r in 0..d {
                        for j in 0..h {
                            if i + j < len {
                                dw[s * d * h + r * h + j] += gv * xd[r * len + i + j];
                                dx[r * len + i + j] += gv * wv[s * d * h + r * h + j];
                            }
                        }
                    }
                }
            }
            drop(xd);
            drop(wv);
            x.accumulate_grad(&dx);
            w.accumulate_grad(&dw);
            b.accumulate_grad(&db);
        }
        Op::Trace { x, out: _ } => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                dx[i * c + i] = g[0];
            }
            x.accumulate_grad(&dx);
        }
        Op::Diag { x, out: _ } => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                dx[i * c + i] = g[i];
            }
            x.accumulate_grad(&dx);
        }
        Op::RowMeans { x, out: _ } => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let inv = 1.0 / c as f64;
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = g[i] * inv;
                }
            }
            x.accumulate_grad(&dx);
        }
        Op::ColMeans { x, out: _ } => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let inv = 1.0 / r as f64;
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = g[j] * inv;
                }
            }
            x.accumulate_grad(&dx);
        }
        Op::RowMaxes { x, arg, out: _ } => {
            let c = x.shape()[1];
            let mut dx = vec![0.0; x.numel()];
            for (i, &j) in arg.iter().enumerate() {
                dx[i * c + j] = g[i];
            }
            x.accumulate_grad(&dx);
        }
        Op::ColMaxes { x, arg, out: _ } => {
            let c = x.shape()[1];
            let mut dx = vec![0.0; x.numel()];
            for (j, &i) in arg.iter().enumerate() {
                dx[i * c + j] = g[j];
            }
            x.accumulate_grad(&dx);
        }
        Op::Concat { parts, out: _ } | Op::ConcatRows { parts, out: _ } => {
            // both layouts are contiguous block-wise, so the same split works
            let mut offset = 0;
            for part in parts {
                let n = part.numel();
                part.accumulate_grad(&g[offset..offset + n]);
                offset += n;
            }
        }
        Op::Mean { x, out: _ } => {
            let n = x.numel();
            let dx = vec![g[0] / n as f64; n];
            x.accumulate_grad(&dx);
        }
        Op::Dropout { x, mask, out: _ } => {
            let dx: Vec<f64> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
            x.accumulate_grad(&dx);
        }
    }
}
