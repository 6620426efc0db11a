use std::cell::{Ref, RefCell};
use std::fmt;
use std::sync::Arc;

use super::{kernels, l2_norm, dot, split_axis, Tensor, DEGENERATE_NORM};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-6;

/// Recorded operation. Indices refer to earlier nodes on the same tape.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { input: usize, rows: usize, cols: usize },
    Sum(usize),
    MeanAxis { input: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { input: usize, cols: usize, inv_std: Vec<f64> },
    Gelu(usize),
    Softmax { input: usize, cols: usize },
    Concat { inputs: Vec<(usize, usize)>, outer: usize, inner: usize },
    Slice { input: usize, outer: usize, len: usize, inner: usize, start: usize, end: usize },
    Gather { input: usize, indices: Arc<[usize]> },
    Reshape(usize),
    Cosine { u: usize, v: usize, dot: f64, nu: f64, nv: f64 },
    RowCosine { a: usize, b: usize, cols: usize, stats: Vec<(f64, f64, f64)> },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Ordered record of one forward computation.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = first.shape();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut inputs = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let shape = p.shape();
            let (o, len, i) = split_axis("concat", &shape, axis)?;
            if shape.len() != base.len() || o != outer || i != inner {
                return Err(Error::dim("concat", format!("{base:?} vs {shape:?} on axis {axis}")));
            }
            inputs.push((p.id, len));
            total += len;
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for &(id, len) in &inputs {
                    let src = nodes[id].value.data();
                    data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_requires_grad(inputs.iter().map(|(id, _)| *id));
        Ok(self.push(Tensor { shape, data }, Op::Concat { inputs, outer, inner }, rg))
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn any_requires_grad(&self, ids: impl IntoIterator<Item = usize>) -> bool {
        let nodes = self.nodes.borrow();
        ids.into_iter().any(|id| nodes[id].requires_grad)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::dim(op, format!("{a:?} vs {b:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Var<'t>, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor { shape: a.shape().to_vec(), data }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let a = self.value();
        Tensor { shape: a.shape().to_vec(), data: a.data().iter().map(|x| f(*x)).collect() }
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "add")?;
        let v = self.zip_with(&other, |x, y| x + y);
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "sub")?;
        let v = self.zip_with(&other, |x, y| x - y);
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Element-wise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "mul")?;
        let v = self.zip_with(&other, |x, y| x * y);
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    fn row_broadcast(
        self,
        row: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (a, r) = (self.value(), row.value());
        let cols = *a.shape().last().unwrap_or(&0);
        if r.shape() != [cols] || cols == 0 {
            return Err(Error::dim(op, format!("{:?} with row {:?}", a.shape(), r.shape())));
        }
        let mut data = a.data().to_vec();
        for chunk in data.chunks_exact_mut(cols) {
            for (x, y) in chunk.iter_mut().zip(r.data()) {
                *x = f(*x, *y);
            }
        }
        Ok(Tensor { shape: a.shape().to_vec(), data })
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let v = self.row_broadcast(row, "add_row", |x, y| x + y)?;
        Ok(self.binary(row, v, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies every row element-wise by a length-`cols` vector.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let v = self.row_broadcast(row, "mul_row", |x, y| x * y)?;
        Ok(self.binary(row, v, Op::MulRow(self.id, row.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.map(|x| c * x);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// `1 - self`, the usual similarity-to-loss conversion.
    pub fn one_minus(self) -> Var<'t> {
        self.scale(-1.0).add_scalar(1.0)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (m, k, n, data) = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            (m, k, n, kernels::matmul(a.data(), b.data(), m, k, n))
        };
        let v = Tensor { shape: vec![m, n], data };
        Ok(self.binary(other, v, Op::MatMul { a: self.id, b: other.id, m, k, n }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let (rows, cols, data) = {
            let a = self.value();
            if a.shape().len() != 2 {
                return Err(Error::dim("transpose", format!("rank {}", a.shape().len())));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            (r, c, kernels::transpose(a.data(), r, c))
        };
        let v = Tensor { shape: vec![cols, rows], data };
        Ok(self.unary(v, Op::Transpose { input: self.id, rows, cols }))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (outer, len, inner) = split_axis("mean_axis", &shape, axis)?;
        if len == 0 {
            return Err(Error::dim("mean_axis", "empty axis"));
        }
        let v = self.value().mean_axis(axis)?;
        Ok(self.unary(v, Op::MeanAxis { input: self.id, outer, len, inner }))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(self) -> Result<Var<'t>> {
        let (shape, y, inv_std, cols) = {
            let a = self.value();
            let cols = *a.shape().last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
            if cols == 0 {
                return Err(Error::dim("layer_norm", "empty rows"));
            }
            let (y, inv_std) = kernels::layer_norm(a.data(), cols, LAYER_NORM_EPS);
            (a.shape().to_vec(), y, inv_std, cols)
        };
        Ok(self.unary(Tensor { shape, data: y }, Op::LayerNorm { input: self.id, cols, inv_std }))
    }

    pub fn gelu(self) -> Var<'t> {
        let v = self.map(kernels::gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let (shape, data, cols) = {
            let a = self.value();
            let cols = *a.shape().last().ok_or_else(|| Error::dim("softmax", "scalar input"))?;
            if cols == 0 {
                return Err(Error::dim("softmax", "empty rows"));
            }
            (a.shape().to_vec(), kernels::softmax_rows(a.data(), cols), cols)
        };
        Ok(self.unary(Tensor { shape, data }, Op::Softmax { input: self.id, cols }))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let mut shape = self.shape();
        let (outer, len, inner) = split_axis("slice", &shape, axis)?;
        if start >= end || end > len {
            return Err(Error::dim("slice", format!("[{start}, {end}) on axis of length {len}")));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        {
            let a = self.value();
            for o in 0..outer {
                let base = (o * len + start) * inner;
                data.extend_from_slice(&a.data()[base..base + width * inner]);
            }
        }
        shape[axis] = width;
        Ok(self.unary(
            Tensor { shape, data },
            Op::Slice { input: self.id, outer, len, inner, start, end },
        ))
    }

    /// `out[i] = self.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(self, indices: Arc<[usize]>, shape: Vec<usize>) -> Result<Var<'t>> {
        let numel: usize = shape.iter().product();
        if numel != indices.len() {
            return Err(Error::dim("gather", format!("{} indices for shape {shape:?}", indices.len())));
        }
        let data = {
            let a = self.value();
            let src = a.data();
            if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
                return Err(Error::dim("gather", format!("index {bad} out of {}", src.len())));
            }
            indices.iter().map(|&i| src[i]).collect()
        };
        Ok(self.unary(Tensor { shape, data }, Op::Gather { input: self.id, indices }))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let v = self.to_tensor().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Cosine similarity of two equal-length tensors (flattened).
    pub fn cosine(self, other: Var<'t>) -> Result<Var<'t>> {
        let (d, nu, nv) = {
            let (u, v) = (self.value(), other.value());
            if u.numel() != v.numel() {
                return Err(Error::dim("cosine", format!("{:?} vs {:?}", u.shape(), v.shape())));
            }
            (dot(u.data(), v.data()), l2_norm(u.data()), l2_norm(v.data()))
        };
        let norm = nu.min(nv);
        if norm < DEGENERATE_NORM {
            return Err(Error::DegenerateVector { norm });
        }
        let value = Tensor::scalar(d / (nu * nv));
        Ok(self.binary(other, value, Op::Cosine { u: self.id, v: other.id, dot: d, nu, nv }))
    }

    /// Per-row cosine similarities of two `[rows, cols]` tensors.
    pub fn row_cosine(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "row_cosine")?;
        let (rows, cols, stats, sims) = {
            let (a, b) = (self.value(), other.value());
            if a.shape().len() != 2 {
                return Err(Error::dim("row_cosine", format!("rank {}", a.shape().len())));
            }
            let (rows, cols) = (a.shape()[0], a.shape()[1]);
            let mut stats = Vec::with_capacity(rows);
            let mut sims = Vec::with_capacity(rows);
            for r in 0..rows {
                let (x, y) = (a.row(r), b.row(r));
                let (d, nx, ny) = (dot(x, y), l2_norm(x), l2_norm(y));
                let norm = nx.min(ny);
                if norm < DEGENERATE_NORM {
                    return Err(Error::DegenerateVector { norm });
                }
                stats.push((d, nx, ny));
                sims.push(d / (nx * ny));
            }
            (rows, cols, stats, sims)
        };
        let value = Tensor { shape: vec![rows], data: sims };
        Ok(self.binary(other, value, Op::RowCosine { a: self.id, b: other.id, cols, stats }))
    }
}
