use super::kernels;
use super::tape::{Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Leaf gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to a leaf. `None` for constants,
    /// non-leaf nodes and leaves the root does not depend on.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros for leaves outside the root's cone.
    pub fn wrt(&self, var: Var<'_>) -> Result<Tensor> {
        if !var.requires_grad() {
            return Err(Error::Contract(format!("node {} does not require grad", var.id)));
        }
        Ok(self
            .get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape())))
    }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    /// Reverse-mode sweep from a scalar root.
    ///
    /// Visits every node at or below `root` exactly once, in reverse
    /// recording order. The tape itself is not modified.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::Contract("root belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if !root_node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root_node.value.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = Vec::new();
        leaves.resize_with(nodes.len(), || None);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| nodes[i].value.data();

            match &node.op {
                Op::Leaf => {
                    leaves[id] = Some(Tensor { shape: node.value.shape().to_vec(), data: g });
                }
                Op::Constant => {}
                Op::Add(a, b) => {
                    for (i, sign) in [(*a, 1.0), (*b, 1.0)] {
                        if needs(i) {
                            let dst = acc(&mut grads[i], g.len());
                            dst.iter_mut().zip(&g).for_each(|(d, x)| *d += sign * x);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (i, sign) in [(*a, 1.0), (*b, -1.0)] {
                        if needs(i) {
                            let dst = acc(&mut grads[i], g.len());
                            dst.iter_mut().zip(&g).for_each(|(d, x)| *d += sign * x);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (i, other) in [(*a, *b), (*b, *a)] {
                        if needs(i) {
                            let o = val(other);
                            let dst = acc(&mut grads[i], g.len());
                            for ((d, x), y) in dst.iter_mut().zip(&g).zip(o) {
                                *d += x * y;
                            }
                        }
                    }
                }
                Op::AddRow(a, r) => {
                    let cols = val(*r).len();
                    if needs(*a) {
                        let dst = acc(&mut grads[*a], g.len());
                        dst.iter_mut().zip(&g).for_each(|(d, x)| *d += x);
                    }
                    if needs(*r) {
                        let dst = acc(&mut grads[*r], cols);
                        for chunk in g.chunks_exact(cols) {
                            dst.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                        }
                    }
                }
                Op::MulRow(a, r) => {
                    let row = val(*r);
                    let cols = row.len();
                    if needs(*a) {
                        let dst = acc(&mut grads[*a], g.len());
                        for (dc, gc) in dst.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                            for ((d, x), y) in dc.iter_mut().zip(gc).zip(row) {
                                *d += x * y;
                            }
                        }
                    }
                    if needs(*r) {
                        let av = val(*a);
                        let dst = acc(&mut grads[*r], cols);
                        for (gc, ac) in g.chunks_exact(cols).zip(av.chunks_exact(cols)) {
                            for ((d, x), y) in dst.iter_mut().zip(gc).zip(ac) {
                                *d += x * y;
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let dst = acc(&mut grads[*a], g.len());
                    dst.iter_mut().zip(&g).for_each(|(d, x)| *d += c * x);
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let dst = acc(&mut grads[*a], g.len());
                    dst.iter_mut().zip(&g).for_each(|(d, x)| *d += x);
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if needs(*a) {
                        // dA = G · Bᵀ
                        let bt = kernels::transpose(val(*b), k, n);
                        let da = kernels::matmul(&g, &bt, m, n, k);
                        let dst = acc(&mut grads[*a], m * k);
                        dst.iter_mut().zip(&da).for_each(|(d, x)| *d += x);
                    }
                    if needs(*b) {
                        // dB = Aᵀ · G
                        let av = val(*a);
                        let dst = acc(&mut grads[*b], k * n);
                        kernels::matmul_tn_acc(dst, av, &g, m, k, n);
                    }
                }
                Op::Transpose { input, rows, cols } => {
                    let t = kernels::transpose(&g, *cols, *rows);
                    let dst = acc(&mut grads[*input], t.len());
                    dst.iter_mut().zip(&t).for_each(|(d, x)| *d += x);
                }
                Op::Sum(a) => {
                    let len = val(*a).len();
                    let dst = acc(&mut grads[*a], len);
                    dst.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::MeanAxis { input, outer, len, inner } => {
                    let (outer, len, inner) = (*outer, *len, *inner);
                    let scale = 1.0 / len as f64;
                    let dst = acc(&mut grads[*input], outer * len * inner);
                    for o in 0..outer {
                        let gsrc = &g[o * inner..(o + 1) * inner];
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            for (d, x) in dst[base..base + inner].iter_mut().zip(gsrc) {
                                *d += x * scale;
                            }
                        }
                    }
                }
                Op::LayerNorm { input, cols, inv_std } => {
                    let y = node.value.data();
                    let cols = *cols;
                    let dst = acc(&mut grads[*input], y.len());
                    for (r, is) in inv_std.iter().enumerate() {
                        let range = r * cols..(r + 1) * cols;
                        let (gr, yr) = (&g[range.clone()], &y[range.clone()]);
                        let mean_g = gr.iter().sum::<f64>() / cols as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for ((d, gi), yi) in dst[range].iter_mut().zip(gr).zip(yr) {
                            *d += is * (gi - mean_g - yi * mean_gy);
                        }
                    }
                }
                Op::Gelu(a) => {
                    let x = val(*a);
                    let dst = acc(&mut grads[*a], g.len());
                    for ((d, gi), xi) in dst.iter_mut().zip(&g).zip(x) {
                        *d += gi * kernels::gelu_grad(*xi);
                    }
                }
                Op::Softmax { input, cols } => {
                    let y = node.value.data();
                    let dst = acc(&mut grads[*input], y.len());
                    for ((dc, gc), yc) in dst
                        .chunks_exact_mut(*cols)
                        .zip(g.chunks_exact(*cols))
                        .zip(y.chunks_exact(*cols))
                    {
                        let s: f64 = gc.iter().zip(yc).map(|(a, b)| a * b).sum();
                        for ((d, gi), yi) in dc.iter_mut().zip(gc).zip(yc) {
                            *d += yi * (gi - s);
                        }
                    }
                }
                Op::Concat { inputs, outer, inner } => {
                    let total: usize = inputs.iter().map(|(_, len)| len).sum();
                    let mut offset = 0;
                    for &(i, len) in inputs {
                        if needs(i) {
                            let dst = acc(&mut grads[i], outer * len * inner);
                            for o in 0..*outer {
                                let src = (o * total + offset) * inner;
                                let dbase = o * len * inner;
                                for (d, x) in dst[dbase..dbase + len * inner]
                                    .iter_mut()
                                    .zip(&g[src..src + len * inner])
                                {
                                    *d += x;
                                }
                            }
                        }
                        offset += len;
                    }
                }
                Op::Slice { input, outer, len, inner, start, end } => {
                    let width = end - start;
                    let dst = acc(&mut grads[*input], outer * len * inner);
                    for o in 0..*outer {
                        let base = (o * len + start) * inner;
                        let gbase = o * width * inner;
                        for (d, x) in dst[base..base + width * inner]
                            .iter_mut()
                            .zip(&g[gbase..gbase + width * inner])
                        {
                            *d += x;
                        }
                    }
                }
                Op::Gather { input, indices } => {
                    let len = val(*input).len();
                    let dst = acc(&mut grads[*input], len);
                    for (&i, x) in indices.iter().zip(&g) {
                        dst[i] += x;
                    }
                }
                Op::Cosine { u, v, dot, nu, nv } => {
                    let (uv, vv) = (val(*u), val(*v));
                    // u == v is a stationary point of the cosine; return an exact zero.
                    let identical = uv == vv;
                    let c = dot / (nu * nv);
                    for (i, this, other, n_this) in [(*u, uv, vv, *nu), (*v, vv, uv, *nv)] {
                        if needs(i) {
                            let dst = acc(&mut grads[i], this.len());
                            if identical {
                                continue;
                            }
                            let inv = 1.0 / (nu * nv);
                            let self_coef = c / (n_this * n_this);
                            for ((d, t), o) in dst.iter_mut().zip(this).zip(other) {
                                *d += g[0] * (o * inv - self_coef * t);
                            }
                        }
                    }
                }
                Op::RowCosine { a, b, cols, stats } => {
                    let (av, bv) = (val(*a), val(*b));
                    let cols = *cols;
                    for (i, this, other, first) in [(*a, av, bv, true), (*b, bv, av, false)] {
                        if !needs(i) {
                            continue;
                        }
                        let dst = acc(&mut grads[i], this.len());
                        for (r, &(d, nx, ny)) in stats.iter().enumerate() {
                            let range = r * cols..(r + 1) * cols;
                            let (tr, or) = (&this[range.clone()], &other[range.clone()]);
                            if tr == or {
                                continue;
                            }
                            let n_this = if first { nx } else { ny };
                            let c = d / (nx * ny);
                            let inv = 1.0 / (nx * ny);
                            let self_coef = c / (n_this * n_this);
                            for ((dd, t), o) in dst[range].iter_mut().zip(tr).zip(or) {
                                *dd += g[r] * (o * inv - self_coef * t);
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}
