//! Reverse-mode differentiation over a closed op set.
//!
//! Each operation records a [`GradRecord`] carrying its op name, parent
//! references, and a hand-written backward closure. There is no tracing of
//! arbitrary user code: the op set below is exactly what the pipeline needs,
//! and every backward is checked against central finite differences (see
//! [`crate::gradcheck`]).
//!
//! Nodes are append-only, so node order is already a topological order and
//! the backward sweep is a single reverse pass. Accumulation order is fixed,
//! which keeps gradients bitwise reproducible single-threaded.

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

/// Reference to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Index of a parameter inside a [`crate::nn::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Backward closure: `(grad_out, parent_values, own_value) -> grad per parent`.
type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

/// One recorded operation: the forward value plus what is needed to replay
/// its backward. Replaying a forward with identical inputs rebuilds identical
/// records and bitwise-identical values.
pub struct GradRecord {
    op: &'static str,
    value: Tensor,
    parents: Vec<NodeId>,
    backward: Option<BackFn>,
    needs_grad: bool,
    param: Option<ParamId>,
}

impl GradRecord {
    pub fn op(&self) -> &'static str {
        self.op
    }
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// An append-only computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<GradRecord>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents: Vec<NodeId>,
        backward: Option<BackFn>,
        needs_grad: bool,
        param: Option<ParamId>,
    ) -> NodeId {
        self.nodes.push(GradRecord {
            op,
            value,
            parents,
            backward,
            needs_grad,
            param,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_parent_needs(&self, parents: &[NodeId]) -> bool {
        parents.iter().any(|p| self.nodes[p.0].needs_grad)
    }

    /// A leaf that never receives gradients (data, positional tables, ...).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push("constant", t, vec![], None, false, None)
    }

    /// A leaf that accumulates gradients (the `x` of a gradcheck).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push("input", t, vec![], None, true, None)
    }

    /// A leaf bound to a parameter slot; its gradient is collected by
    /// [`Graph::backward`] under the given id.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> NodeId {
        self.push("param", t, vec![], None, true, Some(id))
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dimension("add", va.shape(), vb.shape()));
        }
        let value = va.zip_map(vb, |x, y| x + y)?;
        let needs = self.any_parent_needs(&[a, b]);
        Ok(self.push(
            "add",
            value,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())])),
            needs,
            None,
        ))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dimension("sub", va.shape(), vb.shape()));
        }
        let value = va.zip_map(vb, |x, y| x - y)?;
        let needs = self.any_parent_needs(&[a, b]);
        Ok(self.push(
            "sub",
            value,
            vec![a, b],
            Some(Box::new(|g, _, _| {
                vec![Some(g.clone()), Some(g.map(|v| -v))]
            })),
            needs,
            None,
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dimension("mul", va.shape(), vb.shape()));
        }
        let value = va.zip_map(vb, |x, y| x * y)?;
        let needs = self.any_parent_needs(&[a, b]);
        Ok(self.push(
            "mul",
            value,
            vec![a, b],
            Some(Box::new(|g, parents, _| {
                let ga = g.zip_map(parents[1], |gv, bv| gv * bv).ok();
                let gb = g.zip_map(parents[0], |gv, av| gv * av).ok();
                vec![ga, gb]
            })),
            needs,
            None,
        ))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v * c);
        let needs = self.any_parent_needs(&[a]);
        self.push(
            "scale",
            value,
            vec![a],
            Some(Box::new(move |g, _, _| vec![Some(g.map(|v| v * c))])),
            needs,
            None,
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(gelu_scalar);
        let needs = self.any_parent_needs(&[a]);
        self.push(
            "gelu",
            value,
            vec![a],
            Some(Box::new(|g, parents, _| {
                let gx = parents[0]
                    .zip_map(g, |x, gv| gv * gelu_grad_scalar(x))
                    .ok();
                vec![gx]
            })),
            needs,
            None,
        )
    }

    // ---- shape plumbing --------------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        let needs = self.any_parent_needs(&[a]);
        Ok(self.push(
            "reshape",
            value,
            vec![a],
            Some(Box::new(|g, parents, _| {
                vec![g.reshaped(parents[0].shape().to_vec()).ok()]
            })),
            needs,
            None,
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        let value = transpose2(self.value(a), r, c);
        let needs = self.any_parent_needs(&[a]);
        Ok(self.push(
            "transpose",
            value,
            vec![a],
            Some(Box::new(move |g, _, _| vec![Some(transpose2(g, c, r))])),
            needs,
            None,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        if start + width > c {
            return Err(Error::Config(format!(
                "slice_cols [{start}, {}) out of range for {c} columns",
                start + width
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        let value = Tensor::new(vec![r, width], data)?;
        let needs = self.any_parent_needs(&[a]);
        Ok(self.push(
            "slice_cols",
            value,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut out = vec![0.0; r * c];
                let gd = g.data();
                for i in 0..r {
                    out[i * c + start..i * c + start + width]
                        .copy_from_slice(&gd[i * width..(i + 1) * width]);
                }
                vec![Tensor::new(vec![r, c], out).ok()]
            })),
            needs,
            None,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Config("concat_cols of zero tensors".into()));
        }
        let r = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::dimension(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        let needs = self.any_parent_needs(parts);
        let widths_c = widths.clone();
        Ok(self.push(
            "concat_cols",
            value,
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let gd = g.data();
                let mut outs = Vec::with_capacity(widths_c.len());
                let mut offset = 0;
                for &w in &widths_c {
                    let mut part = vec![0.0; r * w];
                    for i in 0..r {
                        part[i * w..(i + 1) * w]
                            .copy_from_slice(&gd[i * total + offset..i * total + offset + w]);
                    }
                    outs.push(Tensor::new(vec![r, w], part).ok());
                    offset += w;
                }
                outs
            })),
            needs,
            None,
        ))
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::dimension(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let value = Tensor::new(
            vec![m, n],
            matmul_raw(self.value(a).data(), self.value(b).data(), m, ka, n),
        )?;
        let needs = self.any_parent_needs(&[a, b]);
        Ok(self.push(
            "matmul",
            value,
            vec![a, b],
            Some(Box::new(move |g, parents, _| {
                // dA = G * B^T, dB = A^T * G
                let ga = Tensor::new(
                    vec![m, ka],
                    matmul_nt_raw(g.data(), parents[1].data(), m, n, ka),
                )
                .ok();
                let gb = Tensor::new(
                    vec![ka, n],
                    matmul_tn_raw(parents[0].data(), g.data(), ka, m, n),
                )
                .ok();
                vec![ga, gb]
            })),
            needs,
            None,
        ))
    }

    /// Broadcast a bias row over every row of a 2-D tensor.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        let bshape = self.value(bias).shape().to_vec();
        let blen = self.value(bias).numel();
        if blen != c {
            return Err(Error::dimension("add_row_bias", &[r, c], &bshape));
        }
        let xd = self.value(x).data();
        let bd = self.value(bias).data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(xd[i * c + j] + bd[j]);
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        let needs = self.any_parent_needs(&[x, bias]);
        Ok(self.push(
            "add_row_bias",
            value,
            vec![x, bias],
            Some(Box::new(move |g, parents, _| {
                let gd = g.data();
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += gd[i * c + j];
                    }
                }
                vec![
                    Some(g.clone()),
                    Tensor::new(parents[1].shape().to_vec(), gb).ok(),
                ]
            })),
            needs,
            None,
        ))
    }

    // ---- nonlinear blocks --------------------------------------------------

    /// Row-wise softmax of `x / scale`, computed with max-subtraction.
    pub fn softmax_rows(&mut self, x: NodeId, scale: f64) -> Result<NodeId> {
        if !(scale > 0.0) {
            return Err(Error::Config(format!(
                "softmax_rows scale must be positive, got {scale}"
            )));
        }
        let (r, c) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&xd[i * c..(i + 1) * c], scale, &mut data[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![r, c], data)?;
        let needs = self.any_parent_needs(&[x]);
        Ok(self.push(
            "softmax_rows",
            value,
            vec![x],
            Some(Box::new(move |g, _, y| {
                let gd = g.data();
                let yd = y.data();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let grow = &gd[i * c..(i + 1) * c];
                    let yrow = &yd[i * c..(i + 1) * c];
                    let dot: f64 = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                    for j in 0..c {
                        gx[i * c + j] = yrow[j] * (grow[j] - dot) / scale;
                    }
                }
                vec![Tensor::new(vec![r, c], gx).ok()]
            })),
            needs,
            None,
        ))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        let needs = self.any_parent_needs(&[x]);
        self.push(
            "sum_all",
            Tensor::scalar(total),
            vec![x],
            Some(Box::new(|g, parents, _| {
                let gv = g.item();
                vec![Some(Tensor::filled(parents[0].shape(), gv))]
            })),
            needs,
            None,
        )
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Frobenius norm reduced to a scalar. Subgradient 0 at the origin.
    pub fn frob_norm(&mut self, x: NodeId) -> NodeId {
        let norm = self.value(x).frob_norm();
        let needs = self.any_parent_needs(&[x]);
        self.push(
            "frob_norm",
            Tensor::scalar(norm),
            vec![x],
            Some(Box::new(move |g, parents, y| {
                let yv = y.item();
                if yv == 0.0 {
                    return vec![Some(Tensor::zeros(parents[0].shape()))];
                }
                let gv = g.item();
                vec![Some(parents[0].map(|v| gv * v / yv))]
            })),
            needs,
            None,
        )
    }

    /// Mean cross-entropy between row logits and integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::dimension("softmax_cross_entropy", &[n, k], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let xd = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &xd[i * k..(i + 1) * k];
            let prow = &mut probs[i * k..(i + 1) * k];
            softmax_row(row, 1.0, prow);
            loss -= prow[labels[i]].max(1e-300).ln();
        }
        loss /= n as f64;
        let labels_c = labels.to_vec();
        let needs = self.any_parent_needs(&[logits]);
        Ok(self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            vec![logits],
            Some(Box::new(move |g, _, _| {
                let gv = g.item() / n as f64;
                let mut gx = probs.clone();
                for (i, &lab) in labels_c.iter().enumerate() {
                    gx[i * k + lab] -= 1.0;
                }
                for v in gx.iter_mut() {
                    *v *= gv;
                }
                vec![Tensor::new(vec![n, k], gx).ok()]
            })),
            needs,
            None,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from `root`. The seed gradient is all-ones (callers
    /// normally differentiate a scalar).
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::filled(self.nodes[root.0].value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(back) = &node.backward {
                let parent_vals: Vec<&Tensor> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let parent_grads = back(&g, &parent_vals, &node.value);
                if parent_grads.len() != node.parents.len() {
                    return Err(Error::Config(format!(
                        "op {} returned {} gradients for {} parents",
                        node.op,
                        parent_grads.len(),
                        node.parents.len()
                    )));
                }
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    if !self.nodes[p.0].needs_grad {
                        continue;
                    }
                    let Some(pg) = pg else { continue };
                    match &mut grads[p.0] {
                        Some(acc) => acc.axpy(1.0, &pg)?,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients per parameter slot after a backward sweep.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                if let Some(g) = &grads.grads[idx] {
                    out.push((pid, g.clone()));
                }
            }
        }
        out
    }

    /// Register a custom op. Used by the pipeline modules for ops whose
    /// backward is hand-derived (discretization, warps, resampling).
    pub(crate) fn push_custom(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents: Vec<NodeId>,
        backward: BackFn,
    ) -> NodeId {
        let needs = self.any_parent_needs(&parents);
        self.push(op, value, parents, Some(backward), needs, None)
    }
}

fn transpose2(t: &Tensor, r: usize, c: usize) -> Tensor {
    let src = t.data();
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data).expect("transpose preserves element count")
}

fn softmax_row(row: &[f64], scale: f64, out: &mut [f64]) {
    let inv = 1.0 / scale;
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * inv));
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v * inv - m).exp();
        *o = e;
        total += e;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

const GELU_COEF: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    let sq2pi = (2.0 / std::f64::consts::PI).sqrt();
    let u = sq2pi * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let sq2pi = (2.0 / std::f64::consts::PI).sqrt();
    let u = sq2pi * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * sq2pi * (1.0 + 3.0 * GELU_COEF * x * x)
}
