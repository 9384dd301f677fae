//! Parameter storage and learned building blocks (affine layers, MLPs,
//! multi-head attention) expressed on the graph.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId};
use crate::tensor::Tensor;

/// Flat named parameter store. Parameter updates happen through this store
/// from exactly one thread; forwards copy values into graph leaves.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, t));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Count restricted to names matching a prefix.
    pub fn value_count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        self.entries.clone()
    }

    /// Restore values from bundle records; names and shapes must match the
    /// registered layout exactly.
    pub fn load_records(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        for (name, tensor) in &mut self.entries {
            let found = records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {name:?}")))?;
            if found.shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {name:?} has shape {:?}, expected {:?}",
                    found.shape(),
                    tensor.shape()
                )));
            }
            *tensor = found.clone();
        }
        Ok(())
    }

    /// Feed one parameter into the graph as a leaf.
    pub fn feed(&self, g: &mut Graph, id: ParamId) -> NodeId {
        g.param(id, self.get(id).clone())
    }
}

/// Deterministic weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Xavier-style normal init for a `fan_in x fan_out` matrix.
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(&[fan_in, fan_out], |_| dist.sample(&mut self.rng))
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| dist.sample(&mut self.rng))
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.random_range(lo..hi))
    }
}

/// Momentum gradient descent over a parameter store.
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64) -> Self {
        let velocity = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect();
        SgdMomentum {
            lr,
            momentum,
            velocity,
        }
    }

    /// One update. Gradients for the same parameter are summed first (a
    /// parameter fed into the graph more than once yields several entries).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        let mut merged: Vec<Option<Tensor>> = vec![None; store.len()];
        for (id, g) in grads {
            match &mut merged[id.index()] {
                Some(acc) => acc.axpy(1.0, g)?,
                slot @ None => *slot = Some(g.clone()),
            }
        }
        for (idx, grad) in merged.into_iter().enumerate() {
            let Some(grad) = grad else { continue };
            let v = &mut self.velocity[idx];
            for (vv, gv) in v.data_mut().iter_mut().zip(grad.data()) {
                *vv = self.momentum * *vv - self.lr * gv;
            }
            let p = store.get_mut(ParamId(idx));
            for (pv, vv) in p.data_mut().iter_mut().zip(v.data()) {
                *pv += vv;
            }
        }
        Ok(())
    }
}

/// One affine layer: weight plus bias.
#[derive(Clone, Copy, Debug)]
pub struct AffineParams {
    pub w: ParamId,
    pub b: ParamId,
}

pub fn affine_params(
    store: &mut ParamStore,
    init: &mut Init,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> AffineParams {
    let w = store.register(format!("{prefix}.w"), init.xavier(fan_in, fan_out));
    let b = store.register(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    AffineParams { w, b }
}

pub fn affine_forward(
    g: &mut Graph,
    store: &ParamStore,
    p: AffineParams,
    x: NodeId,
) -> Result<NodeId> {
    let w = store.feed(g, p.w);
    let b = store.feed(g, p.b);
    let h = g.matmul(x, w)?;
    g.add_row_bias(h, b)
}

/// An MLP as a width list: affine layers with GELU between them, final layer
/// affine. `widths` excludes the input width.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub layers: Vec<AffineParams>,
    pub in_width: usize,
    pub widths: Vec<usize>,
}

pub fn mlp_params(
    store: &mut ParamStore,
    init: &mut Init,
    prefix: &str,
    in_width: usize,
    widths: &[usize],
) -> Result<MlpParams> {
    if widths.is_empty() {
        return Err(Error::Config(format!(
            "mlp {prefix} needs a nonempty width list"
        )));
    }
    let mut layers = Vec::with_capacity(widths.len());
    let mut fan_in = in_width;
    for (i, &w) in widths.iter().enumerate() {
        layers.push(affine_params(
            store,
            init,
            &format!("{prefix}.l{i}"),
            fan_in,
            w,
        ));
        fan_in = w;
    }
    Ok(MlpParams {
        layers,
        in_width,
        widths: widths.to_vec(),
    })
}

pub fn mlp_forward(g: &mut Graph, store: &ParamStore, p: &MlpParams, x: NodeId) -> Result<NodeId> {
    let (_, c) = g.value(x).dims2()?;
    if c != p.in_width {
        return Err(Error::Config(format!(
            "mlp expects input width {}, got {c}",
            p.in_width
        )));
    }
    let mut h = x;
    let last = p.layers.len() - 1;
    for (i, layer) in p.layers.iter().enumerate() {
        h = affine_forward(g, store, *layer, h)?;
        if i != last {
            h = g.gelu(h);
        }
    }
    Ok(h)
}

/// Multi-head attention parameters: four square projections over `dim`.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub wq: AffineParams,
    pub wk: AffineParams,
    pub wv: AffineParams,
    pub wo: AffineParams,
    pub heads: usize,
    pub dim: usize,
}

pub fn mha_params(
    store: &mut ParamStore,
    init: &mut Init,
    prefix: &str,
    dim: usize,
    heads: usize,
) -> Result<MhaParams> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "attention width {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(MhaParams {
        wq: affine_params(store, init, &format!("{prefix}.q"), dim, dim),
        wk: affine_params(store, init, &format!("{prefix}.k"), dim, dim),
        wv: affine_params(store, init, &format!("{prefix}.v"), dim, dim),
        wo: affine_params(store, init, &format!("{prefix}.o"), dim, dim),
        heads,
        dim,
    })
}

/// Scaled dot-product multi-head attention with learned projections.
/// `q: [t, c]`, `k, v: [s, c]` with matching `c == dim`.
pub fn mha_forward(
    g: &mut Graph,
    store: &ParamStore,
    p: &MhaParams,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<NodeId> {
    let (_t, cq) = g.value(q).dims2()?;
    let (s, ck) = g.value(k).dims2()?;
    let (sv, cv) = g.value(v).dims2()?;
    if cq != p.dim || ck != p.dim || cv != p.dim {
        return Err(Error::dimension("multi_head_attention", &[cq, ck], &[p.dim, p.dim]));
    }
    if s != sv {
        return Err(Error::dimension("multi_head_attention", &[s, ck], &[sv, cv]));
    }
    let d = p.dim / p.heads;
    let scale = (d as f64).sqrt();

    let qp = affine_forward(g, store, p.wq, q)?;
    let kp = affine_forward(g, store, p.wk, k)?;
    let vp = affine_forward(g, store, p.wv, v)?;

    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = g.slice_cols(qp, h * d, d)?;
        let kh = g.slice_cols(kp, h * d, d)?;
        let vh = g.slice_cols(vp, h * d, d)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let attn = g.softmax_rows(logits, scale)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = g.concat_cols(&heads)?;
    affine_forward(g, store, p.wo, cat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck_probed, random_tensor};

    fn tiny_mha(seed: u64, dim: usize, heads: usize) -> (ParamStore, MhaParams) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let p = mha_params(&mut store, &mut init, "attn", dim, heads).unwrap();
        (store, p)
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        assert!(mha_params(&mut store, &mut init, "a", 8, 3).is_err());
        assert!(mha_params(&mut store, &mut init, "b", 8, 2).is_ok());
    }

    #[test]
    fn single_key_attention_ignores_query() {
        let (store, p) = tiny_mha(1, 4, 2);
        let k = random_tensor(&[1, 4], 10, -1.0, 1.0);
        let v = random_tensor(&[1, 4], 11, -1.0, 1.0);
        let out_for_q = |qseed: u64| {
            let mut g = Graph::new();
            let qn = g.constant(random_tensor(&[3, 4], qseed, -1.0, 1.0));
            let kn = g.constant(k.clone());
            let vn = g.constant(v.clone());
            let o = mha_forward(&mut g, &store, &p, qn, kn, vn).unwrap();
            g.value(o).clone()
        };
        let a = out_for_q(20);
        let b = out_for_q(21);
        // every row equals the projected single value row, independent of q
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let row0 = &a.data()[..4];
        for r in 1..3 {
            for j in 0..4 {
                assert!((a.data()[r * 4 + j] - row0[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_keys_and_values_change_nothing() {
        let (store, p) = tiny_mha(2, 6, 3);
        let q = random_tensor(&[4, 6], 30, -1.0, 1.0);
        let k = random_tensor(&[5, 6], 31, -1.0, 1.0);
        let v = random_tensor(&[5, 6], 32, -1.0, 1.0);

        let run = |kv_rows: usize, kd: &Tensor, vd: &Tensor| {
            let mut g = Graph::new();
            let qn = g.constant(q.clone());
            let kn = g.constant(kd.reshaped(vec![kv_rows, 6]).unwrap());
            let vn = g.constant(vd.reshaped(vec![kv_rows, 6]).unwrap());
            let o = mha_forward(&mut g, &store, &p, qn, kn, vn).unwrap();
            g.value(o).clone()
        };

        let single = run(5, &k, &v);
        let mut k2 = k.data().to_vec();
        k2.extend_from_slice(k.data());
        let mut v2 = v.data().to_vec();
        v2.extend_from_slice(v.data());
        let doubled = run(
            10,
            &Tensor::new(vec![10, 6], k2).unwrap(),
            &Tensor::new(vec![10, 6], v2).unwrap(),
        );
        for (a, b) in single.data().iter().zip(doubled.data()) {
            assert!((a - b).abs() < 1e-10, "duplication changed attention output");
        }
    }

    #[test]
    fn mha_gradcheck_4x8() {
        let (store, p) = tiny_mha(3, 8, 2);
        for seed in [0u64, 1, 2] {
            let q = random_tensor(&[4, 8], 40 + seed, -1.0, 1.0);
            let k = random_tensor(&[4, 8], 50 + seed, -1.0, 1.0);
            let v = random_tensor(&[4, 8], 60 + seed, -1.0, 1.0);
            let rep = gradcheck_probed(
                "multi_head_attention",
                &[q, k, v],
                1e-5,
                seed,
                |g, ids| mha_forward(g, &store, &p, ids[0], ids[1], ids[2]),
            )
            .unwrap();
            assert!(rep.passed, "{rep}");
        }
    }

    #[test]
    fn mlp_zero_params_give_zero_output() {
        let mut store = ParamStore::new();
        let mut init = Init::new(4);
        let p = mlp_params(&mut store, &mut init, "mlp", 3, &[5, 2]).unwrap();
        for id in store.ids() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&[4, 3], 70, -1.0, 1.0));
        let y = mlp_forward(&mut g, &store, &p, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_affine_mlp_equals_matmul_plus_bias() {
        let mut store = ParamStore::new();
        let mut init = Init::new(5);
        let p = mlp_params(&mut store, &mut init, "aff", 3, &[2]).unwrap();
        let x = random_tensor(&[4, 3], 80, -1.0, 1.0);

        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let y = mlp_forward(&mut g, &store, &p, xn).unwrap();

        let mut g2 = Graph::new();
        let xn2 = g2.constant(x);
        let w = g2.constant(store.get(p.layers[0].w).clone());
        let b = g2.constant(store.get(p.layers[0].b).clone());
        let mm = g2.matmul(xn2, w).unwrap();
        let y2 = g2.add_row_bias(mm, b).unwrap();

        assert_eq!(g.value(y).data(), g2.value(y2).data());
    }

    #[test]
    fn mlp_gradcheck() {
        let mut store = ParamStore::new();
        let mut init = Init::new(6);
        let p = mlp_params(&mut store, &mut init, "mlp", 4, &[6, 3]).unwrap();
        for seed in [0u64, 1, 2] {
            let x = random_tensor(&[3, 4], 90 + seed, -1.0, 1.0);
            let rep = gradcheck_probed("mlp", &[x], 1e-5, seed, |g, ids| {
                mlp_forward(g, &store, &p, ids[0])
            })
            .unwrap();
            assert!(rep.passed, "{rep}");
        }
    }

    #[test]
    fn mlp_rejects_empty_widths_and_bad_input() {
        let mut store = ParamStore::new();
        let mut init = Init::new(7);
        assert!(mlp_params(&mut store, &mut init, "x", 3, &[]).is_err());
        let p = mlp_params(&mut store, &mut init, "y", 3, &[2]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 5]));
        assert!(mlp_forward(&mut g, &store, &p, x).is_err());
    }
}
