//! Visual Reconstruction: invert the perspective decomposition back into a
//! visual feature map, and the Gram-affinity loss that supervises it.
//!
//! Each level-pair node is unsqueezed to a spatial slab, the slabs exchange
//! information through one attention pass in a low-dimensional projection,
//! a learned softmax mixture squeezes the level axis away, and a single
//! self-attention + feed-forward layer over the spatial tokens produces the
//! reconstructed feature map.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId};
use crate::interp::upsample_bilinear;
use crate::nn::{
    affine_forward, affine_params, mha_forward, mha_params, mlp_forward, mlp_params, AffineParams,
    Init, MhaParams, MlpParams, ParamStore,
};
use crate::tensor::Tensor;

/// Width of the subspace in which the level-aggregation attention runs.
pub const LEVEL_AGG_DIM: usize = 64;

/// Learned parameters of one reconstruction module.
#[derive(Clone, Debug)]
pub struct VrParams {
    /// Unsqueeze each node embedding to a `C * H_r * W_r` slab (shared
    /// across nodes).
    pub unsqueeze: AffineParams,
    /// Slab-to-subspace projection for level aggregation.
    pub down: ParamId,
    /// Subspace-to-slab back-projection.
    pub up: ParamId,
    /// Attention over the M^2 slabs inside the projected subspace.
    pub level_attn: MhaParams,
    /// Softmax-normalized level mixing weights, shape `[1, M^2]`.
    pub squeeze_logits: ParamId,
    /// Decoder self-attention over spatial tokens.
    pub dec_attn: MhaParams,
    /// Decoder feed-forward.
    pub dec_ff: MlpParams,
    /// Output shape `(C, H, W)`, fixed at construction.
    pub target: (usize, usize, usize),
    /// Slab resolution `(H_r, W_r)`; bilinearly upsampled to the target.
    pub recon_grid: (usize, usize),
    pub m: usize,
    pub c_prime: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn vr_params(
    store: &mut ParamStore,
    init: &mut Init,
    prefix: &str,
    m: usize,
    c_prime: usize,
    target: (usize, usize, usize),
    recon_grid: (usize, usize),
    heads: usize,
) -> Result<VrParams> {
    let (c, h, w) = target;
    let (hr, wr) = recon_grid;
    if hr > h || wr > w || hr == 0 || wr == 0 {
        return Err(Error::Config(format!(
            "reconstruction grid {hr}x{wr} must be nonempty and no larger than the target {h}x{w}"
        )));
    }
    let slab = c * hr * wr;
    let agg_dim = LEVEL_AGG_DIM.min(slab);
    let nodes = m * m;
    // widths here are dictated by C and the slab, so clamp the head count
    // to the largest divisor instead of erroring out
    let fit_heads = |dim: usize| (1..=heads).rev().find(|h| dim % h == 0).unwrap_or(1);
    Ok(VrParams {
        unsqueeze: affine_params(store, init, &format!("{prefix}.unsqueeze"), c_prime, slab),
        down: store.register(format!("{prefix}.down"), init.xavier(slab, agg_dim)),
        up: store.register(format!("{prefix}.up"), init.xavier(agg_dim, slab)),
        level_attn: mha_params(
            store,
            init,
            &format!("{prefix}.lvl"),
            agg_dim,
            fit_heads(agg_dim),
        )?,
        squeeze_logits: store.register(format!("{prefix}.squeeze"), Tensor::zeros(&[1, nodes])),
        dec_attn: mha_params(store, init, &format!("{prefix}.dec"), c, fit_heads(c))?,
        dec_ff: mlp_params(store, init, &format!("{prefix}.ff"), c, &[2 * c, c])?,
        target,
        recon_grid,
        m,
        c_prime,
    })
}

/// Reconstruct a visual feature map from a perspective representation.
pub fn reconstruct(
    g: &mut Graph,
    store: &ParamStore,
    params: &VrParams,
    p: NodeId,
) -> Result<NodeId> {
    let shape = g.value(p).shape().to_vec();
    if shape != [params.m, params.m, params.c_prime] {
        return Err(Error::Config(format!(
            "reconstruct built for [{}, {}, {}], got {shape:?}",
            params.m, params.m, params.c_prime
        )));
    }
    let (c, h, w) = params.target;
    let (hr, wr) = params.recon_grid;
    let nodes = params.m * params.m;

    // unsqueeze every node to a spatial slab
    let tokens = g.reshape(p, vec![nodes, params.c_prime])?;
    let slabs = affine_forward(g, store, params.unsqueeze, tokens)?;

    // level-wise aggregation in a projected subspace, residual on the slabs
    let down = store.feed(g, params.down);
    let up = store.feed(g, params.up);
    let low = g.matmul(slabs, down)?;
    let mixed_low = mha_forward(g, store, &params.level_attn, low, low, low)?;
    let lifted = g.matmul(mixed_low, up)?;
    let slabs = g.add(slabs, lifted)?;

    // level-wise squeeze: softmax-normalized convex mixture of the slabs
    let logits = store.feed(g, params.squeeze_logits);
    let weights = g.softmax_rows(logits, 1.0)?;
    let mixed = g.matmul(weights, slabs)?; // [1, slab]
    let mut spatial = g.reshape(mixed, vec![c, hr, wr])?;
    if (hr, wr) != (h, w) {
        spatial = upsample_bilinear(g, spatial, h, w)?;
    }

    // transformer-decoder-style layer over the spatial tokens
    let flat = g.reshape(spatial, vec![c, h * w])?;
    let toks = g.transpose(flat)?;
    let attn = mha_forward(g, store, &params.dec_attn, toks, toks, toks)?;
    let toks = g.add(toks, attn)?;
    let ff = mlp_forward(g, store, &params.dec_ff, toks)?;
    let toks = g.add(toks, ff)?;
    let out = g.transpose(toks)?;
    g.reshape(out, vec![c, h, w])
}

/// Gram-affinity loss: the Frobenius norm of the difference between the
/// `HW x HW` Gram matrices of the two feature maps, divided by `HW`.
pub fn reconstruction_loss(g: &mut Graph, i: NodeId, i_rec: NodeId) -> Result<NodeId> {
    let si = g.value(i).shape().to_vec();
    let sr = g.value(i_rec).shape().to_vec();
    if si != sr {
        return Err(Error::dimension("reconstruction_loss", &si, &sr));
    }
    let (c, hw) = match si.as_slice() {
        [c, h, w] => (*c, h * w),
        [c, n] => (*c, *n),
        _ => {
            return Err(Error::Config(format!(
                "reconstruction_loss expects feature maps, got {si:?}"
            )))
        }
    };
    let a = g.reshape(i, vec![c, hw])?;
    let b = g.reshape(i_rec, vec![c, hw])?;
    let at = g.transpose(a)?;
    let bt = g.transpose(b)?;
    let gram_a = g.matmul(at, a)?;
    let gram_b = g.matmul(bt, b)?;
    let diff = g.sub(gram_a, gram_b)?;
    let norm = g.frob_norm(diff);
    Ok(g.scale(norm, 1.0 / hw as f64))
}
