//! Perspective-Invariant Attention and the assembled block: decomposition,
//! reconstruction, transformation, and fusion, with the warmup degeneration
//! to self-attention.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::ParamStore;
use crate::pdd::{pdd_forward, PddParams};
use crate::pht::{transform_perspective, TransformPlan};
use crate::space::PerspectiveSpace;
use crate::tensor::Tensor;
use crate::vr::{reconstruct, reconstruction_loss, VrParams};

/// Which path a block forward took.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockMode {
    SelfAttention,
    Transformed,
}

impl std::fmt::Display for BlockMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockMode::SelfAttention => write!(f, "self"),
            BlockMode::Transformed => write!(f, "transformed"),
        }
    }
}

/// The warmup schedule: the transformed path activates once the epoch index
/// reaches `warmup_fraction * total_epochs`.
#[derive(Clone, Copy, Debug)]
pub struct PiaSchedule {
    pub warmup_fraction: f64,
    pub current_epoch: usize,
    pub total_epochs: usize,
}

impl PiaSchedule {
    pub fn new(warmup_fraction: f64, current_epoch: usize, total_epochs: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup fraction must lie in [0, 1], got {warmup_fraction}"
            )));
        }
        Ok(PiaSchedule {
            warmup_fraction,
            current_epoch,
            total_epochs,
        })
    }

    pub fn mode(&self) -> BlockMode {
        if (self.current_epoch as f64) < self.warmup_fraction * self.total_epochs as f64 {
            BlockMode::SelfAttention
        } else {
            BlockMode::Transformed
        }
    }

    /// First epoch index that runs the transformed path.
    pub fn flip_epoch(&self) -> usize {
        (self.warmup_fraction * self.total_epochs as f64).ceil() as usize
    }

    pub fn at_epoch(mut self, epoch: usize) -> Self {
        self.current_epoch = epoch;
        self
    }
}

/// Cross-attention fusion per the transformation-invariant formula: queries
/// from `I`, keys and values from `I'_rec`, scale `1/sqrt(C)`, plus a
/// residual from `I`. No learned projections.
pub fn pia(g: &mut Graph, i: NodeId, i_rec: NodeId) -> Result<NodeId> {
    let si = g.value(i).shape().to_vec();
    let sr = g.value(i_rec).shape().to_vec();
    if si != sr {
        return Err(Error::dimension("pia", &si, &sr));
    }
    let (c, h, w) = match si.as_slice() {
        [c, h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::Config(format!(
                "pia expects [C, H, W] features, got {si:?}"
            )))
        }
    };
    let n = h * w;
    let i2 = g.reshape(i, vec![c, n])?;
    let q = g.transpose(i2)?;
    let r2 = g.reshape(i_rec, vec![c, n])?;
    let kv = g.transpose(r2)?;
    let kt = g.transpose(kv)?;
    let logits = g.matmul(q, kt)?;
    let attn = g.softmax_rows(logits, (c as f64).sqrt())?;
    let mixed = g.matmul(attn, kv)?;
    let fused = g.add(mixed, q)?;
    let out = g.transpose(fused)?;
    g.reshape(out, vec![c, h, w])
}

/// Parameters of one full block.
#[derive(Clone, Debug)]
pub struct DlplBlockParams {
    pub pdd: PddParams,
    pub vr: VrParams,
    /// Cascaded fusion passes within the block.
    pub pia_layers: usize,
    /// Re-derive a fresh perspective from the fused feature on every
    /// cascaded layer instead of reusing the first transformed view.
    pub resample_perspective: bool,
}

/// Everything a block forward produces.
pub struct BlockForward {
    pub out: NodeId,
    /// Reconstruction loss node (original perspective).
    pub rec_loss: NodeId,
    /// Detached perspective representation, queued by the caller for the
    /// batch-boundary space update.
    pub p_value: Tensor,
    /// Transformed perspective (equals `p_value` on the self path).
    pub p_transformed: Tensor,
    pub mode: BlockMode,
    /// Transformation plan of the first fusion layer, when one ran.
    pub plan: Option<TransformPlan>,
}

/// One block: P = PDD(I, S); I_rec = VR(P); loss against I; then either the
/// transformed path (PHT + VR + PIA) or the self-attention degeneration
/// `pia(I, I)`. The space is a frozen snapshot; its update is queued by the
/// caller at the batch boundary.
pub fn dlpl_block_forward(
    g: &mut Graph,
    store: &ParamStore,
    params: &DlplBlockParams,
    space: &PerspectiveSpace,
    schedule: &PiaSchedule,
    i: NodeId,
    s_resized: &Tensor,
    r_min: f64,
) -> Result<BlockForward> {
    let p = pdd_forward(g, store, &params.pdd, i, s_resized)?;
    let i_rec = reconstruct(g, store, &params.vr, p)?;
    // the original feature map is a detached target: the loss trains the
    // reconstruction side, not the features toward a collapsed Gram
    let i_target = g.constant(g.value(i).clone());
    let rec_loss = reconstruction_loss(g, i_target, i_rec)?;
    let p_value = g.value(p).clone();

    let transformed = schedule.mode() == BlockMode::Transformed && space.is_initialized();
    if !transformed {
        let mut out = pia(g, i, i)?;
        for _ in 1..params.pia_layers {
            out = pia(g, out, out)?;
        }
        return Ok(BlockForward {
            out,
            rec_loss,
            p_transformed: p_value.clone(),
            p_value,
            mode: BlockMode::SelfAttention,
            plan: None,
        });
    }

    let (p_t, plan) = transform_perspective(g, p, space, r_min)?;
    let p_transformed = g.value(p_t).clone();
    let i_rec_t = reconstruct(g, store, &params.vr, p_t)?;
    let mut out = pia(g, i, i_rec_t)?;
    for _ in 1..params.pia_layers {
        if params.resample_perspective {
            // a fresh perspective from the fused feature
            let p_l = pdd_forward(g, store, &params.pdd, out, s_resized)?;
            let (p_lt, _) = transform_perspective(g, p_l, space, r_min)?;
            let i_l = reconstruct(g, store, &params.vr, p_lt)?;
            out = pia(g, out, i_l)?;
        } else {
            out = pia(g, out, i_rec_t)?;
        }
    }
    Ok(BlockForward {
        out,
        rec_loss,
        p_value,
        p_transformed,
        mode: BlockMode::Transformed,
        plan: Some(plan),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck_probed, random_tensor};
    use crate::nn::{Init, SgdMomentum};
    use crate::pdd::pdd_params;
    use crate::vr::vr_params;

    #[test]
    fn schedule_boundaries() {
        let s = PiaSchedule::new(0.3, 0, 10).unwrap();
        assert_eq!(s.mode(), BlockMode::SelfAttention);
        assert_eq!(s.at_epoch(2).mode(), BlockMode::SelfAttention);
        assert_eq!(s.at_epoch(3).mode(), BlockMode::Transformed);
        assert_eq!(s.flip_epoch(), 3);

        // non-integer boundary: 0.3 * 12 = 3.6, flips at 4
        let s12 = PiaSchedule::new(0.3, 0, 12).unwrap();
        assert_eq!(s12.flip_epoch(), 4);
        assert_eq!(s12.at_epoch(3).mode(), BlockMode::SelfAttention);
        assert_eq!(s12.at_epoch(4).mode(), BlockMode::Transformed);

        assert!(PiaSchedule::new(1.5, 0, 10).is_err());
    }

    #[test]
    fn single_token_pia_is_sum_of_the_tokens() {
        let i = random_tensor(&[4, 1, 1], 1, -1.0, 1.0);
        let r = random_tensor(&[4, 1, 1], 2, -1.0, 1.0);
        let mut g = Graph::new();
        let a = g.input(i.clone());
        let b = g.input(r.clone());
        let out = pia(&mut g, a, b).unwrap();
        for ch in 0..4 {
            let want = i.data()[ch] + r.data()[ch];
            assert!((g.value(out).data()[ch] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn pia_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3, 3]));
        let b = g.input(Tensor::zeros(&[2, 3, 4]));
        assert!(matches!(
            pia(&mut g, a, b).unwrap_err(),
            Error::Dimension { .. }
        ));
    }

    #[test]
    fn pia_attention_rows_sum_to_one() {
        // direct row-sum check of the attention the fusion uses
        let c = 4usize;
        let i = random_tensor(&[c, 2, 4], 3, -2.0, 2.0);
        let r = random_tensor(&[c, 2, 4], 4, -2.0, 2.0);
        let mut g = Graph::new();
        let a = g.input(i);
        let b = g.input(r);
        let i2 = g.reshape(a, vec![c, 8]).unwrap();
        let q = g.transpose(i2).unwrap();
        let r2 = g.reshape(b, vec![c, 8]).unwrap();
        let kv = g.transpose(r2).unwrap();
        let kt = g.transpose(kv).unwrap();
        let logits = g.matmul(q, kt).unwrap();
        let attn = g.softmax_rows(logits, (c as f64).sqrt()).unwrap();
        for row in 0..8 {
            let s: f64 = g.value(attn).data()[row * 8..(row + 1) * 8].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn pia_of_identical_inputs_matches_hand_rolled_self_attention() {
        let c = 3usize;
        let i = random_tensor(&[c, 3, 3], 5, -1.0, 1.0);
        let mut g = Graph::new();
        let a = g.input(i.clone());
        let out = pia(&mut g, a, a).unwrap();

        // independent construction of self-attention with a residual
        let mut g2 = Graph::new();
        let x = g2.input(i);
        let flat = g2.reshape(x, vec![c, 9]).unwrap();
        let tok = g2.transpose(flat).unwrap();
        let tok_t = g2.transpose(tok).unwrap();
        let logits = g2.matmul(tok, tok_t).unwrap();
        let attn = g2.softmax_rows(logits, (c as f64).sqrt()).unwrap();
        let mixed = g2.matmul(attn, tok).unwrap();
        let fused = g2.add(mixed, tok).unwrap();
        let back = g2.transpose(fused).unwrap();
        let want = g2.reshape(back, vec![c, 3, 3]).unwrap();

        for (a, b) in g.value(out).data().iter().zip(g2.value(want).data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "self path must be bitwise equal");
        }
    }

    fn block_fixture(seed: u64) -> (ParamStore, DlplBlockParams) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let c = 4usize;
        let m = 2usize;
        let cp = 6usize;
        let pdd = pdd_params(&mut store, &mut init, "b.pdd", c, cp, m, 2, 1.0).unwrap();
        let vr = vr_params(&mut store, &mut init, "b.vr", m, cp, (c, 4, 4), (4, 4), 2).unwrap();
        (
            store,
            DlplBlockParams {
                pdd,
                vr,
                pia_layers: 1,
                resample_perspective: false,
            },
        )
    }

    #[test]
    fn warmup_block_is_bitwise_the_self_attention_path() {
        let (store, params) = block_fixture(7);
        let space = PerspectiveSpace::new(2, &[2, 2, 6], 0.9).unwrap();
        let schedule = PiaSchedule::new(0.3, 0, 10).unwrap();
        let i = random_tensor(&[4, 4, 4], 70, -1.0, 1.0);
        let s = random_tensor(&[4, 4], 71, 0.0, 1.0);

        let mut g = Graph::new();
        let inode = g.input(i.clone());
        let fwd =
            dlpl_block_forward(&mut g, &store, &params, &space, &schedule, inode, &s, 0.01)
                .unwrap();
        assert_eq!(fwd.mode, BlockMode::SelfAttention);
        assert!(fwd.plan.is_none());

        let mut g2 = Graph::new();
        let inode2 = g2.input(i);
        let direct = pia(&mut g2, inode2, inode2).unwrap();
        for (a, b) in g.value(fwd.out).data().iter().zip(g2.value(direct).data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn post_warmup_identity_space_stays_close_to_self_path() {
        // train the reconstruction briefly so the residual is meaningful,
        // then compare the transformed path under an identity space against
        // the warmup path
        let (mut store, params) = block_fixture(8);
        let i = random_tensor(&[4, 4, 4], 80, -1.0, 1.0);
        let s = random_tensor(&[4, 4], 81, 0.0, 1.0);
        let mut opt = SgdMomentum::new(&store, 0.05, 0.9);
        for _ in 0..300 {
            let mut g = Graph::new();
            let inode = g.constant(i.clone());
            let p = pdd_forward(&mut g, &store, &params.pdd, inode, &s).unwrap();
            let rec = reconstruct(&mut g, &store, &params.vr, p).unwrap();
            let loss = reconstruction_loss(&mut g, inode, rec).unwrap();
            let grads = g.backward(loss).unwrap();
            let pg = g.param_grads(&grads);
            opt.step(&mut store, &pg).unwrap();
        }

        // P for the identity space
        let mut g = Graph::new();
        let inode = g.constant(i.clone());
        let p = pdd_forward(&mut g, &store, &params.pdd, inode, &s).unwrap();
        let rec = reconstruct(&mut g, &store, &params.vr, p).unwrap();
        let p_val = g.value(p).clone();
        let residual = {
            let mut diff = g.value(rec).clone();
            diff.axpy(-1.0, &i).unwrap();
            diff.frob_norm()
        };
        let space = PerspectiveSpace::with_entries(vec![p_val], 0.9).unwrap();

        let run = |epoch: usize| {
            let mut g = Graph::new();
            let inode = g.input(i.clone());
            let schedule = PiaSchedule::new(0.3, epoch, 10).unwrap();
            let fwd =
                dlpl_block_forward(&mut g, &store, &params, &space, &schedule, inode, &s, 0.01)
                    .unwrap();
            (g.value(fwd.out).clone(), fwd.mode)
        };
        let (pre, pre_mode) = run(0);
        let (post, post_mode) = run(5);
        assert_eq!(pre_mode, BlockMode::SelfAttention);
        assert_eq!(post_mode, BlockMode::Transformed);

        let mut delta = post.clone();
        delta.axpy(-1.0, &pre).unwrap();
        assert!(
            delta.frob_norm() < 2.0 * residual,
            "A/B delta {} vs residual {residual}",
            delta.frob_norm()
        );
    }

    #[test]
    fn full_block_gradcheck_input_to_output() {
        let (store, params) = block_fixture(9);
        let s = random_tensor(&[4, 4], 91, 0.0, 1.0);
        for seed in [0u64, 1, 2] {
            let i = crate::pdd::off_kink_input(
                &store,
                &params.pdd,
                &[4, 4, 4],
                &s,
                9100 + seed,
                2e-3,
            );
            // freeze the space around this input's perspective
            let p_val = {
                let mut g = Graph::new();
                let inode = g.input(i.clone());
                let p = pdd_forward(&mut g, &store, &params.pdd, inode, &s).unwrap();
                g.value(p).clone()
            };
            let space =
                PerspectiveSpace::with_entries(vec![p_val.map(|v| v + 0.05)], 0.9).unwrap();
            // freeze the transformation plan: H and r are constants of the
            // backward pass
            let plan = crate::pht::plan_transform(&space, &p_val, 0.01).unwrap();

            let rep = gradcheck_probed("pia_block", &[i], 1e-4, seed, |g, ids| {
                let p = pdd_forward(g, &store, &params.pdd, ids[0], &s)?;
                let p_t = crate::pht::apply_transform_plan(g, p, &plan)?;
                let i_rec_t = reconstruct(g, &store, &params.vr, p_t)?;
                pia(g, ids[0], i_rec_t)
            })
            .unwrap();
            assert!(rep.passed, "{rep}");
        }
    }

    #[test]
    fn cascaded_blocks_preserve_shapes() {
        let (store, params) = block_fixture(10);
        let space = PerspectiveSpace::new(2, &[2, 2, 6], 0.9).unwrap();
        let schedule = PiaSchedule::new(0.3, 0, 10).unwrap();
        let s = random_tensor(&[4, 4], 101, 0.0, 1.0);
        let mut g = Graph::new();
        let mut cur = g.input(random_tensor(&[4, 4, 4], 100, -1.0, 1.0));
        for _ in 0..4 {
            let fwd =
                dlpl_block_forward(&mut g, &store, &params, &space, &schedule, cur, &s, 0.01)
                    .unwrap();
            assert_eq!(g.value(fwd.out).shape(), &[4, 4, 4]);
            cur = fwd.out;
        }
    }
}
