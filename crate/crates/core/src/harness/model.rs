//! Model assembly: a convolutional patchify stem, a stack of
//! perspective-learning blocks (or plain self-attention blocks for the
//! baseline), and a linear per-token segmentation head with bilinear
//! upsampling to image resolution.

use std::path::Path;

use crate::bundle;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::interp::{resize_bilinear, upsample_bilinear};
use crate::nn::{
    affine_forward, affine_params, mha_forward, mha_params, mlp_forward, mlp_params, AffineParams,
    Init, MhaParams, MlpParams, ParamStore,
};
use crate::pdd::pdd_params;
use crate::pht::TransformPlan;
use crate::pia::{dlpl_block_forward, BlockMode, DlplBlockParams, PiaSchedule};
use crate::pointness::{luminance, structure_tensor_pointness};
use crate::space::PerspectiveSpace;
use crate::tensor::Tensor;
use crate::vr::vr_params;

pub enum ModelBlock {
    Dlpl {
        params: DlplBlockParams,
        space: PerspectiveSpace,
    },
    Baseline {
        attn: MhaParams,
        ff: MlpParams,
    },
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub stem: AffineParams,
    pub head: AffineParams,
    pub blocks: Vec<ModelBlock>,
    pub baseline: bool,
}

/// Parameter counts per module group.
#[derive(Clone, Copy, Debug)]
pub struct ParamReport {
    pub stem: usize,
    pub head: usize,
    pub blocks: usize,
    pub total: usize,
}

/// Build the model. `baseline` swaps every perspective block for a plain
/// self-attention block of matched width; stem and head are identical (the
/// initializer draws them first, so both variants share their values).
pub fn build_model(cfg: &ModelConfig, baseline: bool) -> Result<Model> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(cfg.seed);
    let c = cfg.embed_dim;
    let patch_in = 3 * cfg.patch_size * cfg.patch_size;
    let grid = cfg.grid();

    let stem = affine_params(&mut store, &mut init, "stem", patch_in, c);
    // damp the stem so stage-0 features start small: the parameter-free
    // fusion path can double magnitudes per block, and the Gram loss is
    // quartic in the feature scale
    let damped = store.get(stem.w).map(|v| 0.25 * v);
    *store.get_mut(stem.w) = damped;
    let head = affine_params(&mut store, &mut init, "head", c, cfg.num_classes);

    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for b in 0..cfg.num_blocks {
        let prefix = format!("block{b}");
        if baseline {
            let attn = mha_params(&mut store, &mut init, &format!("{prefix}.attn"), c, cfg.heads)?;
            let ff = mlp_params(
                &mut store,
                &mut init,
                &format!("{prefix}.ff"),
                c,
                &[2 * c, c],
            )?;
            blocks.push(ModelBlock::Baseline { attn, ff });
        } else {
            let pdd = pdd_params(
                &mut store,
                &mut init,
                &format!("{prefix}.pdd"),
                c,
                cfg.perspective_channels,
                cfg.levels,
                cfg.heads,
                cfg.support_factor,
            )?;
            let vr = vr_params(
                &mut store,
                &mut init,
                &format!("{prefix}.vr"),
                cfg.levels,
                cfg.perspective_channels,
                (c, grid, grid),
                (cfg.recon_grid.min(grid), cfg.recon_grid.min(grid)),
                cfg.heads,
            )?;
            // zero the unsqueeze projection so reconstructions start at
            // zero; the Gram loss is quartic in the activation scale and a
            // randomly initialized decoder output makes it dwarf the task
            // loss at step 0
            let w_shape = store.get(vr.unsqueeze.w).shape().to_vec();
            *store.get_mut(vr.unsqueeze.w) = Tensor::zeros(&w_shape);
            let space = PerspectiveSpace::new(
                cfg.codebook_size,
                &[cfg.levels, cfg.levels, cfg.perspective_channels],
                cfg.ema_alpha,
            )?;
            blocks.push(ModelBlock::Dlpl {
                params: DlplBlockParams {
                    pdd,
                    vr,
                    pia_layers: cfg.pia_layers,
                    resample_perspective: cfg.resample_perspective,
                },
                space,
            });
        }
    }
    Ok(Model {
        cfg: cfg.clone(),
        store,
        stem,
        head,
        blocks,
        baseline,
    })
}

impl Model {
    pub fn param_report(&self) -> ParamReport {
        let stem = self.store.value_count_with_prefix("stem");
        let head = self.store.value_count_with_prefix("head");
        let total = self.store.value_count();
        ParamReport {
            stem,
            head,
            blocks: total - stem - head,
            total,
        }
    }

    /// Point-ness map of an image, resized to the token grid.
    pub fn pointness_for(&self, image: &Tensor) -> Result<Tensor> {
        let gray = luminance(image)?;
        let map = structure_tensor_pointness(
            &gray,
            self.cfg.pointness_window,
            self.cfg.pointness_kappa,
        )?;
        resize_bilinear(map.values(), self.cfg.grid(), self.cfg.grid())
    }

    /// Non-overlapping patch extraction into a constant token matrix
    /// `[N, 3 * p * p]` (the raw image carries no gradient).
    fn patch_tokens(&self, image: &Tensor) -> Result<Tensor> {
        let p = self.cfg.patch_size;
        let hw = self.cfg.img_size;
        let shape = image.shape();
        if shape != [3, hw, hw] {
            return Err(Error::dimension("patch_tokens", &[3, hw, hw], shape));
        }
        let grid = self.cfg.grid();
        let n = grid * grid;
        let d = image.data();
        let plane = hw * hw;
        let mut tokens = vec![0.0; n * 3 * p * p];
        for gy in 0..grid {
            for gx in 0..grid {
                let tok = &mut tokens[(gy * grid + gx) * 3 * p * p..];
                let mut idx = 0;
                for ch in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            tok[idx] = d[ch * plane + (gy * p + py) * hw + (gx * p + px)];
                            idx += 1;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![n, 3 * p * p], tokens)
    }

    /// One full forward pass on a single image. Returns per-pixel logits,
    /// the reconstruction losses of every perspective block, the detached
    /// perspective representations for the space updates, and optional
    /// per-block diagnostics.
    pub fn forward(
        &self,
        g: &mut Graph,
        image: &Tensor,
        schedule: &PiaSchedule,
        collect_diagnostics: bool,
    ) -> Result<ModelForward> {
        let grid = self.cfg.grid();
        let c = self.cfg.embed_dim;
        let s_resized = self.pointness_for(image)?;
        let tokens = g.constant(self.patch_tokens(image)?);
        let embedded = affine_forward(g, &self.store, self.stem, tokens)?;
        let t = g.transpose(embedded)?;
        let mut x = g.reshape(t, vec![c, grid, grid])?;

        let mut rec_losses = Vec::new();
        let mut p_values = Vec::new();
        let mut diagnostics = Vec::new();
        for block in &self.blocks {
            match block {
                ModelBlock::Dlpl { params, space } => {
                    let input_value = collect_diagnostics.then(|| g.value(x).clone());
                    let fwd = dlpl_block_forward(
                        g,
                        &self.store,
                        params,
                        space,
                        schedule,
                        x,
                        &s_resized,
                        self.cfg.r_min,
                    )?;
                    rec_losses.push(fwd.rec_loss);
                    p_values.push(fwd.p_value.clone());
                    if collect_diagnostics {
                        diagnostics.push(BlockDiagnostics {
                            mode: fwd.mode,
                            rec_loss: g.value(fwd.rec_loss).item(),
                            input: input_value.unwrap(),
                            output: g.value(fwd.out).clone(),
                            p: fwd.p_value,
                            p_transformed: fwd.p_transformed,
                            plan: fwd.plan,
                        });
                    }
                    x = fwd.out;
                }
                ModelBlock::Baseline { attn, ff } => {
                    let input_value = collect_diagnostics.then(|| g.value(x).clone());
                    let flat = g.reshape(x, vec![c, grid * grid])?;
                    let toks = g.transpose(flat)?;
                    let a = mha_forward(g, &self.store, attn, toks, toks, toks)?;
                    let toks = g.add(toks, a)?;
                    let f = mlp_forward(g, &self.store, ff, toks)?;
                    let toks = g.add(toks, f)?;
                    let back = g.transpose(toks)?;
                    x = g.reshape(back, vec![c, grid, grid])?;
                    if collect_diagnostics {
                        diagnostics.push(BlockDiagnostics {
                            mode: BlockMode::SelfAttention,
                            rec_loss: 0.0,
                            input: input_value.unwrap(),
                            output: g.value(x).clone(),
                            p: Tensor::zeros(&[1, 1, 1]),
                            p_transformed: Tensor::zeros(&[1, 1, 1]),
                            plan: None,
                        });
                    }
                }
            }
        }

        // per-token logits, upsampled to per-pixel logits
        let flat = g.reshape(x, vec![c, grid * grid])?;
        let toks = g.transpose(flat)?;
        let token_logits = affine_forward(g, &self.store, self.head, toks)?;
        let lt = g.transpose(token_logits)?;
        let lgrid = g.reshape(lt, vec![self.cfg.num_classes, grid, grid])?;
        let lup = upsample_bilinear(g, lgrid, self.cfg.img_size, self.cfg.img_size)?;
        let lflat = g.reshape(
            lup,
            vec![self.cfg.num_classes, self.cfg.img_size * self.cfg.img_size],
        )?;
        let pixel_logits = g.transpose(lflat)?;

        Ok(ModelForward {
            pixel_logits,
            rec_losses,
            p_values,
            diagnostics,
        })
    }

    /// Greedy per-pixel prediction (ties go to the lowest class id).
    pub fn predict(&self, image: &Tensor, schedule: &PiaSchedule) -> Result<Vec<u8>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, image, schedule, false)?;
        let logits = g.value(fwd.pixel_logits);
        let (n, k) = logits.dims2()?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best as u8);
        }
        Ok(out)
    }

    /// Schedule for this model's configuration at a given epoch.
    pub fn schedule_at(&self, epoch: usize) -> PiaSchedule {
        PiaSchedule {
            warmup_fraction: self.cfg.warmup_fraction,
            current_epoch: epoch,
            total_epochs: self.cfg.epochs,
        }
    }

    /// Persist parameters and (for perspective blocks) the embedding spaces.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut records = self.store.to_records();
        for (b, block) in self.blocks.iter().enumerate() {
            if let ModelBlock::Dlpl { space, .. } = block {
                records.extend(space.to_records(&format!("block{b}.space.")));
            }
        }
        bundle::write_bundle(path, &records)
    }

    /// Restore parameters and spaces written by [`Self::save_checkpoint`].
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let records = bundle::read_bundle(path)?;
        self.store.load_records(&records)?;
        for (b, block) in self.blocks.iter_mut().enumerate() {
            if let ModelBlock::Dlpl { space, .. } = block {
                *space = PerspectiveSpace::from_records(
                    &records,
                    &format!("block{b}.space."),
                    self.cfg.ema_alpha,
                )?;
            }
        }
        Ok(())
    }
}

pub struct BlockDiagnostics {
    pub mode: BlockMode,
    pub rec_loss: f64,
    pub input: Tensor,
    pub output: Tensor,
    pub p: Tensor,
    pub p_transformed: Tensor,
    pub plan: Option<TransformPlan>,
}

pub struct ModelForward {
    /// `[H*W, num_classes]` per-pixel logits.
    pub pixel_logits: NodeId,
    /// One reconstruction-loss node per perspective block.
    pub rec_losses: Vec<NodeId>,
    /// Detached perspective representations (for space updates).
    pub p_values: Vec<Tensor>,
    pub diagnostics: Vec<BlockDiagnostics>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            img_size: 16,
            patch_size: 4,
            embed_dim: 8,
            levels: 2,
            perspective_channels: 8,
            codebook_size: 4,
            heads: 2,
            num_blocks: 2,
            num_classes: 3,
            recon_grid: 2,
            n_train: 4,
            n_test: 2,
            epochs: 4,
            batch_size: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn stem_and_head_counts_match_between_variants() {
        let cfg = tiny_cfg();
        let dlpl = build_model(&cfg, false).unwrap();
        let base = build_model(&cfg, true).unwrap();
        let rd = dlpl.param_report();
        let rb = base.param_report();
        assert_eq!(rd.stem, rb.stem);
        assert_eq!(rd.head, rb.head);
        assert!(rd.blocks > rb.blocks, "perspective blocks add parameters");
        // identical init draws for the shared modules
        assert_eq!(
            dlpl.store.get(dlpl.stem.w).data(),
            base.store.get(base.stem.w).data()
        );
        assert_eq!(
            dlpl.store.get(dlpl.head.w).data(),
            base.store.get(base.head.w).data()
        );
    }

    #[test]
    fn forward_shapes_64_to_logits() {
        // 64x64 input, patch 4 -> 16x16 token grid -> 64x64 logit map
        let cfg = ModelConfig {
            img_size: 64,
            patch_size: 4,
            embed_dim: 8,
            levels: 2,
            perspective_channels: 8,
            codebook_size: 4,
            heads: 2,
            num_blocks: 1,
            num_classes: 3,
            recon_grid: 2,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.grid(), 16);
        let model = build_model(&cfg, false).unwrap();
        let img = random_tensor(&[3, 64, 64], 1, 0.0, 1.0);
        let mut g = Graph::new();
        let fwd = model
            .forward(&mut g, &img, &model.schedule_at(0), false)
            .unwrap();
        assert_eq!(g.value(fwd.pixel_logits).shape(), &[64 * 64, 3]);
        assert_eq!(fwd.rec_losses.len(), 1);
        assert_eq!(fwd.p_values.len(), 1);
        assert_eq!(fwd.p_values[0].shape(), &[2, 2, 8]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let model = build_model(&cfg, false).unwrap();
        let img = random_tensor(&[3, 16, 16], 2, 0.0, 1.0);
        let run = || model.predict(&img, &model.schedule_at(0)).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.dlpl");
        let cfg = tiny_cfg();
        let mut model = build_model(&cfg, false).unwrap();
        // push the spaces away from their fresh state
        for block in &mut model.blocks {
            if let ModelBlock::Dlpl { space, .. } = block {
                space
                    .ema_update_batch(
                        &[
                            random_tensor(&[2, 2, 8], 5, -1.0, 1.0),
                            random_tensor(&[2, 2, 8], 6, -1.0, 1.0),
                        ],
                        0,
                    )
                    .unwrap();
            }
        }
        model.save_checkpoint(&path).unwrap();

        let img = random_tensor(&[3, 16, 16], 3, 0.0, 1.0);
        let want = model.predict(&img, &model.schedule_at(3)).unwrap();

        let mut fresh = build_model(&cfg, false).unwrap();
        fresh.load_checkpoint(&path).unwrap();
        let got = fresh.predict(&img, &fresh.schedule_at(3)).unwrap();
        assert_eq!(want, got);
        if let (ModelBlock::Dlpl { space: a, .. }, ModelBlock::Dlpl { space: b, .. }) =
            (&model.blocks[0], &fresh.blocks[0])
        {
            assert!(a.is_initialized() && b.is_initialized());
            assert_eq!(a.counts(), b.counts());
        }
    }
}
