//! The training loop: mini-batch momentum descent on pixel cross-entropy
//! plus the weighted mean of the per-block reconstruction losses, with
//! perspective-space updates at batch boundaries and the warmup schedule
//! switching the transformed path on.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::SgdMomentum;
use crate::pia::{BlockMode, PiaSchedule};
use crate::tensor::Tensor;

use super::dataset::{Dataset, SegSample};
use super::metrics::{Confusion, Metrics};
use super::model::{Model, ModelBlock};

/// One history row, mirroring the CSV schema.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub rec_loss: f64,
    pub total: f64,
    pub train_miou: f64,
    pub test_miou: f64,
    pub mode: BlockMode,
}

pub const HISTORY_HEADER: &str = "epoch,task_loss,rec_loss,total,train_miou,test_miou,mode";

/// Render history rows in the fixed CSV schema.
pub fn history_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.task_loss, r.rec_loss, r.total, r.train_miou, r.test_miou, r.mode
        ));
    }
    out
}

pub struct TrainOptions<'a> {
    /// Directory receiving `history.csv` and `checkpoint.dlpl` after every
    /// epoch (the last completed epoch survives a divergence abort).
    pub out_dir: Option<&'a Path>,
    /// Worker threads for evaluation (training itself stays single-threaded).
    pub eval_threads: usize,
    /// Per-epoch progress callback.
    pub progress: Option<Box<dyn FnMut(&EpochRecord) + 'a>>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions {
            out_dir: None,
            eval_threads: 1,
            progress: None,
        }
    }
}

/// Train in place, returning the per-epoch history. Aborts with a
/// divergence error naming the offending step when the loss leaves the
/// finite range.
pub fn train(model: &mut Model, ds: &Dataset, mut opts: TrainOptions) -> Result<Vec<EpochRecord>> {
    let cfg = model.cfg.clone();
    if ds.img_size != cfg.img_size {
        return Err(Error::Config(format!(
            "dataset images are {}x{} but the model expects {}x{}",
            ds.img_size, ds.img_size, cfg.img_size, cfg.img_size
        )));
    }
    if ds.num_classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model expects {}",
            ds.num_classes, cfg.num_classes
        )));
    }
    if ds.train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }

    let mut opt = SgdMomentum::new(&model.store, cfg.learning_rate, cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let schedule = model.schedule_at(epoch);
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut shuffle_rng);

        let mut task_sum = 0.0;
        let mut rec_sum = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (task, rec, queued) = train_step(model, ds, batch, &schedule, &mut opt, global_step)?;
            task_sum += task;
            rec_sum += rec;
            steps += 1;
            global_step += 1;

            // batch boundary: apply the queued space updates
            for (b, (block, ps)) in model.blocks.iter_mut().zip(queued).enumerate() {
                if let ModelBlock::Dlpl { space, .. } = block {
                    let seed = ((epoch as u64) << 32) | ((global_step as u64) << 8) | b as u64;
                    space.ema_update_batch(&ps, seed)?;
                }
            }
        }

        let task_loss = task_sum / steps as f64;
        let rec_loss = rec_sum / steps as f64;
        let total = task_loss + cfg.lambda_rec * rec_loss;
        let train_miou = evaluate(model, &ds.train, &schedule, opts.eval_threads)?.miou;
        let test_miou = evaluate(model, &ds.test, &schedule, opts.eval_threads)?.miou;
        let record = EpochRecord {
            epoch,
            task_loss,
            rec_loss,
            total,
            train_miou,
            test_miou,
            mode: schedule.mode(),
        };
        if let Some(cb) = opts.progress.as_mut() {
            cb(&record);
        }
        history.push(record);

        if let Some(dir) = opts.out_dir {
            std::fs::create_dir_all(dir)?;
            model.save_checkpoint(&dir.join("checkpoint.dlpl"))?;
            let mut f = std::fs::File::create(dir.join("history.csv"))?;
            f.write_all(history_csv(&history).as_bytes())?;
        }
    }
    Ok(history)
}

/// One optimizer step over a batch; returns the batch task loss, the batch
/// reconstruction loss, and the per-block perspective representations queued
/// for the boundary update.
#[allow(clippy::type_complexity)]
fn train_step(
    model: &mut Model,
    ds: &Dataset,
    batch: &[usize],
    schedule: &PiaSchedule,
    opt: &mut SgdMomentum,
    global_step: usize,
) -> Result<(f64, f64, Vec<Vec<Tensor>>)> {
    // a previous step can poison the parameters with overflowed gradients
    // even when its loss still read finite; catch that here as divergence
    for id in model.store.ids() {
        if !model.store.get(id).all_finite() {
            return Err(Error::Divergence {
                step: global_step,
                detail: format!("parameter {} is not finite", model.store.name(id)),
            });
        }
    }
    let cfg = &model.cfg;
    let mut g = Graph::new();
    let mut ce_nodes = Vec::with_capacity(batch.len());
    let mut rec_nodes = Vec::with_capacity(batch.len());
    let mut queued: Vec<Vec<Tensor>> = vec![Vec::new(); model.blocks.len()];

    for &idx in batch {
        let sample = &ds.train[idx];
        let labels: Vec<usize> = sample.labels.iter().map(|&l| l as usize).collect();
        let fwd = model.forward(&mut g, &sample.image, schedule, false)?;
        let ce = g.softmax_cross_entropy(fwd.pixel_logits, &labels)?;
        ce_nodes.push(ce);
        if !fwd.rec_losses.is_empty() {
            // average over blocks before the loss weight applies
            let mut acc = fwd.rec_losses[0];
            for &r in &fwd.rec_losses[1..] {
                acc = g.add(acc, r)?;
            }
            rec_nodes.push(g.scale(acc, 1.0 / fwd.rec_losses.len() as f64));
        }
        for (b, p) in fwd.p_values.into_iter().enumerate() {
            queued[b].push(p);
        }
    }

    let mut task = ce_nodes[0];
    for &n in &ce_nodes[1..] {
        task = g.add(task, n)?;
    }
    task = g.scale(task, 1.0 / ce_nodes.len() as f64);

    let rec = if rec_nodes.is_empty() {
        None
    } else {
        let mut acc = rec_nodes[0];
        for &n in &rec_nodes[1..] {
            acc = g.add(acc, n)?;
        }
        Some(g.scale(acc, 1.0 / rec_nodes.len() as f64))
    };

    // lambda = 0 keeps the reconstruction term out of the gradient path
    // entirely; its value is still logged
    let total = match rec {
        Some(r) if cfg.lambda_rec > 0.0 => {
            let weighted = g.scale(r, cfg.lambda_rec);
            g.add(task, weighted)?
        }
        _ => task,
    };

    let task_value = g.value(task).item();
    let rec_value = rec.map(|r| g.value(r).item()).unwrap_or(0.0);
    let total_value = g.value(total).item();
    if !total_value.is_finite() || !rec_value.is_finite() {
        return Err(Error::Divergence {
            step: global_step,
            detail: format!("total loss {total_value}, reconstruction {rec_value}"),
        });
    }

    let grads = g.backward(total)?;
    let mut pgrads = g.param_grads(&grads);
    if cfg.grad_clip > 0.0 {
        let norm: f64 = pgrads
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > cfg.grad_clip {
            let scale = cfg.grad_clip / norm;
            for (_, t) in pgrads.iter_mut() {
                for v in t.data_mut() {
                    *v *= scale;
                }
            }
        }
    }
    opt.step(&mut model.store, &pgrads)?;

    Ok((task_value, rec_value, queued))
}

/// Mean IoU and confusion over a sample slice. Forward passes are pure, so
/// they fan out over threads; integer confusion counts make the reduction
/// order-independent.
pub fn evaluate(
    model: &Model,
    samples: &[SegSample],
    schedule: &PiaSchedule,
    threads: usize,
) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let k = model.cfg.num_classes;
    let confusion = if threads <= 1 {
        let mut c = Confusion::new(k);
        for s in samples {
            let pred = model.predict(&s.image, schedule)?;
            c.add_slice(&s.labels, &pred)?;
        }
        c
    } else {
        let chunk = samples.len().div_ceil(threads);
        let results: Vec<Result<Confusion>> = std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        let mut c = Confusion::new(k);
                        for s in part {
                            let pred = model.predict(&s.image, schedule)?;
                            c.add_slice(&s.labels, &pred)?;
                        }
                        Ok(c)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut c = Confusion::new(k);
        for r in results {
            c.merge(&r?);
        }
        c
    };
    Ok(Metrics::from_confusion(confusion))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::harness::dataset::generate_dataset;
    use crate::harness::model::build_model;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            img_size: 16,
            patch_size: 4,
            embed_dim: 8,
            levels: 2,
            perspective_channels: 8,
            codebook_size: 4,
            heads: 2,
            num_blocks: 1,
            num_classes: 3,
            recon_grid: 2,
            n_train: 6,
            n_test: 3,
            epochs: 2,
            batch_size: 3,
            learning_rate: 0.02,
            ..ModelConfig::default()
        }
    }

    fn tiny_dataset(cfg: &ModelConfig) -> Dataset {
        generate_dataset(
            cfg.n_train,
            cfg.n_test,
            cfg.num_classes,
            cfg.img_size,
            cfg.warp_train,
            cfg.warp_test,
            cfg.seed,
        )
        .unwrap()
    }

    #[test]
    fn csv_schema_is_fixed() {
        assert_eq!(
            HISTORY_HEADER,
            "epoch,task_loss,rec_loss,total,train_miou,test_miou,mode"
        );
        let rows = vec![EpochRecord {
            epoch: 0,
            task_loss: 1.5,
            rec_loss: 0.25,
            total: 1.6,
            train_miou: 0.5,
            test_miou: 0.4,
            mode: BlockMode::SelfAttention,
        }];
        let csv = history_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), HISTORY_HEADER);
        assert_eq!(lines.next().unwrap(), "0,1.5,0.25,1.6,0.5,0.4,self");
    }

    #[test]
    fn loss_decomposition_holds_per_epoch() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset(&cfg);
        let mut model = build_model(&cfg, false).unwrap();
        let history = train(&mut model, &ds, TrainOptions::default()).unwrap();
        assert_eq!(history.len(), cfg.epochs);
        for r in &history {
            let want = r.task_loss + cfg.lambda_rec * r.rec_loss;
            assert!(
                (r.total - want).abs() <= 1e-12,
                "total {} vs decomposition {want}",
                r.total
            );
        }
    }

    #[test]
    fn lambda_zero_freezes_reconstruction_parameters() {
        let mut cfg = tiny_cfg();
        cfg.lambda_rec = 0.0;
        // stay in warmup throughout: past the flip the task loss itself
        // reaches the reconstruction parameters through the fused path
        cfg.warmup_fraction = 1.0;
        let ds = tiny_dataset(&cfg);
        let mut model = build_model(&cfg, false).unwrap();
        // snapshot a reconstruction-only parameter (the unsqueeze weight of
        // block 0); with lambda = 0 nothing may touch it
        let vr_w = match &model.blocks[0] {
            ModelBlock::Dlpl { params, .. } => params.vr.unsqueeze.w,
            _ => unreachable!(),
        };
        let before = model.store.get(vr_w).clone();
        let history = train(&mut model, &ds, TrainOptions::default()).unwrap();
        let after = model.store.get(vr_w);
        assert_eq!(before.data(), after.data(), "lambda = 0 must cut the rec gradient");
        // the reconstruction loss is still logged
        assert!(history.iter().all(|r| r.rec_loss > 0.0));
    }

    #[test]
    fn mode_flag_flips_at_the_schedule_boundary() {
        let mut cfg = tiny_cfg();
        cfg.epochs = 4; // flip at ceil(0.3 * 4) = 2
        let ds = tiny_dataset(&cfg);
        let mut model = build_model(&cfg, false).unwrap();
        let history = train(&mut model, &ds, TrainOptions::default()).unwrap();
        let modes: Vec<BlockMode> = history.iter().map(|r| r.mode).collect();
        assert_eq!(
            modes,
            vec![
                BlockMode::SelfAttention,
                BlockMode::SelfAttention,
                BlockMode::Transformed,
                BlockMode::Transformed
            ]
        );
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset(&cfg);
        let run = || {
            let mut model = build_model(&cfg, false).unwrap();
            let history = train(&mut model, &ds, TrainOptions::default()).unwrap();
            history_csv(&history)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_split_is_an_input_error() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset(&cfg);
        let model = build_model(&cfg, false).unwrap();
        let err = evaluate(&model, &[], &model.schedule_at(0), 1).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn threaded_evaluation_matches_single_threaded() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset(&cfg);
        let model = build_model(&cfg, false).unwrap();
        let schedule = model.schedule_at(0);
        let a = evaluate(&model, &ds.train, &schedule, 1).unwrap();
        let b = evaluate(&model, &ds.train, &schedule, 3).unwrap();
        assert_eq!(a.confusion.counts, b.confusion.counts);
        assert_eq!(a.miou.to_bits(), b.miou.to_bits());
    }
}
