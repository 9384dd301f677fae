//! Feature-map inspection: per-block grayscale dumps of the features before
//! and after each block plus the transformed-perspective heatmap, written as
//! portable graymaps.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::graph::Graph;
use crate::pia::PiaSchedule;
use crate::tensor::Tensor;

use super::dataset::SegSample;
use super::model::{BlockDiagnostics, Model};

/// Channel-mean of a `[C, H, W]` (or `[M, M, C']` with the channel last)
/// tensor, min-max normalized to [0, 1].
fn channel_mean_map(t: &Tensor, channel_first: bool) -> (usize, usize, Vec<f64>) {
    let s = t.shape();
    let (h, w, mean) = if channel_first {
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut m = vec![0.0; h * w];
        for ch in 0..c {
            for i in 0..h * w {
                m[i] += t.data()[ch * h * w + i];
            }
        }
        for v in m.iter_mut() {
            *v /= c as f64;
        }
        (h, w, m)
    } else {
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut m = vec![0.0; h * w];
        for i in 0..h * w {
            let row = &t.data()[i * c..(i + 1) * c];
            m[i] = row.iter().sum::<f64>() / c as f64;
        }
        (h, w, m)
    };
    let lo = mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let norm: Vec<f64> = if hi > lo {
        mean.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; mean.len()]
    };
    (h, w, norm)
}

/// Write one normalized map as an ASCII portable graymap.
pub fn write_pgm(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    let mut text = format!("P2\n{w} {h}\n255\n");
    for row in 0..h {
        let line: Vec<String> = (0..w)
            .map(|col| format!("{}", (values[row * w + col].clamp(0.0, 1.0) * 255.0).round()))
            .collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Per-block statistics accompanying a dump.
#[derive(Clone, Debug)]
pub struct BlockStats {
    pub block: usize,
    pub mode: String,
    pub rec_loss: f64,
    /// Shannon entropy of the mixture responsibilities, when the
    /// transformed path ran.
    pub responsibility_entropy: Option<f64>,
    pub degenerate: bool,
}

/// Dump `num_blocks x 3` graymaps for one sample: features before and after
/// each block and the (transformed) perspective heatmap.
pub fn dump_feature_maps(
    model: &Model,
    sample: &SegSample,
    schedule: &PiaSchedule,
    out_dir: &Path,
) -> Result<(Vec<PathBuf>, Vec<BlockStats>)> {
    std::fs::create_dir_all(out_dir)?;
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &sample.image, schedule, true)?;
    let mut files = Vec::new();
    let mut stats = Vec::new();
    for (b, diag) in fwd.diagnostics.iter().enumerate() {
        let BlockDiagnostics {
            mode,
            rec_loss,
            input,
            output,
            p_transformed,
            plan,
            ..
        } = diag;
        let (h, w, before) = channel_mean_map(input, true);
        let path = out_dir.join(format!("block{b}_before.pgm"));
        write_pgm(&path, h, w, &before)?;
        files.push(path);

        let (h, w, after) = channel_mean_map(output, true);
        let path = out_dir.join(format!("block{b}_after.pgm"));
        write_pgm(&path, h, w, &after)?;
        files.push(path);

        let (h, w, pwarp) = channel_mean_map(p_transformed, false);
        let path = out_dir.join(format!("block{b}_pwarp.pgm"));
        write_pgm(&path, h, w, &pwarp)?;
        files.push(path);

        let responsibility_entropy = plan.as_ref().map(|pl| {
            -pl.responsibilities
                .iter()
                .filter(|&&r| r > 0.0)
                .map(|&r| r * r.ln())
                .sum::<f64>()
        });
        stats.push(BlockStats {
            block: b,
            mode: mode.to_string(),
            rec_loss: *rec_loss,
            responsibility_entropy,
            degenerate: plan.as_ref().map(|pl| pl.all_degenerate).unwrap_or(false),
        });
    }
    Ok((files, stats))
}
