//! Bilinear resampling shared by the pointness resizer, the reconstruction
//! upsampler, and the segmentation head.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Precomputed gather table: for every destination pixel, up to four
/// `(source index, weight)` taps with weights summing to 1.
#[derive(Clone, Debug)]
pub struct BilinearTable {
    pub src_h: usize,
    pub src_w: usize,
    pub dst_h: usize,
    pub dst_w: usize,
    taps: Vec<[(usize, f64); 4]>,
}

impl BilinearTable {
    pub fn new(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Self {
        let mut taps = Vec::with_capacity(dst_h * dst_w);
        for dy in 0..dst_h {
            let sy = ((dy as f64 + 0.5) * src_h as f64 / dst_h as f64 - 0.5)
                .clamp(0.0, (src_h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(src_h - 1);
            let fy = sy - y0 as f64;
            for dx in 0..dst_w {
                let sx = ((dx as f64 + 0.5) * src_w as f64 / dst_w as f64 - 0.5)
                    .clamp(0.0, (src_w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(src_w - 1);
                let fx = sx - x0 as f64;
                taps.push([
                    (y0 * src_w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * src_w + x1, (1.0 - fy) * fx),
                    (y1 * src_w + x0, fy * (1.0 - fx)),
                    (y1 * src_w + x1, fy * fx),
                ]);
            }
        }
        BilinearTable {
            src_h,
            src_w,
            dst_h,
            dst_w,
            taps,
        }
    }

    /// Resample one plane.
    pub fn apply_plane(&self, src: &[f64], dst: &mut [f64]) {
        for (out, taps) in dst.iter_mut().zip(&self.taps) {
            *out = taps.iter().map(|&(idx, w)| w * src[idx]).sum();
        }
    }

    /// Transpose of [`Self::apply_plane`]: scatter destination gradients back
    /// onto the source plane.
    pub fn scatter_plane(&self, dst_grad: &[f64], src_grad: &mut [f64]) {
        for (g, taps) in dst_grad.iter().zip(&self.taps) {
            for &(idx, w) in taps {
                src_grad[idx] += w * g;
            }
        }
    }
}

/// Resize a 2-D map (used for point-ness maps; no gradient).
pub fn resize_bilinear(src: &Tensor, dst_h: usize, dst_w: usize) -> Result<Tensor> {
    let (h, w) = src.dims2()?;
    let table = BilinearTable::new(h, w, dst_h, dst_w);
    let mut out = vec![0.0; dst_h * dst_w];
    table.apply_plane(src.data(), &mut out);
    Tensor::new(vec![dst_h, dst_w], out)
}

/// Differentiable channel-wise bilinear upsampling of a `[C, h, w]` tensor.
pub fn upsample_bilinear(g: &mut Graph, x: NodeId, dst_h: usize, dst_w: usize) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let (c, h, w) = match shape.as_slice() {
        [c, h, w] => (*c, *h, *w),
        _ => {
            return Err(crate::error::Error::Config(format!(
                "upsample_bilinear expects [C, H, W], got {shape:?}"
            )))
        }
    };
    let table = BilinearTable::new(h, w, dst_h, dst_w);
    let src = g.value(x).data();
    let mut data = vec![0.0; c * dst_h * dst_w];
    for ch in 0..c {
        table.apply_plane(
            &src[ch * h * w..(ch + 1) * h * w],
            &mut data[ch * dst_h * dst_w..(ch + 1) * dst_h * dst_w],
        );
    }
    let value = Tensor::new(vec![c, dst_h, dst_w], data)?;
    Ok(g.push_custom(
        "upsample_bilinear",
        value,
        vec![x],
        Box::new(move |grad, _, _| {
            let gd = grad.data();
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                table.scatter_plane(
                    &gd[ch * dst_h * dst_w..(ch + 1) * dst_h * dst_w],
                    &mut gx[ch * h * w..(ch + 1) * h * w],
                );
            }
            vec![Tensor::new(vec![c, h, w], gx).ok()]
        }),
    ))
}
