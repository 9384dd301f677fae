//! Point-ness maps: per-pixel keypoint saliency feeding the perspective
//! decomposition.
//!
//! The default provider is a structure-tensor (Harris-style) corner response
//! computed from Sobel gradients; precomputed maps can also be loaded from a
//! tensor bundle so externally produced detector outputs can be injected.

use std::path::Path;

use crate::bundle;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointnessSource {
    StructureTensor,
    LoadedWeights,
}

/// Nonnegative saliency scores over an image grid, max-normalized to [0, 1].
#[derive(Clone, Debug)]
pub struct PointnessMap {
    values: Tensor,
    source: PointnessSource,
}

impl PointnessMap {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn source(&self) -> PointnessSource {
        self.source
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims2().expect("pointness maps are 2-D")
    }
}

/// Rec. 601 luminance of a `[3, H, W]` image.
pub fn luminance(rgb: &Tensor) -> Result<Tensor> {
    let shape = rgb.shape();
    let (h, w) = match shape {
        [3, h, w] => (*h, *w),
        _ => {
            return Err(Error::Config(format!(
                "luminance expects [3, H, W], got {shape:?}"
            )))
        }
    };
    let n = h * w;
    let d = rgb.data();
    let mut out = vec![0.0; n];
    for i in 0..n {
        out[i] = 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i];
    }
    Tensor::new(vec![h, w], out)
}

/// Raw clamped corner response `max(det(M) - kappa * trace(M)^2, 0)` before
/// normalization. Useful for equivariance checks that the global
/// normalization would hide.
pub fn structure_tensor_response(image: &Tensor, window: usize, kappa: f64) -> Result<Tensor> {
    let (h, w) = image.dims2()?;
    if window < 3 || window % 2 == 0 {
        return Err(Error::Config(format!(
            "structure tensor window must be odd and >= 3, got {window}"
        )));
    }
    if !(kappa > 0.0 && kappa < 0.25) {
        return Err(Error::Config(format!(
            "structure tensor kappa must lie in (0, 0.25), got {kappa}"
        )));
    }
    if h < window || w < window {
        return Err(Error::Input(format!(
            "image {h}x{w} is smaller than the {window}x{window} smoothing window"
        )));
    }

    let (gx, gy) = sobel(image.data(), h, w);
    let mut gxx = vec![0.0; h * w];
    let mut gxy = vec![0.0; h * w];
    let mut gyy = vec![0.0; h * w];
    for i in 0..h * w {
        gxx[i] = gx[i] * gx[i];
        gxy[i] = gx[i] * gy[i];
        gyy[i] = gy[i] * gy[i];
    }
    let sxx = box_filter(&gxx, h, w, window);
    let sxy = box_filter(&gxy, h, w, window);
    let syy = box_filter(&gyy, h, w, window);

    let mut resp = vec![0.0; h * w];
    for i in 0..h * w {
        let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
        let tr = sxx[i] + syy[i];
        resp[i] = (det - kappa * tr * tr).max(0.0);
    }
    Tensor::new(vec![h, w], resp)
}

/// Harris-style point-ness: clamped corner response, max-normalized so the
/// strongest pixel scores 1 (all zeros on a constant image).
pub fn structure_tensor_pointness(image: &Tensor, window: usize, kappa: f64) -> Result<PointnessMap> {
    let mut resp = structure_tensor_response(image, window, kappa)?;
    let max = resp.data().iter().fold(0.0f64, |a, &b| a.max(b));
    if max > 0.0 {
        for v in resp.data_mut() {
            *v /= max;
        }
    }
    Ok(PointnessMap {
        values: resp,
        source: PointnessSource::StructureTensor,
    })
}

/// Load a precomputed map from a tensor bundle holding a single `pointness`
/// record; values are clamped to [0, 1].
pub fn load_pointness(path: &Path, expected_h: usize, expected_w: usize) -> Result<PointnessMap> {
    let records = bundle::read_bundle(path)?;
    let map = bundle::find_record(&records, "pointness").ok_or_else(|| {
        Error::Format(format!(
            "{}: no \"pointness\" record in bundle",
            path.display()
        ))
    })?;
    let (h, w) = map.dims2().map_err(|_| {
        Error::Format(format!(
            "{}: pointness record must be 2-D, got {:?}",
            path.display(),
            map.shape()
        ))
    })?;
    if (h, w) != (expected_h, expected_w) {
        return Err(Error::Input(format!(
            "pointness map is {h}x{w} but the current image is {expected_h}x{expected_w}"
        )));
    }
    Ok(PointnessMap {
        values: map.map(|v| v.clamp(0.0, 1.0)),
        source: PointnessSource::LoadedWeights,
    })
}

/// Write a map in the format [`load_pointness`] reads.
pub fn save_pointness(path: &Path, map: &PointnessMap) -> Result<()> {
    bundle::write_bundle(path, &[("pointness".to_string(), map.values.clone())])
}

/// 3x3 Sobel gradients with replicated borders.
fn sobel(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |i: isize, j: isize| -> f64 {
        let ii = i.clamp(0, h as isize - 1) as usize;
        let jj = j.clamp(0, w as isize - 1) as usize;
        img[ii * w + jj]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let idx = i as usize * w + j as usize;
            gx[idx] = at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1)
                - at(i - 1, j - 1)
                - 2.0 * at(i, j - 1)
                - at(i + 1, j - 1);
            gy[idx] = at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1)
                - at(i - 1, j - 1)
                - 2.0 * at(i - 1, j)
                - at(i - 1, j + 1);
        }
    }
    (gx, gy)
}

/// Box average over `window x window` with replicated borders.
fn box_filter(src: &[f64], h: usize, w: usize, window: usize) -> Vec<f64> {
    let r = (window / 2) as isize;
    let norm = 1.0 / (window * window) as f64;
    let at = |i: isize, j: isize| -> f64 {
        let ii = i.clamp(0, h as isize - 1) as usize;
        let jj = j.clamp(0, w as isize - 1) as usize;
        src[ii * w + jj]
    };
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    acc += at(i + di, j + dj);
                }
            }
            out[i as usize * w + j as usize] = acc * norm;
        }
    }
    out
}
