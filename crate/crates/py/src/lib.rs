//! Python bindings for the perspective-learning core: tensors move as flat
//! `list[float]` buffers plus explicit shapes.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use dlpl_core::error::Error;
use dlpl_core::graph::Graph;
use dlpl_core::nn::{Init, ParamStore};
use dlpl_core::pdd::{pdd_forward, pdd_params, PddParams};
use dlpl_core::pht;
use dlpl_core::pia;
use dlpl_core::space;
use dlpl_core::tensor::Tensor;
use dlpl_core::vr::{reconstruct, reconstruction_loss, vr_params, VrParams};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(to_py_err)
}

/// Row-major matrix product.
#[pyfunction]
fn matmul(
    a: Vec<f64>,
    a_shape: (usize, usize),
    b: Vec<f64>,
    b_shape: (usize, usize),
) -> PyResult<Vec<f64>> {
    let mut g = Graph::new();
    let an = g.constant(tensor(vec![a_shape.0, a_shape.1], a)?);
    let bn = g.constant(tensor(vec![b_shape.0, b_shape.1], b)?);
    let c = g.matmul(an, bn).map_err(to_py_err)?;
    Ok(g.value(c).data().to_vec())
}

/// Row-wise softmax of `x / scale`.
#[pyfunction]
fn softmax_rows(x: Vec<f64>, rows: usize, cols: usize, scale: f64) -> PyResult<Vec<f64>> {
    let mut g = Graph::new();
    let xn = g.constant(tensor(vec![rows, cols], x)?);
    let y = g.softmax_rows(xn, scale).map_err(to_py_err)?;
    Ok(g.value(y).data().to_vec())
}

/// Deterministic 2-D sinusoidal position encoding, flattened `[h, w, c]`.
#[pyfunction]
fn pos_enc_2d(h: usize, w: usize, c: usize) -> PyResult<Vec<f64>> {
    Ok(dlpl_core::posenc::pos_enc_2d(h, w, c)
        .map_err(to_py_err)?
        .into_data())
}

/// Structure-tensor point-ness of a grayscale image, max-normalized.
#[pyfunction]
#[pyo3(signature = (image, h, w, window = 5, kappa = 0.05))]
fn structure_tensor_pointness(
    image: Vec<f64>,
    h: usize,
    w: usize,
    window: usize,
    kappa: f64,
) -> PyResult<Vec<f64>> {
    let img = tensor(vec![h, w], image)?;
    let map =
        dlpl_core::pointness::structure_tensor_pointness(&img, window, kappa).map_err(to_py_err)?;
    Ok(map.values().data().to_vec())
}

/// Weighted normalized-DLT homography estimation from point pairs.
/// Returns the canonical 3x3 matrix (row-major) and the degenerate flag.
#[pyfunction]
#[pyo3(signature = (src, dst, weights = None))]
fn estimate_homography(
    src: Vec<(f64, f64)>,
    dst: Vec<(f64, f64)>,
    weights: Option<Vec<f64>>,
) -> PyResult<(Vec<f64>, bool)> {
    if src.len() != dst.len() {
        return Err(PyValueError::new_err(format!(
            "{} source points vs {} destination points",
            src.len(),
            dst.len()
        )));
    }
    let w = weights.unwrap_or_else(|| vec![1.0; src.len()]);
    if w.len() != src.len() {
        return Err(PyValueError::new_err("weights length mismatch"));
    }
    let pairs = src
        .iter()
        .zip(&dst)
        .zip(&w)
        .map(|((s, d), &weight)| pht::CorrPair {
            src: [s.0, s.1],
            dst: [d.0, d.1],
            weight,
        })
        .collect();
    let h = pht::estimate_homography(&pht::Correspondences::from_pairs(pairs));
    Ok((h.h.iter().flatten().copied().collect(), h.degenerate))
}

/// Warp an `[m, m, c]` perspective grid through a 3x3 homography.
#[pyfunction]
fn warp_grid(p: Vec<f64>, m: usize, c: usize, h: Vec<f64>) -> PyResult<Vec<f64>> {
    if h.len() != 9 {
        return Err(PyValueError::new_err("homography must hold 9 values"));
    }
    let hom = pht::Homography::from_matrix([
        [h[0], h[1], h[2]],
        [h[3], h[4], h[5]],
        [h[6], h[7], h[8]],
    ])
    .map_err(to_py_err)?;
    let grid = tensor(vec![m, m, c], p)?;
    Ok(pht::warp_grid(&grid, &hom).map_err(to_py_err)?.into_data())
}

/// Gram-affinity reconstruction loss between two `[c, h, w]` feature maps.
#[pyfunction]
fn gram_loss(a: Vec<f64>, b: Vec<f64>, c: usize, h: usize, w: usize) -> PyResult<f64> {
    let mut g = Graph::new();
    let an = g.constant(tensor(vec![c, h, w], a)?);
    let bn = g.constant(tensor(vec![c, h, w], b)?);
    let l = reconstruction_loss(&mut g, an, bn).map_err(to_py_err)?;
    Ok(g.value(l).item())
}

/// Generate the synthetic shifted-view benchmark into a dataset file.
#[pyfunction]
#[pyo3(signature = (path, n_train, n_test, num_classes = 5, img_size = 48, warp_train = 0.1, warp_test = 0.4, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn generate_dataset(
    path: String,
    n_train: usize,
    n_test: usize,
    num_classes: usize,
    img_size: usize,
    warp_train: f64,
    warp_test: f64,
    seed: u64,
) -> PyResult<()> {
    let ds = dlpl_core::harness::generate_dataset(
        n_train,
        n_test,
        num_classes,
        img_size,
        warp_train,
        warp_test,
        seed,
    )
    .map_err(to_py_err)?;
    dlpl_core::harness::save_dataset(std::path::Path::new(&path), &ds).map_err(to_py_err)
}

/// K-entry EMA codebook with a Gaussian-mixture density.
#[pyclass(name = "PerspectiveSpace")]
struct PySpace {
    inner: space::PerspectiveSpace,
    shape: Vec<usize>,
}

#[pymethods]
impl PySpace {
    #[new]
    #[pyo3(signature = (k, m, c_prime, alpha = 0.9))]
    fn new(k: usize, m: usize, c_prime: usize, alpha: f64) -> PyResult<Self> {
        let shape = vec![m, m, c_prime];
        Ok(PySpace {
            inner: space::PerspectiveSpace::new(k, &shape, alpha).map_err(to_py_err)?,
            shape,
        })
    }

    /// Sequential EMA update over a batch of flattened representations.
    #[pyo3(signature = (batch, seed = 0))]
    fn ema_update(&mut self, batch: Vec<Vec<f64>>, seed: u64) -> PyResult<()> {
        let tensors: Vec<Tensor> = batch
            .into_iter()
            .map(|p| tensor(self.shape.clone(), p))
            .collect::<PyResult<_>>()?;
        self.inner
            .ema_update_batch(&tensors, seed)
            .map_err(to_py_err)
    }

    /// Mixture log-density and responsibilities of one representation.
    fn log_density_and_responsibilities(&self, p: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        let t = tensor(self.shape.clone(), p)?;
        self.inner
            .log_density_and_responsibilities(&t)
            .map_err(to_py_err)
    }

    fn entry(&self, k: usize) -> PyResult<Vec<f64>> {
        if k >= self.inner.k() {
            return Err(PyValueError::new_err(format!(
                "entry {k} out of range for K = {}",
                self.inner.k()
            )));
        }
        Ok(self.inner.entry(k).data().to_vec())
    }

    fn pi(&self) -> Vec<f64> {
        self.inner.pi().to_vec()
    }

    fn counts(&self) -> Vec<u64> {
        self.inner.counts().to_vec()
    }

    #[getter]
    fn initialized(&self) -> bool {
        self.inner.is_initialized()
    }
}

/// One perspective block: decomposition, reconstruction, transformation,
/// and fusion over a fixed feature-map shape.
#[pyclass(name = "DlplBlock")]
struct PyBlock {
    store: ParamStore,
    pdd: PddParams,
    vr: VrParams,
    c: usize,
    h: usize,
    w: usize,
    m: usize,
    c_prime: usize,
}

#[pymethods]
impl PyBlock {
    #[new]
    #[pyo3(signature = (c, h, w, m = 4, c_prime = 16, heads = 2, seed = 0))]
    fn new(
        c: usize,
        h: usize,
        w: usize,
        m: usize,
        c_prime: usize,
        heads: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let pdd =
            pdd_params(&mut store, &mut init, "pdd", c, c_prime, m, heads, 1.0).map_err(to_py_err)?;
        let grid = h.min(4);
        let vr = vr_params(
            &mut store,
            &mut init,
            "vr",
            m,
            c_prime,
            (c, h, w),
            (grid, grid),
            heads,
        )
        .map_err(to_py_err)?;
        Ok(PyBlock {
            store,
            pdd,
            vr,
            c,
            h,
            w,
            m,
            c_prime,
        })
    }

    /// Perspective representation of a feature map given a point-ness map.
    fn decompose(&self, i: Vec<f64>, s: Vec<f64>) -> PyResult<Vec<f64>> {
        let mut g = Graph::new();
        let inode = g.constant(tensor(vec![self.c, self.h, self.w], i)?);
        let s = tensor(vec![self.h, self.w], s)?;
        let p = pdd_forward(&mut g, &self.store, &self.pdd, inode, &s).map_err(to_py_err)?;
        Ok(g.value(p).data().to_vec())
    }

    /// Reconstruct a feature map from a perspective representation.
    fn reconstruct(&self, p: Vec<f64>) -> PyResult<Vec<f64>> {
        let mut g = Graph::new();
        let pn = g.constant(tensor(vec![self.m, self.m, self.c_prime], p)?);
        let rec = reconstruct(&mut g, &self.store, &self.vr, pn).map_err(to_py_err)?;
        Ok(g.value(rec).data().to_vec())
    }

    /// Cross-attention fusion of a feature map with a reconstructed view.
    fn fuse(&self, i: Vec<f64>, i_rec: Vec<f64>) -> PyResult<Vec<f64>> {
        let mut g = Graph::new();
        let a = g.constant(tensor(vec![self.c, self.h, self.w], i)?);
        let b = g.constant(tensor(vec![self.c, self.h, self.w], i_rec)?);
        let out = pia::pia(&mut g, a, b).map_err(to_py_err)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Responsibility-weighted homography transform of `p` against a space.
    #[pyo3(signature = (p, space, r_min = 0.01))]
    fn transform(&self, p: Vec<f64>, space: &PySpace, r_min: f64) -> PyResult<(Vec<f64>, bool)> {
        let pt = tensor(vec![self.m, self.m, self.c_prime], p)?;
        let mut g = Graph::new();
        let pn = g.constant(pt);
        let (out, plan) =
            pht::transform_perspective(&mut g, pn, &space.inner, r_min).map_err(to_py_err)?;
        Ok((g.value(out).data().to_vec(), plan.all_degenerate))
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.store.value_count()
    }
}

#[pymodule]
fn dlpl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(matmul, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_rows, m)?)?;
    m.add_function(wrap_pyfunction!(pos_enc_2d, m)?)?;
    m.add_function(wrap_pyfunction!(structure_tensor_pointness, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_homography, m)?)?;
    m.add_function(wrap_pyfunction!(warp_grid, m)?)?;
    m.add_function(wrap_pyfunction!(gram_loss, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_class::<PySpace>()?;
    m.add_class::<PyBlock>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
