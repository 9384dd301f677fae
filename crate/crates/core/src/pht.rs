//! Perspective Homography Transformation: estimate plane-to-plane maps from
//! the current perspective to each codebook entry and mix the warped grids by
//! mixture responsibilities.
//!
//! Estimation is weighted, Hartley-normalized DLT over feature-matched grid
//! cell centers; the null direction comes from a Jacobi eigensolve of the
//! 9x9 normal matrix. Gradients flow through the bilinear warp only; the
//! estimated matrices and responsibilities are constants of the backward
//! pass.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::space::PerspectiveSpace;
use crate::tensor::Tensor;

/// A 3x3 projective transform in canonical scaling: unit Frobenius norm with
/// a nonnegative bottom-right entry. `degenerate` marks estimates that fell
/// back to the identity.
#[derive(Clone, Copy, Debug)]
pub struct Homography {
    pub h: [[f64; 3]; 3],
    pub degenerate: bool,
}

impl Homography {
    /// The identity map in canonical scaling (Frobenius norm 1).
    pub fn identity() -> Self {
        let s = 1.0 / 3.0f64.sqrt();
        Homography {
            h: [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]],
            degenerate: false,
        }
    }

    fn degenerate_identity() -> Self {
        let mut h = Self::identity();
        h.degenerate = true;
        h
    }

    /// Canonicalize an arbitrary nonzero matrix.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let mut norm = 0.0;
        for row in &m {
            for &v in row {
                norm += v * v;
            }
        }
        let norm = norm.sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Input("homography matrix must be finite and nonzero".into()));
        }
        let sign = if m[2][2] < 0.0 { -1.0 } else { 1.0 };
        let mut h = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                h[i][j] = sign * m[i][j] / norm;
            }
        }
        Ok(Homography {
            h,
            degenerate: false,
        })
    }

    pub fn frob_norm(&self) -> f64 {
        self.h
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn det(&self) -> f64 {
        let h = &self.h;
        h[0][0] * (h[1][1] * h[2][2] - h[1][2] * h[2][1])
            - h[0][1] * (h[1][0] * h[2][2] - h[1][2] * h[2][0])
            + h[0][2] * (h[1][0] * h[2][1] - h[1][1] * h[2][0])
    }

    /// Apply to a 2-D point with the homogeneous divide.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let h = &self.h;
        let u = h[0][0] * x + h[0][1] * y + h[0][2];
        let v = h[1][0] * x + h[1][1] * y + h[1][2];
        let w = h[2][0] * x + h[2][1] * y + h[2][2];
        (u / w, v / w)
    }

    /// Inverse via the adjugate, in canonical scaling.
    pub fn inverse(&self) -> Result<Homography> {
        let h = &self.h;
        let det = self.det();
        if det.abs() < 1e-300 {
            return Err(Error::Input("homography is singular".into()));
        }
        let adj = [
            [
                h[1][1] * h[2][2] - h[1][2] * h[2][1],
                h[0][2] * h[2][1] - h[0][1] * h[2][2],
                h[0][1] * h[1][2] - h[0][2] * h[1][1],
            ],
            [
                h[1][2] * h[2][0] - h[1][0] * h[2][2],
                h[0][0] * h[2][2] - h[0][2] * h[2][0],
                h[0][2] * h[1][0] - h[0][0] * h[1][2],
            ],
            [
                h[1][0] * h[2][1] - h[1][1] * h[2][0],
                h[0][1] * h[2][0] - h[0][0] * h[2][1],
                h[0][0] * h[1][1] - h[0][1] * h[1][0],
            ],
        ];
        Homography::from_matrix(adj)
    }

    /// Composition `self * other` (apply `other` first).
    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    m[i][j] += self.h[i][k] * other.h[k][j];
                }
            }
        }
        Homography::from_matrix(m)
    }

    /// Max absolute entry difference after canonical alignment.
    pub fn frob_distance(&self, other: &Homography) -> f64 {
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let d = self.h[i][j] - other.h[i][j];
                acc += d * d;
            }
        }
        acc.sqrt()
    }
}

/// One matched pair of plane points in normalized [-1, 1]^2 coordinates.
#[derive(Clone, Copy, Debug)]
pub struct CorrPair {
    pub src: [f64; 2],
    pub dst: [f64; 2],
    pub weight: f64,
}

/// Weighted grid-cell correspondences between two perspective grids.
#[derive(Clone, Debug)]
pub struct Correspondences {
    pub pairs: Vec<CorrPair>,
    /// Fewer than four usable (positive-weight) pairs.
    pub degenerate: bool,
}

impl Correspondences {
    pub fn from_pairs(pairs: Vec<CorrPair>) -> Self {
        let usable = pairs.iter().filter(|p| p.weight > 0.0).count();
        Correspondences {
            pairs,
            degenerate: usable < 4,
        }
    }
}

/// Center of grid cell `(row, col)` of an MxM grid in [-1, 1]^2; x follows
/// the column, y the row.
pub fn cell_center(m: usize, row: usize, col: usize) -> [f64; 2] {
    [
        -1.0 + (2.0 * col as f64 + 1.0) / m as f64,
        -1.0 + (2.0 * row as f64 + 1.0) / m as f64,
    ]
}

fn perspective_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m1, m2, c] if m1 == m2 => Ok((*m1, *c)),
        s => Err(Error::Config(format!(
            "expected a square [M, M, C'] perspective tensor, got {s:?}"
        ))),
    }
}

/// Match every source cell to its most cosine-similar cell of the target
/// grid; weights are similarities clamped to [0, 1]. Zero-norm features give
/// weight 0.
pub fn match_cells(p: &Tensor, entry: &Tensor) -> Result<Correspondences> {
    let (m, c) = perspective_dims(p)?;
    let (me, ce) = perspective_dims(entry)?;
    if (m, c) != (me, ce) {
        return Err(Error::dimension("match_cells", p.shape(), entry.shape()));
    }
    let cells = m * m;
    let norm = |d: &[f64], i: usize| -> f64 {
        d[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let mut pairs = Vec::with_capacity(cells);
    for sc in 0..cells {
        let sn = norm(p.data(), sc);
        let mut best = 0usize;
        let mut best_cos = f64::NEG_INFINITY;
        for tc in 0..cells {
            let tn = norm(entry.data(), tc);
            let cos = if sn > 0.0 && tn > 0.0 {
                let dot: f64 = p.data()[sc * c..(sc + 1) * c]
                    .iter()
                    .zip(&entry.data()[tc * c..(tc + 1) * c])
                    .map(|(a, b)| a * b)
                    .sum();
                dot / (sn * tn)
            } else {
                0.0
            };
            if cos > best_cos {
                best_cos = cos;
                best = tc;
            }
        }
        pairs.push(CorrPair {
            src: cell_center(m, sc / m, sc % m),
            dst: cell_center(m, best / m, best % m),
            weight: best_cos.clamp(0.0, 1.0),
        });
    }
    Ok(Correspondences::from_pairs(pairs))
}

/// Hartley normalization: translate the centroid to the origin and scale the
/// mean distance to sqrt(2). Returns the transform as a 3x3 matrix.
fn hartley_transform(points: &[[f64; 2]]) -> Option<[[f64; 3]; 3]> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist < 1e-12 {
        return None;
    }
    let s = 2.0f64.sqrt() / mean_dist;
    Some([[s, 0.0, -s * cx], [0.0, s, -s * cy], [0.0, 0.0, 1.0]])
}

fn apply3(t: &[[f64; 3]; 3], p: [f64; 2]) -> [f64; 2] {
    let w = t[2][0] * p[0] + t[2][1] * p[1] + t[2][2];
    [
        (t[0][0] * p[0] + t[0][1] * p[1] + t[0][2]) / w,
        (t[1][0] * p[0] + t[1][1] * p[1] + t[1][2]) / w,
    ]
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                m[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    m
}

fn mat3_inv(h: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = h[0][0] * (h[1][1] * h[2][2] - h[1][2] * h[2][1])
        - h[0][1] * (h[1][0] * h[2][2] - h[1][2] * h[2][0])
        + h[0][2] * (h[1][0] * h[2][1] - h[1][1] * h[2][0]);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv_det = 1.0 / det;
    Some([
        [
            (h[1][1] * h[2][2] - h[1][2] * h[2][1]) * inv_det,
            (h[0][2] * h[2][1] - h[0][1] * h[2][2]) * inv_det,
            (h[0][1] * h[1][2] - h[0][2] * h[1][1]) * inv_det,
        ],
        [
            (h[1][2] * h[2][0] - h[1][0] * h[2][2]) * inv_det,
            (h[0][0] * h[2][2] - h[0][2] * h[2][0]) * inv_det,
            (h[0][2] * h[1][0] - h[0][0] * h[1][2]) * inv_det,
        ],
        [
            (h[1][0] * h[2][1] - h[1][1] * h[2][0]) * inv_det,
            (h[0][1] * h[2][0] - h[0][0] * h[2][1]) * inv_det,
            (h[0][0] * h[1][1] - h[0][1] * h[1][0]) * inv_det,
        ],
    ])
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns, both unsorted).
fn jacobi_eigen_sym(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off < 1e-300 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let tau = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    (eigvals, v)
}

/// Weighted normalized DLT. Falls back to the flagged normalized identity
/// when fewer than four usable pairs exist or the system is rank-deficient.
pub fn estimate_homography(corr: &Correspondences) -> Homography {
    let usable: Vec<&CorrPair> = corr.pairs.iter().filter(|p| p.weight > 0.0).collect();
    if usable.len() < 4 {
        return Homography::degenerate_identity();
    }
    let src: Vec<[f64; 2]> = usable.iter().map(|p| p.src).collect();
    let dst: Vec<[f64; 2]> = usable.iter().map(|p| p.dst).collect();
    let (ts, td) = match (hartley_transform(&src), hartley_transform(&dst)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Homography::degenerate_identity(),
    };

    // normal matrix of the 2-rows-per-pair system, rows scaled by weights
    let mut ata = vec![0.0; 81];
    let mut add_row = |row: [f64; 9]| {
        for i in 0..9 {
            for j in 0..9 {
                ata[i * 9 + j] += row[i] * row[j];
            }
        }
    };
    for p in &usable {
        let s = apply3(&ts, p.src);
        let d = apply3(&td, p.dst);
        let w = p.weight;
        let (x, y) = (s[0], s[1]);
        let (u, v) = (d[0], d[1]);
        add_row([
            -w * x,
            -w * y,
            -w,
            0.0,
            0.0,
            0.0,
            w * u * x,
            w * u * y,
            w * u,
        ]);
        add_row([
            0.0,
            0.0,
            0.0,
            -w * x,
            -w * y,
            -w,
            w * v * x,
            w * v * y,
            w * v,
        ]);
    }

    let (eigvals, eigvecs) = jacobi_eigen_sym(ata, 9);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| eigvals[a].abs().partial_cmp(&eigvals[b].abs()).unwrap());
    let max_ev = eigvals[order[8]].abs();
    // second-smallest eigenvalue near zero means the null space is not
    // one-dimensional: under-determined correspondences
    if max_ev <= 0.0 || eigvals[order[1]].abs() < 1e-12 * max_ev {
        return Homography::degenerate_identity();
    }
    let col = order[0];
    let hn = [
        [eigvecs[col], eigvecs[9 + col], eigvecs[2 * 9 + col]],
        [
            eigvecs[3 * 9 + col],
            eigvecs[4 * 9 + col],
            eigvecs[5 * 9 + col],
        ],
        [
            eigvecs[6 * 9 + col],
            eigvecs[7 * 9 + col],
            eigvecs[8 * 9 + col],
        ],
    ];

    // denormalize: H = Td^-1 * Hn * Ts
    let td_inv = match mat3_inv(&td) {
        Some(m) => m,
        None => return Homography::degenerate_identity(),
    };
    let h = mat3_mul(&td_inv, &mat3_mul(&hn, &ts));
    match Homography::from_matrix(h) {
        Ok(hom) if hom.det().abs() > 1e-12 => hom,
        _ => Homography::degenerate_identity(),
    }
}

/// Bilinear sampling taps of one warped grid: for each target cell, the
/// source taps of `h^-1 (target center)`. Points outside [-1, 1]^2
/// contribute nothing.
fn warp_taps(m: usize, h: &Homography) -> Result<Vec<Vec<(usize, f64)>>> {
    let hinv = h.inverse()?;
    let mut taps = Vec::with_capacity(m * m);
    for row in 0..m {
        for col in 0..m {
            let c = cell_center(m, row, col);
            let (sx, sy) = hinv.apply(c[0], c[1]);
            let mut cell_taps = Vec::new();
            if sx.abs() <= 1.0 && sy.abs() <= 1.0 {
                // continuous grid coordinates over cell centers
                let gx = (sx + 1.0) * m as f64 / 2.0 - 0.5;
                let gy = (sy + 1.0) * m as f64 / 2.0 - 0.5;
                let x0 = gx.floor();
                let y0 = gy.floor();
                let fx = gx - x0;
                let fy = gy - y0;
                for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                    for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                        let yy = y0 as i64 + dy;
                        let xx = x0 as i64 + dx;
                        let w = wy * wx;
                        if w != 0.0
                            && (0..m as i64).contains(&yy)
                            && (0..m as i64).contains(&xx)
                        {
                            cell_taps.push(((yy as usize) * m + xx as usize, w));
                        }
                    }
                }
            }
            taps.push(cell_taps);
        }
    }
    Ok(taps)
}

/// Warp a perspective grid through a homography: each target cell center is
/// pulled back through `h^-1` and bilinearly interpolated over the source
/// grid, with zeros outside [-1, 1]^2.
pub fn warp_grid(p: &Tensor, h: &Homography) -> Result<Tensor> {
    let (m, c) = perspective_dims(p)?;
    let taps = warp_taps(m, h)?;
    let mut out = vec![0.0; m * m * c];
    for (t, cell_taps) in taps.iter().enumerate() {
        for &(s, w) in cell_taps {
            for ch in 0..c {
                out[t * c + ch] += w * p.data()[s * c + ch];
            }
        }
    }
    Tensor::new(vec![m, m, c], out)
}

/// The frozen constants of one perspective transformation: renormalized
/// responsibilities with their estimated homographies.
#[derive(Clone, Debug)]
pub struct TransformPlan {
    pub components: Vec<(f64, Homography)>,
    /// Raw responsibilities over all K entries (diagnostics).
    pub responsibilities: Vec<f64>,
    /// Every included component fell back to the identity.
    pub all_degenerate: bool,
}

impl TransformPlan {
    /// An explicit plan (mainly for tests and frozen-plan gradchecks).
    pub fn from_components(components: Vec<(f64, Homography)>) -> Self {
        let all_degenerate = components.iter().all(|(_, h)| h.degenerate);
        TransformPlan {
            responsibilities: components.iter().map(|(w, _)| *w).collect(),
            components,
            all_degenerate,
        }
    }

    /// Shannon entropy of the included component weights (nats).
    pub fn weight_entropy(&self) -> f64 {
        -self
            .components
            .iter()
            .map(|(w, _)| if *w > 0.0 { w * w.ln() } else { 0.0 })
            .sum::<f64>()
    }
}

/// Build the transformation plan for `p` against a frozen space snapshot:
/// responsibilities from the mixture, matching + DLT per component above the
/// responsibility cutoff, weights renormalized over the included set.
pub fn plan_transform(space: &PerspectiveSpace, p: &Tensor, r_min: f64) -> Result<TransformPlan> {
    let (_, resp) = space.log_density_and_responsibilities(p)?;
    let included: Vec<usize> = (0..space.k()).filter(|&k| resp[k] > r_min).collect();
    if included.is_empty() {
        // responsibilities sum to 1, so this needs r_min >= 1/K
        return Err(Error::Config(format!(
            "responsibility cutoff {r_min} excluded every component"
        )));
    }
    let total: f64 = included.iter().map(|&k| resp[k]).sum();
    let mut components = Vec::with_capacity(included.len());
    for &k in &included {
        let corr = match_cells(p, space.entry(k))?;
        let h = estimate_homography(&corr);
        components.push((resp[k] / total, h));
    }
    let all_degenerate = components.iter().all(|(_, h)| h.degenerate);
    Ok(TransformPlan {
        components,
        responsibilities: resp,
        all_degenerate,
    })
}

/// Apply a frozen plan as one differentiable op: `P' = sum_k w_k W_k P`
/// where each `W_k` is the bilinear warp matrix of component k. Linear in P;
/// the backward pass scatters through the same taps.
pub fn apply_transform_plan(g: &mut Graph, p: NodeId, plan: &TransformPlan) -> Result<NodeId> {
    let (m, c) = perspective_dims(g.value(p))?;
    let cells = m * m;
    // merge the per-component taps into one weighted table
    let mut merged: Vec<Vec<(usize, f64)>> = vec![Vec::new(); cells];
    for (w, h) in &plan.components {
        let taps = warp_taps(m, h)?;
        for (t, cell_taps) in taps.into_iter().enumerate() {
            for (s, tap_w) in cell_taps {
                merged[t].push((s, w * tap_w));
            }
        }
    }
    let src = g.value(p).data();
    let mut out = vec![0.0; cells * c];
    for (t, taps) in merged.iter().enumerate() {
        for &(s, w) in taps {
            for ch in 0..c {
                out[t * c + ch] += w * src[s * c + ch];
            }
        }
    }
    let value = Tensor::new(vec![m, m, c], out)?;
    Ok(g.push_custom(
        "transform_perspective",
        value,
        vec![p],
        Box::new(move |grad, _, _| {
            let gd = grad.data();
            let mut gx = vec![0.0; cells * c];
            for (t, taps) in merged.iter().enumerate() {
                for &(s, w) in taps {
                    for ch in 0..c {
                        gx[s * c + ch] += w * gd[t * c + ch];
                    }
                }
            }
            vec![Tensor::new(vec![m, m, c], gx).ok()]
        }),
    ))
}

/// Plan and apply in one step, returning the plan for diagnostics. When all
/// included components are degenerate the result is exactly `P` (every
/// component is the flagged identity).
pub fn transform_perspective(
    g: &mut Graph,
    p: NodeId,
    space: &PerspectiveSpace,
    r_min: f64,
) -> Result<(NodeId, TransformPlan)> {
    let plan = plan_transform(space, g.value(p), r_min)?;
    let out = apply_transform_plan(g, p, &plan)?;
    Ok((out, plan))
}
