//! Perspective Discrete Decomposition: from a visual feature map and a
//! point-ness map to the latent perspective representation.
//!
//! The chain is point-ness attention, per-channel min-max normalization,
//! spire-shaped discretization into M levels, a level-pair co-occurrence
//! histogram, spatial statistics per level pair, an MLP to the perspective
//! width, and one self-attention pass over the M^2 level-pair nodes.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{
    affine_forward, affine_params, mha_forward, mha_params, mlp_forward, mlp_params, AffineParams,
    Init, MhaParams, MlpParams, ParamStore,
};
use crate::posenc::pos_enc_2d;
use crate::tensor::Tensor;

/// Per-channel discretization levels with uniform spacing.
#[derive(Clone, Debug)]
pub struct Levels {
    /// `[C, M]` level values; strictly increasing per channel unless the
    /// channel is degenerate.
    pub values: Tensor,
    /// Per-channel spacing `(max - min) / M`.
    pub spacing: Vec<f64>,
    /// Channels whose min equals their max.
    pub degenerate: Vec<bool>,
    pub m: usize,
}

/// Levels from the per-channel value range: `L_m = (m*max + (M-m)*min) / M`
/// for `m` in `1..=M`. A constant channel yields all levels at that value,
/// zero spacing, and the degenerate flag.
pub fn compute_levels(f: &Tensor, m: usize) -> Result<Levels> {
    if m < 2 {
        return Err(Error::Config(format!("level count must be >= 2, got {m}")));
    }
    let (c, n) = channel_view(f)?;
    let d = f.data();
    let mut values = vec![0.0; c * m];
    let mut spacing = vec![0.0; c];
    let mut degenerate = vec![false; c];
    for ch in 0..c {
        let row = &d[ch * n..(ch + 1) * n];
        let mn = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        spacing[ch] = (mx - mn) / m as f64;
        degenerate[ch] = mx == mn;
        for lvl in 1..=m {
            values[ch * m + lvl - 1] = (lvl as f64 * mx + (m - lvl) as f64 * mn) / m as f64;
        }
    }
    Ok(Levels {
        values: Tensor::new(vec![c, m], values)?,
        spacing,
        degenerate,
        m,
    })
}

/// Accept `[C, N]` or `[C, H, W]` and give the flattened channel view.
fn channel_view(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [c, n] => Ok((*c, *n)),
        [c, h, w] => Ok((*c, h * w)),
        s => Err(Error::Config(format!(
            "expected a channel-major feature tensor, got shape {s:?}"
        ))),
    }
}

/// Per-channel min-max normalization to [0, 1], differentiable through the
/// min and max via the subgradient at the first achieving element.
/// Degenerate channels map to zeros (and carry no gradient).
pub fn normalize_channels(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let (c, n) = g.value(x).dims2()?;
    let src = g.value(x).data();
    let mut data = vec![0.0; c * n];
    let mut amin = vec![0usize; c];
    let mut amax = vec![0usize; c];
    let mut inv_range = vec![0.0f64; c];
    for ch in 0..c {
        let row = &src[ch * n..(ch + 1) * n];
        let (mut mi, mut ma) = (0usize, 0usize);
        for (i, &v) in row.iter().enumerate() {
            if v < row[mi] {
                mi = i;
            }
            if v > row[ma] {
                ma = i;
            }
        }
        amin[ch] = mi;
        amax[ch] = ma;
        let range = row[ma] - row[mi];
        if range > 0.0 {
            inv_range[ch] = 1.0 / range;
            for i in 0..n {
                data[ch * n + i] = (row[i] - row[mi]) * inv_range[ch];
            }
        }
    }
    let value = Tensor::new(vec![c, n], data)?;
    Ok(g.push_custom(
        "normalize_channels",
        value,
        vec![x],
        Box::new(move |grad, _, out| {
            let gd = grad.data();
            let yd = out.data();
            let mut gx = vec![0.0; c * n];
            for ch in 0..c {
                let inv = inv_range[ch];
                if inv == 0.0 {
                    continue;
                }
                let grow = &gd[ch * n..(ch + 1) * n];
                let yrow = &yd[ch * n..(ch + 1) * n];
                let s1: f64 = grow.iter().sum();
                let s2: f64 = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                let out_row = &mut gx[ch * n..(ch + 1) * n];
                for i in 0..n {
                    out_row[i] = grow[i] * inv;
                }
                out_row[amin[ch]] -= (s1 - s2) * inv;
                out_row[amax[ch]] -= s2 * inv;
            }
            vec![Tensor::new(vec![c, n], gx).ok()]
        }),
    ))
}

/// Spire-shaped discretization. For each channel value and level,
/// `D = 1 - |L_m - F|` wherever `|L_m - F| < support_factor * spacing / 2`
/// (an exact hit on the upper boundary assigns to the lower level), else 0.
///
/// The levels are treated as constants by the backward pass; inside the
/// normalized chain they are locally constant in the input, so this is the
/// exact gradient there.
pub fn discretize(
    g: &mut Graph,
    fhat: NodeId,
    levels: &Levels,
    support_factor: f64,
) -> Result<NodeId> {
    if support_factor < 1.0 {
        return Err(Error::Config(format!(
            "support_factor must be >= 1, got {support_factor}"
        )));
    }
    let (c, n) = g.value(fhat).dims2()?;
    let (lc, m) = levels.values.dims2()?;
    if lc != c || m != levels.m {
        return Err(Error::dimension("discretize", &[c, n], levels.values.shape()));
    }
    let src = g.value(fhat).data();
    let lvl = levels.values.data().to_vec();
    let spacing = levels.spacing.clone();
    let mut data = vec![0.0; m * c * n];
    for ch in 0..c {
        let t = support_factor * spacing[ch] / 2.0;
        if !(t > 0.0) {
            continue; // degenerate channel: no active level
        }
        for i in 0..n {
            let v = src[ch * n + i];
            for k in 0..m {
                let u = lvl[ch * m + k] - v;
                if u.abs() < t || u == -t {
                    data[(k * c + ch) * n + i] = 1.0 - u.abs();
                }
            }
        }
    }
    let value = Tensor::new(vec![m, c, n], data)?;
    Ok(g.push_custom(
        "discretize",
        value,
        vec![fhat],
        Box::new(move |grad, parents, _| {
            let gd = grad.data();
            let f = parents[0].data();
            let mut gx = vec![0.0; c * n];
            for ch in 0..c {
                let t = support_factor * spacing[ch] / 2.0;
                if !(t > 0.0) {
                    continue;
                }
                for i in 0..n {
                    let v = f[ch * n + i];
                    let mut acc = 0.0;
                    for k in 0..m {
                        let u = lvl[ch * m + k] - v;
                        if u.abs() < t || u == -t {
                            // d(1 - |L - v|)/dv = sign(L - v)
                            acc += gd[(k * c + ch) * n + i] * u.signum();
                        }
                    }
                    gx[ch * n + i] = acc;
                }
            }
            vec![Tensor::new(vec![c, n], gx).ok()]
        }),
    ))
}

/// Level-pair co-occurrence: the per-channel outer product over the level
/// axis, `Dhat[m1, m2, c, n] = D[m1, c, n] * D[m2, c, n]`.
pub fn cooccurrence(g: &mut Graph, d: NodeId) -> Result<NodeId> {
    let shape = g.value(d).shape().to_vec();
    let (m, c, n) = match shape.as_slice() {
        [m, c, n] => (*m, *c, *n),
        _ => {
            return Err(Error::Config(format!(
                "cooccurrence expects [M, C, N], got {shape:?}"
            )))
        }
    };
    let src = g.value(d).data();
    let cn = c * n;
    let mut data = vec![0.0; m * m * cn];
    for m1 in 0..m {
        for m2 in 0..m {
            let dst = &mut data[(m1 * m + m2) * cn..(m1 * m + m2 + 1) * cn];
            let a = &src[m1 * cn..(m1 + 1) * cn];
            let b = &src[m2 * cn..(m2 + 1) * cn];
            for i in 0..cn {
                dst[i] = a[i] * b[i];
            }
        }
    }
    let value = Tensor::new(vec![m, m, c, n], data)?;
    Ok(g.push_custom(
        "cooccurrence",
        value,
        vec![d],
        Box::new(move |grad, parents, _| {
            let gd = grad.data();
            let dv = parents[0].data();
            let mut gx = vec![0.0; m * cn];
            for m1 in 0..m {
                for m2 in 0..m {
                    let grow = &gd[(m1 * m + m2) * cn..(m1 * m + m2 + 1) * cn];
                    for i in 0..cn {
                        let gval = grow[i];
                        if gval != 0.0 {
                            gx[m1 * cn + i] += gval * dv[m2 * cn + i];
                            gx[m2 * cn + i] += gval * dv[m1 * cn + i];
                        }
                    }
                }
            }
            vec![Tensor::new(vec![m, c, n], gx).ok()]
        }),
    ))
}

/// Spatial statistics per level pair: the normalized activation count plus
/// the position-encoding-weighted activation sum, one C-vector per node.
///
/// The count component of node `p` and channel `c` is the spatial sum of
/// `Dhat[p, c, :]` divided by the total over all nodes and positions of the
/// same channel (0 when the channel total is zero).
pub fn graph_node_stats(g: &mut Graph, dhat: NodeId, posenc: &Tensor) -> Result<NodeId> {
    let shape = g.value(dhat).shape().to_vec();
    let (m, c, n) = match shape.as_slice() {
        [m1, m2, c, n] if m1 == m2 => (*m1, *c, *n),
        _ => {
            return Err(Error::Config(format!(
                "graph_node_stats expects [M, M, C, N], got {shape:?}"
            )))
        }
    };
    let pe_shape = posenc.shape().to_vec();
    if pe_shape != [n, c] {
        return Err(Error::dimension("graph_node_stats", &shape, &pe_shape));
    }
    let nodes = m * m;
    let src = g.value(dhat).data();
    let pe = posenc.clone();
    let cn = c * n;

    // per-(node, channel) spatial sums and per-channel totals
    let mut sums = vec![0.0; nodes * c];
    for p in 0..nodes {
        for ch in 0..c {
            sums[p * c + ch] = src[p * cn + ch * n..p * cn + (ch + 1) * n].iter().sum();
        }
    }
    let mut totals = vec![0.0; c];
    for p in 0..nodes {
        for ch in 0..c {
            totals[ch] += sums[p * c + ch];
        }
    }

    let mut data = vec![0.0; nodes * c];
    let ped = pe.data();
    for p in 0..nodes {
        for ch in 0..c {
            let count = if totals[ch] > 0.0 {
                sums[p * c + ch] / totals[ch]
            } else {
                0.0
            };
            let mut pos = 0.0;
            let row = &src[p * cn + ch * n..p * cn + (ch + 1) * n];
            for i in 0..n {
                pos += row[i] * ped[i * c + ch];
            }
            data[p * c + ch] = count + pos;
        }
    }
    let value = Tensor::new(vec![nodes, c], data)?;
    Ok(g.push_custom(
        "graph_node_stats",
        value,
        vec![dhat],
        Box::new(move |grad, _, _| {
            let gd = grad.data();
            // recompute per-channel aggregates of the incoming gradient
            let mut gsum = vec![0.0; c]; // sum_p g[p,c] * sums[p,c]
            for p in 0..nodes {
                for ch in 0..c {
                    gsum[ch] += gd[p * c + ch] * sums[p * c + ch];
                }
            }
            let ped = pe.data();
            let mut gx = vec![0.0; nodes * cn];
            for p in 0..nodes {
                for ch in 0..c {
                    let gval = gd[p * c + ch];
                    let count_term = if totals[ch] > 0.0 {
                        (gval - gsum[ch] / totals[ch]) / totals[ch]
                    } else {
                        0.0
                    };
                    let out = &mut gx[p * cn + ch * n..p * cn + (ch + 1) * n];
                    for i in 0..n {
                        out[i] = count_term + gval * ped[i * c + ch];
                    }
                }
            }
            vec![Tensor::new(vec![m, m, c, n], gx).ok()]
        }),
    ))
}

/// Learned parameters of one PDD module.
#[derive(Clone, Debug)]
pub struct PddParams {
    /// Affine embedding of (score, position encoding) into C-wide tokens.
    pub embed: AffineParams,
    /// Dimension normalization C -> C'.
    pub phi: MlpParams,
    /// Self-attention over the M^2 level-pair nodes.
    pub agg: MhaParams,
    pub m: usize,
    pub c: usize,
    pub c_prime: usize,
    pub support_factor: f64,
}

pub fn pdd_params(
    store: &mut ParamStore,
    init: &mut Init,
    prefix: &str,
    c: usize,
    c_prime: usize,
    m: usize,
    heads: usize,
    support_factor: f64,
) -> Result<PddParams> {
    if c % 2 != 0 {
        return Err(Error::Config(format!(
            "feature width must be even for the position encoding, got {c}"
        )));
    }
    Ok(PddParams {
        embed: affine_params(store, init, &format!("{prefix}.embed"), c + 1, c),
        phi: mlp_params(store, init, &format!("{prefix}.phi"), c, &[c_prime])?,
        agg: mha_params(store, init, &format!("{prefix}.agg"), c_prime, heads)?,
        m,
        c,
        c_prime,
        support_factor,
    })
}

/// Embed the point-ness map into HW tokens of width C (learned affine map of
/// score and position encoding), then cross-attend the feature tokens onto
/// them: `F = softmax(I_tok S_tok^T / sqrt(C)) S_tok`.
pub fn pointness_attention(
    g: &mut Graph,
    store: &ParamStore,
    params: &PddParams,
    i: NodeId,
    s: &Tensor,
) -> Result<NodeId> {
    let shape = g.value(i).shape().to_vec();
    let (c, h, w) = match shape.as_slice() {
        [c, h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::Config(format!(
                "pointness_attention expects [C, H, W], got {shape:?}"
            )))
        }
    };
    let (sh, sw) = s.dims2()?;
    if (sh, sw) != (h, w) {
        return Err(Error::dimension("pointness_attention", &[h, w], &[sh, sw]));
    }
    if c != params.c {
        return Err(Error::Config(format!(
            "pointness_attention built for C={}, got C={c}",
            params.c
        )));
    }
    let n = h * w;
    let pe = pos_enc_2d(h, w, c)?;
    // [N, C+1] constant: column 0 is the score, the rest the position encoding.
    let mut tok = vec![0.0; n * (c + 1)];
    for idx in 0..n {
        tok[idx * (c + 1)] = s.data()[idx];
        tok[idx * (c + 1) + 1..(idx + 1) * (c + 1)]
            .copy_from_slice(&pe.data()[idx * c..(idx + 1) * c]);
    }
    let tok = g.constant(Tensor::new(vec![n, c + 1], tok)?);
    let s_tok = affine_forward(g, store, params.embed, tok)?;

    let i2 = g.reshape(i, vec![c, n])?;
    let i_tok = g.transpose(i2)?;
    let s_t = g.transpose(s_tok)?;
    let logits = g.matmul(i_tok, s_t)?;
    let attn = g.softmax_rows(logits, (c as f64).sqrt())?;
    let f_tok = g.matmul(attn, s_tok)?;
    let f_t = g.transpose(f_tok)?;
    g.reshape(f_t, vec![c, h, w])
}

/// Statistics plus dimension normalization: the perspective graph `[M^2, C']`.
pub fn perspective_graph(
    g: &mut Graph,
    store: &ParamStore,
    params: &PddParams,
    dhat: NodeId,
    posenc: &Tensor,
) -> Result<NodeId> {
    let stats = graph_node_stats(g, dhat, posenc)?;
    mlp_forward(g, store, &params.phi, stats)
}

/// One residual self-attention pass over the level-pair nodes, reshaped to
/// the `[M, M, C']` perspective representation.
pub fn perspective_aggregate(
    g: &mut Graph,
    store: &ParamStore,
    params: &PddParams,
    nodes: NodeId,
) -> Result<NodeId> {
    let attended = mha_forward(g, store, &params.agg, nodes, nodes, nodes)?;
    let p = g.add(attended, nodes)?;
    g.reshape(p, vec![params.m, params.m, params.c_prime])
}

/// The full decomposition: I and S to the perspective representation P.
pub fn pdd_forward(
    g: &mut Graph,
    store: &ParamStore,
    params: &PddParams,
    i: NodeId,
    s: &Tensor,
) -> Result<NodeId> {
    let shape = g.value(i).shape().to_vec();
    let (c, h, w) = match shape.as_slice() {
        [c, h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::Config(format!(
                "pdd_forward expects [C, H, W], got {shape:?}"
            )))
        }
    };
    let f = pointness_attention(g, store, params, i, s)?;
    let f2 = g.reshape(f, vec![c, h * w])?;
    let fhat = normalize_channels(g, f2)?;
    let levels = compute_levels(g.value(fhat), params.m)?;
    let d = discretize(g, fhat, &levels, params.support_factor)?;
    let dhat = cooccurrence(g, d)?;
    let pe = pos_enc_2d(h, w, c)?.reshaped(vec![h * w, c])?;
    let graph_nodes = perspective_graph(g, store, params, dhat, &pe)?;
    perspective_aggregate(g, store, params, graph_nodes)
}

/// Random feature input resampled until the whole normalized chain sits at
/// least `margin` away from discretization kinks and min/max ties. Gradcheck
/// helper shared by the test suites.

pub fn off_kink_input(
    store: &ParamStore,
    params: &PddParams,
    shape: &[usize],
    s: &Tensor,
    mut seed: u64,
    margin: f64,
) -> Tensor {
    loop {
        let cand = crate::gradcheck::random_tensor(shape, seed, -1.0, 1.0);
        let mut g = Graph::new();
        let i = g.input(cand.clone());
        let f = pointness_attention(&mut g, store, params, i, s).unwrap();
        let (c, h, w) = match g.value(f).shape() {
            [c, h, w] => (*c, *h, *w),
            _ => unreachable!(),
        };
        let f2 = g.reshape(f, vec![c, h * w]).unwrap();
        let fhat = normalize_channels(&mut g, f2).unwrap();
        if off_kink_ok(g.value(fhat), params.m, params.support_factor, margin) {
            return cand;
        }
        seed += 1000;
    }
}


fn off_kink_ok(fhat: &Tensor, m: usize, sf: f64, margin: f64) -> bool {
    let (c, n) = fhat.dims2().unwrap();
    let spacing = 1.0 / m as f64;
    let t = sf * spacing / 2.0;
    for ch in 0..c {
        let row = &fhat.data()[ch * n..(ch + 1) * n];
        // min/max achievers must be unique with margin
        let mut sorted: Vec<f64> = row.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted[1] - sorted[0] < margin || sorted[n - 1] - sorted[n - 2] < margin {
            return false;
        }
        for &v in row {
            for k in 0..m {
                let u = ((k + 1) as f64 * spacing - v).abs();
                // away from the spire peak and the support boundary
                if u < margin && u != 0.0 {
                    return false;
                }
                if (u - t).abs() < margin {
                    return false;
                }
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck_probed, random_tensor};

    #[test]
    fn levels_match_the_formula() {
        // min 0, max 1, M = 4 -> 0.25, 0.5, 0.75, 1.0
        let f = Tensor::new(vec![1, 3], vec![0.0, 0.4, 1.0]).unwrap();
        let l = compute_levels(&f, 4).unwrap();
        assert_eq!(l.values.data(), &[0.25, 0.5, 0.75, 1.0]);
        assert_eq!(l.spacing, vec![0.25]);
        assert!(!l.degenerate[0]);

        // min 2, max 6, M = 4 -> 3, 4, 5, 6
        let f = Tensor::new(vec![1, 4], vec![2.0, 5.0, 6.0, 3.0]).unwrap();
        let l = compute_levels(&f, 4).unwrap();
        assert_eq!(l.values.data(), &[3.0, 4.0, 5.0, 6.0]);

        // constant channel: all levels at the value, zero spacing, flagged
        let f = Tensor::new(vec![1, 3], vec![0.7, 0.7, 0.7]).unwrap();
        let l = compute_levels(&f, 4).unwrap();
        assert_eq!(l.values.data(), &[0.7, 0.7, 0.7, 0.7]);
        assert_eq!(l.spacing, vec![0.0]);
        assert!(l.degenerate[0]);

        assert!(compute_levels(&f, 1).is_err());
    }

    #[test]
    fn levels_strictly_increasing_with_top_at_max() {
        let f = random_tensor(&[3, 10], 42, -2.0, 5.0);
        let l = compute_levels(&f, 5).unwrap();
        for ch in 0..3 {
            let row = &f.data()[ch * 10..(ch + 1) * 10];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let vals = &l.values.data()[ch * 5..(ch + 1) * 5];
            for k in 1..5 {
                assert!(vals[k] > vals[k - 1]);
                assert!((vals[k] - vals[k - 1] - l.spacing[ch]).abs() < 1e-12);
            }
            assert!((vals[4] - mx).abs() < 1e-12, "top level must equal the max");
        }
    }

    #[test]
    fn discretize_hand_cases() {
        // row spanning [0, 1] so levels are 0.25, 0.5, 0.75, 1.0
        let f = Tensor::new(vec![1, 3], vec![0.0, 0.26, 1.0]).unwrap();
        let levels = compute_levels(&f, 4).unwrap();
        let mut g = Graph::new();
        let x = g.input(f);
        let d = discretize(&mut g, x, &levels, 1.0).unwrap();
        let v = g.value(d);
        assert_eq!(v.shape(), &[4, 1, 3]);
        // value 0.26: level 1 (0.25) gets 0.99, all others 0
        assert!((v.data()[1] - 0.99).abs() < 1e-12);
        for m in 1..4 {
            assert_eq!(v.data()[m * 3 + 1], 0.0);
        }
        // value 1.0: top level exactly 1
        assert_eq!(v.data()[3 * 3 + 2], 1.0);
        // value 0.0 sits below the first level's band: nothing active
        for m in 0..4 {
            assert_eq!(v.data()[m * 3], 0.0);
        }
    }

    #[test]
    fn discretize_midpoint_tie_goes_to_lower_level() {
        let f = Tensor::new(vec![1, 3], vec![0.0, 0.375, 1.0]).unwrap();
        let levels = compute_levels(&f, 4).unwrap();
        let mut g = Graph::new();
        let x = g.input(f);
        let d = discretize(&mut g, x, &levels, 1.0).unwrap();
        let v = g.value(d);
        // lower level (0.25) gets 1 - 0.125 = 0.875; level 0.5 gets nothing
        assert!((v.data()[1] - 0.875).abs() < 1e-12);
        assert_eq!(v.data()[3 + 1], 0.0);
    }

    #[test]
    fn discretize_partition_under_support_factor_one() {
        // exhaustive scan: at most one active level everywhere; exactly one
        // unless the normalized value sits in the uncovered bottom half-band
        let raw = random_tensor(&[2, 16], 77, -3.0, 3.0);
        let mut g = Graph::new();
        let x = g.input(raw);
        let fhat = normalize_channels(&mut g, x).unwrap();
        let levels = compute_levels(g.value(fhat), 4).unwrap();
        let fhat_vals = g.value(fhat).clone();
        let d = discretize(&mut g, fhat, &levels, 1.0).unwrap();
        let v = g.value(d);
        let half_band = 0.125; // spacing/2 with unit range and M = 4
        for ch in 0..2 {
            for i in 0..16 {
                let active = (0..4)
                    .filter(|&m| v.data()[(m * 2 + ch) * 16 + i] > 0.0)
                    .count();
                assert!(active <= 1, "more than one active level at ({ch},{i})");
                let val = fhat_vals.data()[ch * 16 + i];
                if val > half_band {
                    assert_eq!(active, 1, "value {val} should hit exactly one level");
                } else {
                    assert_eq!(active, 0, "value {val} lies in the uncovered band");
                }
            }
        }
    }

    #[test]
    fn discretize_rejects_small_support_factor() {
        let f = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let levels = compute_levels(&f, 2).unwrap();
        let mut g = Graph::new();
        let x = g.input(f);
        assert!(discretize(&mut g, x, &levels, 0.5).is_err());
    }

    #[test]
    fn cooccurrence_products_and_symmetry() {
        // support_factor 2 lets adjacent levels co-activate
        let f = Tensor::new(vec![1, 3], vec![0.0, 0.35, 1.0]).unwrap();
        let levels = compute_levels(&f, 4).unwrap();
        let mut g = Graph::new();
        let x = g.input(f);
        let d = discretize(&mut g, x, &levels, 2.0).unwrap();
        // value 0.35: level 0.25 gets 0.9, level 0.5 gets 0.85
        assert!((g.value(d).data()[1] - 0.9).abs() < 1e-12);
        assert!((g.value(d).data()[3 + 1] - 0.85).abs() < 1e-12);
        let dh = cooccurrence(&mut g, d).unwrap();
        let v = g.value(dh);
        assert_eq!(v.shape(), &[4, 4, 1, 3]);
        let at = |m1: usize, m2: usize, i: usize| v.data()[(m1 * 4 + m2) * 3 + i];
        assert!((at(0, 1, 1) - 0.9 * 0.85).abs() < 1e-12);
        for m1 in 0..4 {
            for m2 in 0..4 {
                for i in 0..3 {
                    assert_eq!(at(m1, m2, i), at(m2, m1, i), "symmetry broken");
                }
            }
        }
    }

    #[test]
    fn cooccurrence_off_diagonal_zero_at_support_factor_one() {
        let raw = random_tensor(&[3, 12], 5, -1.0, 1.0);
        let mut g = Graph::new();
        let x = g.input(raw);
        let fhat = normalize_channels(&mut g, x).unwrap();
        let levels = compute_levels(g.value(fhat), 4).unwrap();
        let d = discretize(&mut g, fhat, &levels, 1.0).unwrap();
        let dh = cooccurrence(&mut g, d).unwrap();
        let v = g.value(dh);
        let cn = 3 * 12;
        for m1 in 0..4 {
            for m2 in 0..4 {
                if m1 == m2 {
                    continue;
                }
                let block = &v.data()[(m1 * 4 + m2) * cn..(m1 * 4 + m2 + 1) * cn];
                assert!(block.iter().all(|&x| x == 0.0), "off-diagonal must vanish");
            }
        }
    }

    #[test]
    fn node_stats_counts_normalize() {
        let m = 2;
        let (c, n) = (3usize, 4usize);
        let zero_pe = Tensor::zeros(&[n, c]);

        // all mass at one level pair: that node's count is 1
        let mut dh = Tensor::zeros(&[m, m, c, n]);
        for i in 0..c * n {
            dh.data_mut()[2 * c * n + i] = 0.5; // node (1, 0)
        }
        let mut g = Graph::new();
        let x = g.input(dh);
        let stats = graph_node_stats(&mut g, x, &zero_pe).unwrap();
        let v = g.value(stats);
        assert_eq!(v.shape(), &[4, 3]);
        for ch in 0..c {
            assert!((v.at2(2, ch) - 1.0).abs() < 1e-12);
            assert_eq!(v.at2(0, ch), 0.0);
            assert_eq!(v.at2(1, ch), 0.0);
            assert_eq!(v.at2(3, ch), 0.0);
        }

        // uniform mass: every count is 1/M^2
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[m, m, c, n], 0.3));
        let stats = graph_node_stats(&mut g, x, &zero_pe).unwrap();
        for p in 0..4 {
            for ch in 0..c {
                assert!((g.value(stats).at2(p, ch) - 0.25).abs() < 1e-12);
            }
        }

        // random input: counts sum to 1 per channel
        let mut g = Graph::new();
        let x = g.input(random_tensor(&[m, m, c, n], 8, 0.0, 1.0));
        let stats = graph_node_stats(&mut g, x, &zero_pe).unwrap();
        for ch in 0..c {
            let s: f64 = (0..4).map(|p| g.value(stats).at2(p, ch)).sum();
            assert!((s - 1.0).abs() < 1e-9, "count sum {s} per channel");
        }

        // all-zero input: guarded division, all counts zero
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[m, m, c, n]));
        let stats = graph_node_stats(&mut g, x, &zero_pe).unwrap();
        assert!(g.value(stats).data().iter().all(|&v| v == 0.0));
    }

    fn test_pdd(seed: u64, c: usize, c_prime: usize, m: usize, sf: f64) -> (ParamStore, PddParams) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let p = pdd_params(&mut store, &mut init, "pdd", c, c_prime, m, 2, sf).unwrap();
        (store, p)
    }

    #[test]
    fn pointness_attention_uniform_scores_give_mean_token() {
        let (mut store, params) = test_pdd(1, 4, 8, 2, 1.0);
        // zero the position-encoding rows of the embedding: tokens depend
        // only on the (uniform) score, so all tokens coincide
        let w = store.get(params.embed.w).clone();
        let mut wd = w.data().to_vec();
        for r in 1..5 {
            for c in 0..4 {
                wd[r * 4 + c] = 0.0;
            }
        }
        *store.get_mut(params.embed.w) = Tensor::new(vec![5, 4], wd).unwrap();

        let mut g = Graph::new();
        let i = g.input(random_tensor(&[4, 3, 3], 10, -1.0, 1.0));
        let s = Tensor::filled(&[3, 3], 0.5);
        let f = pointness_attention(&mut g, &store, &params, i, &s).unwrap();
        let v = g.value(f);
        // every spatial position carries the same token
        for ch in 0..4 {
            let base = v.data()[ch * 9];
            for i in 1..9 {
                assert!((v.data()[ch * 9 + i] - base).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pointness_attention_single_position_passes_token_through() {
        let (store, params) = test_pdd(2, 4, 8, 2, 1.0);
        let s = Tensor::filled(&[1, 1], 0.7);
        let run = |iseed: u64| {
            let mut g = Graph::new();
            let i = g.input(random_tensor(&[4, 1, 1], iseed, -1.0, 1.0));
            let f = pointness_attention(&mut g, &store, &params, i, &s).unwrap();
            g.value(f).clone()
        };
        let a = run(20);
        let b = run(21);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12, "HW=1 output must not depend on I");
        }
    }

    #[test]
    fn pointness_attention_gradcheck() {
        let (store, params) = test_pdd(3, 4, 8, 2, 1.0);
        let s = random_tensor(&[3, 3], 30, 0.0, 1.0);
        for seed in [0u64, 1, 2] {
            let i = random_tensor(&[4, 3, 3], 40 + seed, -1.0, 1.0);
            let rep = gradcheck_probed("pointness_attention", &[i], 1e-5, seed, |g, ids| {
                pointness_attention(g, &store, &params, ids[0], &s)
            })
            .unwrap();
            assert!(rep.passed, "{rep}");
        }
    }

    #[test]
    fn aggregate_single_node_is_projection_plus_residual() {
        let (store, params) = test_pdd(4, 4, 8, 1, 1.0);
        let gn = random_tensor(&[1, 8], 50, -1.0, 1.0);
        let mut g = Graph::new();
        let x = g.input(gn.clone());
        let p = perspective_aggregate(&mut g, &store, &params, x).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 1, 8]);

        // independent recomputation: with one token the attention weight is 1
        let mut g2 = Graph::new();
        let x2 = g2.constant(gn);
        let o = mha_forward(&mut g2, &store, &params.agg, x2, x2, x2).unwrap();
        let want = g2.value(o).clone();
        for (a, (b, r)) in g
            .value(p)
            .data()
            .iter()
            .zip(want.data().iter().zip(g.value(x).data()))
        {
            assert!((a - (b + r)).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_is_permutation_equivariant() {
        let (store, params) = test_pdd(5, 4, 8, 2, 1.0);
        let nodes = random_tensor(&[4, 8], 60, -1.0, 1.0);
        let perm = [2usize, 0, 3, 1];

        let run = |input: &Tensor| {
            let mut g = Graph::new();
            let x = g.input(input.clone());
            let p = perspective_aggregate(&mut g, &store, &params, x).unwrap();
            g.value(p).reshaped(vec![4, 8]).unwrap()
        };
        let base = run(&nodes);
        let permuted_in = Tensor::from_fn(&[4, 8], |i| {
            let (r, c) = (i / 8, i % 8);
            nodes.data()[perm[r] * 8 + c]
        });
        let permuted_out = run(&permuted_in);
        for r in 0..4 {
            for c in 0..8 {
                let a = permuted_out.at2(r, c);
                let b = base.at2(perm[r], c);
                assert!((a - b).abs() < 1e-10, "permutation equivariance broken");
            }
        }
    }

    #[test]
    fn full_pdd_chain_gradcheck() {
        let (store, params) = test_pdd(6, 2, 6, 3, 1.0);
        let s = random_tensor(&[4, 4], 70, 0.0, 1.0);
        // batch of two feature maps, summed: a 2x3x4x4 chain check
        for seed in [0u64, 1, 2] {
            let a = off_kink_input(&store, &params, &[2, 4, 4], &s, 700 + seed, 2e-3);
            let b = off_kink_input(&store, &params, &[2, 4, 4], &s, 900 + seed, 2e-3);
            let rep = gradcheck_probed("pdd_forward", &[a, b], 1e-4, seed, |g, ids| {
                let pa = pdd_forward(g, &store, &params, ids[0], &s)?;
                let pb = pdd_forward(g, &store, &params, ids[1], &s)?;
                let pa2 = g.reshape(pa, vec![9, 6])?;
                let pb2 = g.reshape(pb, vec![9, 6])?;
                g.add(pa2, pb2)
            })
            .unwrap();
            assert!(rep.passed, "{rep}");
        }
    }

    #[test]
    fn pdd_forward_is_deterministic() {
        let (store, params) = test_pdd(7, 4, 8, 4, 1.0);
        let s = random_tensor(&[5, 5], 80, 0.0, 1.0);
        let i = random_tensor(&[4, 5, 5], 81, -1.0, 1.0);
        let run = || {
            let mut g = Graph::new();
            let inode = g.input(i.clone());
            let p = pdd_forward(&mut g, &store, &params, inode, &s).unwrap();
            g.value(p).clone()
        };
        let a = run();
        let b = run();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.shape(), &[4, 4, 8]);
        assert!(a.all_finite());
    }
}
