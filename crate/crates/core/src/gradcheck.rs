//! Central finite-difference verification of hand-written backwards.
//!
//! Every differentiable op in the crate gets checked against this oracle.
//! The numeric side never touches the analytic backward path: it only
//! re-runs forwards at perturbed inputs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Central-difference step, 64-bit.
pub const FD_STEP: f64 = 1e-5;

/// The single worst coordinate found by a check.
#[derive(Clone, Debug)]
pub struct WorstCoordinate {
    pub input_index: usize,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub op: String,
    pub tolerance: f64,
    /// Max relative error per input tensor.
    pub per_input: Vec<f64>,
    pub worst: Option<WorstCoordinate>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_input.iter().fold(0.0f64, |a, &b| a.max(b))
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.passed {
            write!(
                f,
                "gradcheck {}: ok (max rel err {:.3e}, tolerance {:.1e})",
                self.op,
                self.max_rel_err(),
                self.tolerance
            )
        } else {
            match &self.worst {
                Some(w) => write!(
                    f,
                    "gradcheck {}: FAILED rel err {:.3e} > {:.1e} at input {} coordinate {} \
                     (analytic {:.9e}, numeric {:.9e})",
                    self.op, w.rel_err, self.tolerance, w.input_index, w.coordinate, w.analytic, w.numeric
                ),
                None => write!(f, "gradcheck {}: FAILED", self.op),
            }
        }
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Check the builder's backward against central finite differences.
///
/// `build` receives fresh input leaves each call and must return a scalar
/// node. Inputs should sit at least ~1e-3 away from any kink of the op under
/// test; the oracle has no way to tell a kink from a wrong backward.
pub fn gradcheck<F>(op: &str, inputs: &[Tensor], tolerance: f64, build: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    // Analytic gradients.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    if g.value(root).numel() != 1 {
        return Err(Error::Config(format!(
            "gradcheck {op}: builder must return a scalar, got shape {:?}",
            g.value(root).shape()
        )));
    }
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.input(t.clone())).collect();
        let root = build(&mut g, &ids)?;
        Ok(g.value(root).item())
    };

    let mut per_input = vec![0.0f64; inputs.len()];
    let mut worst: Option<WorstCoordinate> = None;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for c in 0..inputs[i].numel() {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + FD_STEP;
            let f_plus = eval(&work)?;
            work[i].data_mut()[c] = orig - FD_STEP;
            let f_minus = eval(&work)?;
            work[i].data_mut()[c] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            let a = analytic[i].data()[c];
            let e = rel_err(a, numeric);
            if e > per_input[i] {
                per_input[i] = e;
            }
            if worst.as_ref().map_or(true, |w| e > w.rel_err) {
                worst = Some(WorstCoordinate {
                    input_index: i,
                    coordinate: c,
                    analytic: a,
                    numeric,
                    rel_err: e,
                });
            }
        }
    }

    let passed = per_input.iter().all(|&e| e <= tolerance);
    Ok(GradcheckReport {
        op: op.to_string(),
        tolerance,
        per_input,
        worst,
        passed,
    })
}

/// Like [`gradcheck`] but for builders returning non-scalar nodes: the output
/// is contracted with a fixed random probe so the whole Jacobian is exercised.
pub fn gradcheck_probed<F>(
    op: &str,
    inputs: &[Tensor],
    tolerance: f64,
    probe_seed: u64,
    build: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    // One dry run to learn the output shape.
    let out_shape = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let root = build(&mut g, &ids)?;
        g.value(root).shape().to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe = Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0));

    gradcheck(op, inputs, tolerance, move |g, ids| {
        let y = build(g, ids)?;
        let flat_len = g.value(y).numel();
        let yf = g.reshape(y, vec![1, flat_len])?;
        let p = g.constant(probe.reshaped(vec![1, flat_len])?);
        let prod = g.mul(yf, p)?;
        Ok(g.sum_all(prod))
    })
}

/// Deterministic random tensor for gradcheck inputs.
pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        // d/dx sum(5x) = 5; FD of a linear map is exact to rounding.
        let x = random_tensor(&[3, 4], 0, -1.0, 1.0);
        let rep = gradcheck("scale5", &[x], 1e-9, |g, ids| {
            let y = g.scale(ids[0], 5.0);
            Ok(g.sum_all(y))
        })
        .unwrap();
        assert!(rep.passed, "{rep}");
    }

    #[test]
    fn matmul_gradcheck_5x7_7x3() {
        for seed in [0u64, 1, 2] {
            let a = random_tensor(&[5, 7], 100 + seed, -1.0, 1.0);
            let b = random_tensor(&[7, 3], 200 + seed, -1.0, 1.0);
            let rep = gradcheck_probed("matmul", &[a, b], 1e-6, seed, |g, ids| {
                g.matmul(ids[0], ids[1])
            })
            .unwrap();
            assert!(rep.passed, "{rep}");
        }
    }

    #[test]
    fn softmax_rows_gradcheck() {
        for seed in [0u64, 1, 2] {
            let x = random_tensor(&[3, 4], 300 + seed, -2.0, 2.0);
            let rep = gradcheck_probed("softmax_rows", &[x], 1e-6, seed, |g, ids| {
                g.softmax_rows(ids[0], 1.7)
            })
            .unwrap();
            assert!(rep.passed, "{rep}");
        }
    }

    #[test]
    fn corrupted_backward_is_reported_with_named_op() {
        // Forward doubles, backward claims identity: the oracle must flag it.
        let x = random_tensor(&[2, 2], 7, -1.0, 1.0);
        let rep = gradcheck("deliberately_bad_double", &[x], 1e-5, |g, ids| {
            let v = g.value(ids[0]).map(|v| 2.0 * v);
            let bad = g.push_custom(
                "deliberately_bad_double",
                v,
                vec![ids[0]],
                Box::new(|grad, _, _| vec![Some(grad.clone())]),
            );
            Ok(g.sum_all(bad))
        })
        .unwrap();
        assert!(!rep.passed);
        let msg = rep.to_string();
        assert!(msg.contains("deliberately_bad_double") && msg.contains("FAILED"), "{msg}");
        let w = rep.worst.unwrap();
        assert!((w.numeric - 2.0).abs() < 1e-6 && (w.analytic - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_and_cross_entropy_gradcheck() {
        let x = random_tensor(&[4, 3], 11, -2.0, 2.0);
        let rep = gradcheck_probed("gelu", &[x], 1e-6, 3, |g, ids| Ok(g.gelu(ids[0]))).unwrap();
        assert!(rep.passed, "{rep}");

        let logits = random_tensor(&[5, 4], 12, -1.5, 1.5);
        let rep = gradcheck("softmax_cross_entropy", &[logits], 1e-6, |g, ids| {
            g.softmax_cross_entropy(ids[0], &[0, 3, 1, 2, 2])
        })
        .unwrap();
        assert!(rep.passed, "{rep}");
    }
}
