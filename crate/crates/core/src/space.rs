//! The dataset-level perspective embedding space: a K-entry codebook updated
//! by exponential moving averages, with assignment-frequency mixture weights
//! and EMA diagonal variances giving a Gaussian-mixture density.
//!
//! Entries never receive training gradients; the training loop updates the
//! space at mini-batch boundaries only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VARIANCE_FLOOR: f64 = 1e-4;

/// K-entry EMA codebook over perspective representations.
#[derive(Clone, Debug)]
pub struct PerspectiveSpace {
    entries: Vec<Tensor>,
    assign_counts: Vec<u64>,
    pi: Vec<f64>,
    /// Per-entry diagonal variances of length `M * M * C'`, floored.
    sigma: Vec<Vec<f64>>,
    alpha: f64,
    shape: Vec<usize>,
    initialized: bool,
}

impl PerspectiveSpace {
    /// An empty space of `k` zero entries awaiting data-dependent seeding.
    pub fn new(k: usize, shape: &[usize], alpha: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("perspective space needs k >= 1".into()));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!(
                "EMA weight must lie in (0, 1), got {alpha}"
            )));
        }
        let d: usize = shape.iter().product();
        Ok(PerspectiveSpace {
            entries: vec![Tensor::zeros(shape); k],
            assign_counts: vec![0; k],
            pi: vec![1.0 / k as f64; k],
            sigma: vec![vec![1.0; d]; k],
            alpha,
            shape: shape.to_vec(),
            initialized: false,
        })
    }

    /// A space with explicitly chosen entries (used by tests and loaders).
    pub fn with_entries(entries: Vec<Tensor>, alpha: f64) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("perspective space needs k >= 1".into()));
        }
        let shape = entries[0].shape().to_vec();
        if entries.iter().any(|e| e.shape() != shape) {
            return Err(Error::Config("space entries must share one shape".into()));
        }
        let mut s = PerspectiveSpace::new(entries.len(), &shape, alpha)?;
        s.entries = entries;
        s.initialized = true;
        Ok(s)
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn entry(&self, k: usize) -> &Tensor {
        &self.entries[k]
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn counts(&self) -> &[u64] {
        &self.assign_counts
    }

    pub fn sigma(&self, k: usize) -> &[f64] {
        &self.sigma[k]
    }

    fn check_shape(&self, p: &Tensor) -> Result<()> {
        if p.shape() != self.shape.as_slice() {
            return Err(Error::dimension("perspective_space", &self.shape, p.shape()));
        }
        Ok(())
    }

    /// Seed entries from the first distinct representations of a batch,
    /// padding with small Gaussian noise when the batch is too small.
    pub fn seed_from_batch(&mut self, batch: &[Tensor], seed: u64) -> Result<()> {
        let mut chosen: Vec<Tensor> = Vec::with_capacity(self.k());
        for p in batch {
            self.check_shape(p)?;
            if chosen.len() == self.k() {
                break;
            }
            if !chosen.iter().any(|c| c.data() == p.data()) {
                chosen.push(p.clone());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.01).expect("positive std");
        while chosen.len() < self.k() {
            chosen.push(Tensor::from_fn(&self.shape, |_| noise.sample(&mut rng)));
        }
        self.entries = chosen;
        self.initialized = true;
        Ok(())
    }

    /// Nearest entry by Euclidean distance; ties resolve to the lowest index.
    pub fn nearest(&self, p: &Tensor) -> Result<usize> {
        self.check_shape(p)?;
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, e) in self.entries.iter().enumerate() {
            let d: f64 = e
                .data()
                .iter()
                .zip(p.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        Ok(best)
    }

    /// One EMA step for one representation: the nearest entry moves toward
    /// `p`, its variance tracks the squared deviation, assignment counts and
    /// mixture weights refresh. Returns the updated entry index.
    pub fn ema_update(&mut self, p: &Tensor) -> Result<usize> {
        let k = self.nearest(p)?;
        let a = self.alpha;
        {
            let entry = &mut self.entries[k];
            for (e, &v) in entry.data_mut().iter_mut().zip(p.data()) {
                *e = a * *e + (1.0 - a) * v;
            }
        }
        let entry = &self.entries[k];
        for ((s, &e), &v) in self.sigma[k].iter_mut().zip(entry.data()).zip(p.data()) {
            let dev = v - e;
            *s = (a * *s + (1.0 - a) * dev * dev).max(VARIANCE_FLOOR);
        }
        self.assign_counts[k] += 1;
        let total: u64 = self.assign_counts.iter().sum();
        for (pi, &c) in self.pi.iter_mut().zip(&self.assign_counts) {
            *pi = c as f64 / total as f64;
        }
        Ok(k)
    }

    /// Sequential EMA over a mini-batch. Seeds the space from the first
    /// batch it ever sees.
    pub fn ema_update_batch(&mut self, batch: &[Tensor], seed: u64) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        if !self.initialized {
            self.seed_from_batch(batch, seed)?;
            return Ok(());
        }
        for p in batch {
            self.ema_update(p)?;
        }
        Ok(())
    }

    /// Per-component `log pi_k + log N(p | entry_k, sigma_k)` terms.
    fn component_log_terms(&self, p: &Tensor) -> Result<Vec<f64>> {
        self.check_shape(p)?;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        Ok((0..self.k())
            .map(|k| {
                let lp = if self.pi[k] > 0.0 {
                    self.pi[k].ln()
                } else {
                    f64::NEG_INFINITY
                };
                let mut quad = 0.0;
                let mut logdet = 0.0;
                for ((&v, &mu), &var) in p
                    .data()
                    .iter()
                    .zip(self.entries[k].data())
                    .zip(&self.sigma[k])
                {
                    quad += (v - mu) * (v - mu) / var;
                    logdet += var.ln();
                }
                lp - 0.5 * (self.dim() as f64 * ln2pi + logdet + quad)
            })
            .collect())
    }

    /// Mixture log-density of `p` and the per-component responsibilities
    /// (a softmax over the component log terms, summing to 1).
    pub fn log_density_and_responsibilities(&self, p: &Tensor) -> Result<(f64, Vec<f64>)> {
        let terms = self.component_log_terms(p)?;
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = terms.iter().map(|&t| (t - max).exp()).collect();
        let total: f64 = resp.iter().sum();
        for r in resp.iter_mut() {
            *r /= total;
        }
        Ok((max + total.ln(), resp))
    }

    /// Bundle records for checkpointing ("entries", "counts", "sigma").
    pub fn to_records(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let k = self.k();
        let d = self.dim();
        let mut entry_data = Vec::with_capacity(k * d);
        for e in &self.entries {
            entry_data.extend_from_slice(e.data());
        }
        let mut entry_shape = vec![k];
        entry_shape.extend_from_slice(&self.shape);
        let counts: Vec<f64> = self
            .assign_counts
            .iter()
            .map(|&c| c as f64)
            .chain(std::iter::once(if self.initialized { 1.0 } else { 0.0 }))
            .collect();
        let mut sigma_data = Vec::with_capacity(k * d);
        for s in &self.sigma {
            sigma_data.extend_from_slice(s);
        }
        vec![
            (
                format!("{prefix}entries"),
                Tensor::new(entry_shape, entry_data).expect("consistent space"),
            ),
            (
                format!("{prefix}counts"),
                Tensor::new(vec![k + 1], counts).expect("consistent space"),
            ),
            (
                format!("{prefix}sigma"),
                Tensor::new(vec![k, d], sigma_data).expect("consistent space"),
            ),
        ]
    }

    /// Rebuild from [`Self::to_records`] output.
    pub fn from_records(records: &[(String, Tensor)], prefix: &str, alpha: f64) -> Result<Self> {
        let find = |name: &str| {
            crate::bundle::find_record(records, &format!("{prefix}{name}"))
                .ok_or_else(|| Error::Format(format!("space checkpoint missing {prefix}{name}")))
        };
        let entries_t = find("entries")?;
        let counts_t = find("counts")?;
        let sigma_t = find("sigma")?;
        let eshape = entries_t.shape();
        if eshape.len() < 2 {
            return Err(Error::Format(format!(
                "space entries record must be at least 2-D, got {eshape:?}"
            )));
        }
        let k = eshape[0];
        let shape: Vec<usize> = eshape[1..].to_vec();
        let d: usize = shape.iter().product();
        if counts_t.numel() != k + 1 || sigma_t.shape() != [k, d] {
            return Err(Error::Format("space checkpoint records disagree on K".into()));
        }
        let mut s = PerspectiveSpace::new(k, &shape, alpha)?;
        for (i, e) in s.entries.iter_mut().enumerate() {
            *e = Tensor::new(shape.clone(), entries_t.data()[i * d..(i + 1) * d].to_vec())?;
        }
        s.assign_counts = counts_t.data()[..k].iter().map(|&c| c as u64).collect();
        s.initialized = counts_t.data()[k] != 0.0;
        for (i, row) in s.sigma.iter_mut().enumerate() {
            row.copy_from_slice(&sigma_t.data()[i * d..(i + 1) * d]);
        }
        let total: u64 = s.assign_counts.iter().sum();
        if total > 0 {
            for (pi, &c) in s.pi.iter_mut().zip(&s.assign_counts) {
                *pi = c as f64 / total as f64;
            }
        }
        Ok(s)
    }
}
