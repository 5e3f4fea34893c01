//! Feature drift regularization.
//!
//! Each state sub-population is pulled toward the global feature distribution
//! with the simplified 2-Wasserstein distance between diagonal Gaussians,
//! `||m_j - m||^2 + ||sigma_j - sigma||^2`. Per-state moments come from the
//! current batch; the global `(m, sigma)` lives in a momentum buffer and is a
//! constant as far as gradients are concerned.
//!
//! Standard deviations are population (divide by `n`). States with a single
//! example in the batch are skipped. Where `sigma_j` is exactly zero the
//! gradient of the std term uses the subgradient 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StateMoments {
    pub state: usize,
    pub n: usize,
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Batch positions of the members.
    pub members: Vec<usize>,
}

/// Moments of every state with at least two members in the batch, ordered by
/// state.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub per_state: Vec<StateMoments>,
}

impl BatchStats {
    pub fn get(&self, state: usize) -> Option<&StateMoments> {
        self.per_state.iter().find(|s| s.state == state)
    }
}

/// Mean and population standard deviation over a set of vectors.
pub fn moments<'a, I>(xs: I, dim: usize) -> (Vec<f64>, Vec<f64>)
where
    I: IntoIterator<Item = &'a [f64]> + Clone,
{
    let mut mean = vec![0.0; dim];
    let mut n = 0usize;
    for x in xs.clone() {
        crate::math::axpy(1.0, x, &mut mean);
        n += 1;
    }
    if n == 0 {
        return (mean, vec![0.0; dim]);
    }
    let inv = 1.0 / n as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut var = vec![0.0; dim];
    for x in xs {
        for ((v, xi), m) in var.iter_mut().zip(x).zip(&mean) {
            *v += (xi - m) * (xi - m);
        }
    }
    let sigma = var.into_iter().map(|v| (v * inv).sqrt()).collect();
    (mean, sigma)
}

pub fn batch_state_stats(xs: &[Vec<f64>], states: &[usize]) -> Result<BatchStats> {
    if xs.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if xs.len() != states.len() {
        return Err(Error::DimMismatch {
            expected: xs.len(),
            got: states.len(),
        });
    }
    let dim = xs[0].len();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in states.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    let per_state = groups
        .into_iter()
        .filter(|(_, m)| m.len() >= 2)
        .map(|(state, members)| {
            let (mean, sigma) = moments(members.iter().map(|&i| xs[i].as_slice()), dim);
            StateMoments {
                state,
                n: members.len(),
                mean,
                sigma,
                members,
            }
        })
        .collect();
    Ok(BatchStats { per_state })
}

/// Momentum-tracked global mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftBuffer {
    pub m: Vec<f64>,
    pub sigma: Vec<f64>,
    pub alpha: f64,
}

impl DriftBuffer {
    /// Initializes from a full pass over `xs`.
    pub fn from_features(xs: &[Vec<f64>], alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("buffer momentum {alpha} outside (0, 1]")));
        }
        let dim = xs.first().map_or(0, Vec::len);
        let (m, sigma) = moments(xs.iter().map(Vec::as_slice), dim);
        Ok(Self { m, sigma, alpha })
    }

    /// `m <- (1 - alpha) m + alpha m_batch`, same for sigma.
    pub fn update(&mut self, batch_mean: &[f64], batch_sigma: &[f64]) -> Result<()> {
        if batch_mean.len() != self.m.len() || batch_sigma.len() != self.sigma.len() {
            return Err(Error::DimMismatch {
                expected: self.m.len(),
                got: batch_mean.len(),
            });
        }
        let a = self.alpha;
        for (m, b) in self.m.iter_mut().zip(batch_mean) {
            *m = (1.0 - a) * *m + a * b;
        }
        for (s, b) in self.sigma.iter_mut().zip(batch_sigma) {
            *s = (1.0 - a) * *s + a * b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DriftLoss {
    pub loss: f64,
    /// `dL/dx` for every batch position (zero for skipped states).
    pub grad_x: Vec<Vec<f64>>,
}

/// Drift loss of the batch against the buffer, with its exact gradient with
/// respect to every feature vector.
pub fn drift_loss_grads(stats: &BatchStats, buffer: &DriftBuffer, xs: &[Vec<f64>]) -> DriftLoss {
    let dim = buffer.m.len();
    let mut grad_x = vec![vec![0.0; dim]; xs.len()];
    let mut loss = 0.0;
    for st in &stats.per_state {
        let inv_n = 1.0 / st.n as f64;
        let dm: Vec<f64> = st.mean.iter().zip(&buffer.m).map(|(a, b)| a - b).collect();
        let ds: Vec<f64> = st.sigma.iter().zip(&buffer.sigma).map(|(a, b)| a - b).collect();
        loss += dm.iter().map(|v| v * v).sum::<f64>() + ds.iter().map(|v| v * v).sum::<f64>();
        // d sigma_c / d x_ic = (x_ic - m_c) / (n sigma_c); the mean's own
        // dependence cancels because deviations sum to zero.
        let sig_coef: Vec<f64> = ds
            .iter()
            .zip(&st.sigma)
            .map(|(d, &s)| if s > 0.0 { 2.0 * d * inv_n / s } else { 0.0 })
            .collect();
        for &i in &st.members {
            let g = &mut grad_x[i];
            for c in 0..dim {
                g[c] += 2.0 * dm[c] * inv_n + sig_coef[c] * (xs[i][c] - st.mean[c]);
            }
        }
    }
    DriftLoss { loss, grad_x }
}

/// `Σ_j d(P(Q_j), P(X))` with both sides estimated from `xs` itself; used to
/// measure how far apart the state sub-populations of an embedded set are.
pub fn drift_distance(xs: &[Vec<f64>], states: &[usize]) -> Result<f64> {
    let dim = xs.first().map_or(0, Vec::len);
    let (m, sigma) = moments(xs.iter().map(Vec::as_slice), dim);
    let stats = batch_state_stats(xs, states)?;
    let reference = DriftBuffer { m, sigma, alpha: 1.0 };
    Ok(drift_loss_grads(&stats, &reference, xs).loss)
}
