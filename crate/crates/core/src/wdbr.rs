//! Decision boundary rectification.
//!
//! Surrogate classes whose members come overwhelmingly from one state are
//! suspect: the state, not the identity, probably pulled them together. The
//! Maximum Predominance Index (MPI) `R_k` measures that domination, the
//! rectifier turns it into a per-class prior `p_k`, and assignment picks
//! `argmax_k p_k exp(logit_k)`, which is the MAP class under that prior.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::math::{self, argmax, dot};
use crate::model::SurrogateBank;

/// `|M_k ∩ Q_j|` for every surrogate class `k` and state `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MpiStats {
    /// `K x J`; column `j - 1` holds state `j`.
    pub counts: Vec<Vec<u64>>,
    pub member_sizes: Vec<u64>,
}

impl MpiStats {
    pub fn new(k: usize, n_states: usize) -> Self {
        Self {
            counts: vec![vec![0; n_states]; k],
            member_sizes: vec![0; k],
        }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn n_states(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn total(&self) -> u64 {
        self.member_sizes.iter().sum()
    }

    /// Adds one member per (class, state) pair. Classes are 0-based, states
    /// 1-based. Nothing is counted if any index is out of range.
    pub fn accumulate(&mut self, assignments: &[usize], states: &[usize]) -> Result<()> {
        if assignments.len() != states.len() {
            return Err(Error::DimMismatch {
                expected: assignments.len(),
                got: states.len(),
            });
        }
        let (k, j) = (self.k(), self.n_states());
        for (&a, &s) in assignments.iter().zip(states) {
            if a >= k {
                return Err(Error::IndexOutOfRange {
                    what: "surrogate class",
                    value: a + 1,
                    max: k,
                });
            }
            if s == 0 || s > j {
                return Err(Error::IndexOutOfRange {
                    what: "state",
                    value: s,
                    max: j,
                });
            }
        }
        for (&a, &s) in assignments.iter().zip(states) {
            self.counts[a][s - 1] += 1;
            self.member_sizes[a] += 1;
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().flatten().for_each(|c| *c = 0);
        self.member_sizes.iter_mut().for_each(|c| *c = 0);
    }

    /// `R_k = max_j |M_k ∩ Q_j| / |M_k|`; empty classes get `R_k = 0`.
    pub fn mpi(&self) -> Vec<f64> {
        self.counts
            .iter()
            .zip(&self.member_sizes)
            .map(|(row, &n)| {
                if n == 0 {
                    0.0
                } else {
                    *row.iter().max().unwrap_or(&0) as f64 / n as f64
                }
            })
            .collect()
    }
}

/// Rectifier shape. `a = inf` is the hard (nullifying) rectifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectifierConfig {
    pub a: f64,
    pub b: f64,
}

impl RectifierConfig {
    pub fn hard(b: f64) -> Self {
        Self { a: f64::INFINITY, b }
    }

    pub fn soft(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    pub fn is_hard(&self) -> bool {
        self.a.is_infinite()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0) || self.a == f64::NEG_INFINITY {
            return Err(Error::Config(format!("rectifier strength a={} must be >= 0", self.a)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!("rectifier threshold b={} outside [0, 1]", self.b)));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Strength {
    Finite(f64),
    Named(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RectifierRepr {
    a: Strength,
    b: f64,
}

impl Serialize for RectifierConfig {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let a = if self.a.is_infinite() {
            Strength::Named("inf".into())
        } else {
            Strength::Finite(self.a)
        };
        RectifierRepr { a, b: self.b }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RectifierConfig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = RectifierRepr::deserialize(d)?;
        let a = match r.a {
            Strength::Finite(a) => a,
            Strength::Named(s) if matches!(s.as_str(), "inf" | "infinity" | "hard") => f64::INFINITY,
            Strength::Named(s) => {
                return Err(serde::de::Error::custom(format!(
                    "rectifier strength must be a number or \"inf\", got {s:?}"
                )))
            }
        };
        Ok(Self { a, b: r.b })
    }
}

/// `p = 1 / (1 + exp(a (R - b)))`, or the step `R <= b` when `a` is infinite.
pub fn rectifier(r: f64, cfg: &RectifierConfig) -> f64 {
    if cfg.is_hard() {
        if r <= cfg.b {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 / (1.0 + (cfg.a * (r - cfg.b)).exp())
    }
}

/// Product of per-kind rectifiers for one class.
pub fn multi_state_rectifier(r_per_kind: &[f64], cfgs: &[RectifierConfig]) -> Result<f64> {
    if r_per_kind.len() != cfgs.len() {
        return Err(Error::DimMismatch {
            expected: cfgs.len(),
            got: r_per_kind.len(),
        });
    }
    Ok(r_per_kind
        .iter()
        .zip(cfgs)
        .map(|(&r, c)| rectifier(r, c))
        .product())
}

/// Plain maximum-likelihood assignment.
pub fn plain_assign(bank: &SurrogateBank, x: &[f64]) -> usize {
    argmax(&bank.logits(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub class: usize,
    /// Set when every class was nullified and the plain argmax was used.
    pub fallback: bool,
}

/// `argmax_k logit_k + ln p_k`; classes with `p_k = 0` never win unless all
/// of them are nullified, in which case the plain argmax is returned and
/// flagged.
pub fn rectified_assign(bank: &SurrogateBank, x: &[f64]) -> Assignment {
    let scores: Vec<f64> = bank
        .mu
        .iter()
        .zip(&bank.p)
        .map(|(m, &p)| {
            if p > 0.0 {
                bank.scale * dot(x, m) + p.ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    if scores.iter().all(|&s| s == f64::NEG_INFINITY) {
        return Assignment {
            class: plain_assign(bank, x),
            fallback: true,
        };
    }
    Assignment {
        class: argmax(&scores),
        fallback: false,
    }
}

/// Posterior `p(k|x) ∝ p_k exp(logit_k)`.
pub fn map_posterior(bank: &SurrogateBank, x: &[f64]) -> Result<Vec<f64>> {
    if bank.p.iter().all(|&p| p <= 0.0) {
        return Err(Error::AllNullified);
    }
    let log_joint: Vec<f64> = bank
        .logits(x)
        .into_iter()
        .zip(&bank.p)
        .map(|(l, &p)| l + p.ln())
        .collect();
    let z = math::log_sum_exp(&log_joint);
    Ok(log_joint.iter().map(|&s| (s - z).exp()).collect())
}

/// Signed distance-like residual of `x` to the rectified boundary between two
/// classes in scaled-logit space: `scale (mu1 - mu2) . x + ln(p1 / p2)`.
pub fn boundary_residual(
    mu1: &[f64],
    mu2: &[f64],
    p1: f64,
    p2: f64,
    x: &[f64],
    scale: f64,
) -> Result<f64> {
    if p1 <= 0.0 {
        return Err(Error::NullifiedClass(1));
    }
    if p2 <= 0.0 {
        return Err(Error::NullifiedClass(2));
    }
    let diff: f64 = mu1.iter().zip(mu2).zip(x).map(|((a, b), xi)| (a - b) * xi).sum();
    Ok(scale * diff + (p1 / p2).ln())
}

/// Histogram of MPI values of nonempty classes over `bins` equal-width bins
/// spanning `[0, 1]` (the last bin is closed).
pub fn r_histogram(stats: &MpiStats, bins: usize) -> Vec<u64> {
    let mut hist = vec![0u64; bins];
    for (r, &n) in stats.mpi().iter().zip(&stats.member_sizes) {
        if n > 0 {
            let b = ((r * bins as f64) as usize).min(bins - 1);
            hist[b] += 1;
        }
    }
    hist
}

pub const R_HISTOGRAM_BINS: usize = 10;

/// One line of the per-refresh diagnostic dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefreshDiagnostic {
    pub iter: usize,
    #[serde(rename = "active_K")]
    pub active_k: usize,
    #[serde(rename = "R_histogram")]
    pub r_histogram: Vec<u64>,
}
