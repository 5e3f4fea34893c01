//! Cross-state retrieval metrics, cluster diagnostics, and feature export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::math::{dot, l2_normalize};
use crate::model::EmbeddingHead;
use crate::synth::Dataset;
use crate::wdbr::{r_histogram, MpiStats, R_HISTOGRAM_BINS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub rank: BTreeMap<usize, f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Rank-1 over the queries of each state.
    pub per_state: BTreeMap<usize, f64>,
    pub n_queries: usize,
    pub n_gallery: usize,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.rank.get(&1).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_header(&self) -> String {
        let mut h: Vec<String> = self.rank.keys().map(|k| format!("rank{k}")).collect();
        h.extend(["mAP".into(), "n_queries".into(), "n_gallery".into()]);
        h.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut r: Vec<String> = self.rank.values().map(f64::to_string).collect();
        r.extend([
            self.map.to_string(),
            self.n_queries.to_string(),
            self.n_gallery.to_string(),
        ]);
        r.join(",")
    }
}

struct QueryResult {
    first_hit: usize,
    ap: f64,
}

/// Every example is a query against all others, minus those sharing both
/// its identity and its state. Ranking is by cosine similarity, ties broken
/// by index.
pub fn retrieval_eval(
    features: &[Vec<f64>],
    identities: &[u64],
    states: &[usize],
    ks: &[usize],
) -> Result<EvalReport> {
    let n = features.len();
    if identities.len() != n || states.len() != n {
        return Err(Error::DimMismatch {
            expected: n,
            got: identities.len().min(states.len()),
        });
    }
    if n == 0 {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    if ks.contains(&0) {
        return Err(Error::Config("rank cutoffs must be >= 1".into()));
    }
    let unit = features
        .iter()
        .map(|f| l2_normalize(f))
        .collect::<Result<Vec<_>>>()?;
    let results = (0..n)
        .into_par_iter()
        .map(|q| {
            let mut gallery: Vec<(f64, usize)> = (0..n)
                .filter(|&g| g != q && !(identities[g] == identities[q] && states[g] == states[q]))
                .map(|g| (dot(&unit[q], &unit[g]), g))
                .collect();
            gallery.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut hits = 0usize;
            let mut ap = 0.0;
            let mut first_hit = 0;
            for (pos, &(_, g)) in gallery.iter().enumerate() {
                if identities[g] == identities[q] {
                    hits += 1;
                    if hits == 1 {
                        first_hit = pos + 1;
                    }
                    ap += hits as f64 / (pos + 1) as f64;
                }
            }
            if hits == 0 {
                return Err(Error::NoValidGallery { query: q });
            }
            Ok(QueryResult {
                first_hit,
                ap: ap / hits as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let inv = 1.0 / n as f64;
    let rank = ks
        .iter()
        .map(|&k| (k, results.iter().filter(|r| r.first_hit <= k).count() as f64 * inv))
        .collect();
    let map = results.iter().map(|r| r.ap).sum::<f64>() * inv;
    let mut per_state_counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (r, &s) in results.iter().zip(states) {
        let e = per_state_counts.entry(s).or_default();
        e.0 += (r.first_hit == 1) as usize;
        e.1 += 1;
    }
    let per_state = per_state_counts
        .into_iter()
        .map(|(s, (hit, tot))| (s, hit as f64 / tot as f64))
        .collect();
    Ok(EvalReport {
        rank,
        map,
        per_state,
        n_queries: n,
        n_gallery: n,
    })
}

fn identities_of(ds: &Dataset) -> Result<Vec<u64>> {
    ds.examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            e.identity
                .ok_or_else(|| Error::Invalid(format!("example {i} has no identity")))
        })
        .collect()
}

/// Embeds `ds` with `head` and runs [`retrieval_eval`].
pub fn evaluate(head: &EmbeddingHead, ds: &Dataset, ks: &[usize]) -> Result<EvalReport> {
    let xs = head.embed_all(ds.examples.iter().map(|e| e.features.as_slice()))?;
    retrieval_eval(&xs, &identities_of(ds)?, &ds.states(), ks)
}

/// Retrieval on the raw input features, i.e. without any learned head.
pub fn evaluate_raw(ds: &Dataset, ks: &[usize]) -> Result<EvalReport> {
    let xs: Vec<Vec<f64>> = ds.examples.iter().map(|e| e.features.clone()).collect();
    retrieval_eval(&xs, &identities_of(ds)?, &ds.states(), ks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDiagnostics {
    pub purity: f64,
    pub r_histogram: Vec<u64>,
}

/// Identity purity of a hard clustering, plus the MPI histogram of its
/// classes.
pub fn cluster_diagnostics(
    assignments: &[usize],
    identities: &[u64],
    states: &[usize],
    k: usize,
    n_states: usize,
) -> Result<ClusterDiagnostics> {
    let n = assignments.len();
    if identities.len() != n || states.len() != n {
        return Err(Error::DimMismatch {
            expected: n,
            got: identities.len().min(states.len()),
        });
    }
    let mut per_class: BTreeMap<usize, BTreeMap<u64, usize>> = BTreeMap::new();
    for (&c, &id) in assignments.iter().zip(identities) {
        *per_class.entry(c).or_default().entry(id).or_default() += 1;
    }
    let majority: usize = per_class
        .values()
        .map(|ids| ids.values().copied().max().unwrap_or(0))
        .sum();
    let mut stats = MpiStats::new(k, n_states);
    stats.accumulate(assignments, states)?;
    Ok(ClusterDiagnostics {
        purity: if n == 0 { 0.0 } else { majority as f64 / n as f64 },
        r_histogram: r_histogram(&stats, R_HISTOGRAM_BINS),
    })
}

/// CSV text with columns `identity,state,f1..fd`.
pub fn features_csv(head: &EmbeddingHead, ds: &Dataset) -> Result<String> {
    let mut out = String::from("identity,state");
    for c in 1..=head.embed_dim {
        let _ = write!(out, ",f{c}");
    }
    out.push('\n');
    for e in &ds.examples {
        let x = head.embed(&e.features)?;
        if let Some(id) = e.identity {
            let _ = write!(out, "{id}");
        }
        let _ = write!(out, ",{}", e.state);
        for v in x {
            // Display prints the shortest representation that round-trips.
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_features(head: &EmbeddingHead, ds: &Dataset, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, features_csv(head, ds)?.as_bytes())
}
