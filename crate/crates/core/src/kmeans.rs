//! Lloyd's k-means with k-means++ seeding, used to place the initial
//! surrogate classifiers.

use crate::error::{Error, Result};
use crate::math::{self, sq_dist, RngStream};
use crate::model::SurrogateBank;

pub const DEFAULT_MAX_ITERS: usize = 50;

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub iterations: usize,
}

fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seed(points: &[Vec<f64>], k: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.below(points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.uniform() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = points[pick].clone();
        for (di, p) in d2.iter_mut().zip(points) {
            *di = di.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Clusters `points` into `k` groups (Euclidean). Ties go to the lowest
/// centroid index. A cluster that empties out is re-seeded with the point
/// farthest from its current centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iters: usize, rng: &mut RngStream) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    let distinct = count_distinct(points);
    if distinct < k {
        return Err(Error::TooFewPoints { k, distinct });
    }
    let dim = points[0].len();
    let mut centroids = plus_plus_seed(points, k, rng);
    let mut labels = vec![usize::MAX; points.len()];
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            dists[i] = d;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        for c in 0..k {
            if sizes[c] == 0 {
                let mut far = 0;
                let mut far_d = f64::NEG_INFINITY;
                for (i, &d) in dists.iter().enumerate() {
                    if sizes[labels[i]] > 1 && d > far_d {
                        far = i;
                        far_d = d;
                    }
                }
                sizes[labels[far]] -= 1;
                labels[far] = c;
                sizes[c] = 1;
                dists[far] = 0.0;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &l) in points.iter().zip(&labels) {
            math::axpy(1.0, p, &mut sums[l]);
        }
        for ((cen, sum), &n) in centroids.iter_mut().zip(sums).zip(&sizes) {
            let inv = 1.0 / n as f64;
            *cen = sum.into_iter().map(|v| v * inv).collect();
        }
        if !changed {
            break;
        }
    }
    Ok(KMeans {
        centroids,
        labels,
        iterations,
    })
}

/// Surrogate bank initialized from k-means centroids on the sphere, with
/// every rectifier at 1.
pub fn kmeans_init(
    features: &[Vec<f64>],
    k: usize,
    scale: f64,
    max_iters: usize,
    rng: &mut RngStream,
) -> Result<SurrogateBank> {
    let km = kmeans(features, k, max_iters, rng)?;
    let mut centroids = km.centroids;
    for (c, cen) in centroids.iter_mut().enumerate() {
        if math::norm(cen) <= math::EPS_NORM {
            // Members cancel out (e.g. antipodal pairs); any member gives a
            // valid direction.
            let member = km.labels.iter().position(|&l| l == c).unwrap_or(0);
            *cen = features[member].clone();
        }
    }
    SurrogateBank::new(centroids, scale)
}
