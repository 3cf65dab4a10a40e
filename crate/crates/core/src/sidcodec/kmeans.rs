//! Lloyd's algorithm with k-means++ seeding.

use std::collections::HashSet;

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{indexed_rng, stream};

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances of points to their assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
    /// Set when the requested cluster count exceeded the distinct points.
    pub warning: Option<String>,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
pub(crate) fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    points.par_iter().map(|p| nearest(p, centroids)).collect()
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|x| x.to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = indexed_rng(seed, stream::KMEANS, 0);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > u && *d > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `u` past the last partial sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|d| *d > 0.0).expect("positive mass"))
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[next].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Reseed every empty cluster to the point farthest from its centroid,
/// taken from a cluster that can spare it. Returns whether anything moved.
fn repair_empty(
    points: &[Vec<f64>],
    centroids: &mut [Vec<f64>],
    assigned: &mut [(usize, f64)],
) -> bool {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for (c, _) in assigned.iter() {
        sizes[*c] += 1;
    }
    let mut moved = false;
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let far = assigned
            .iter()
            .enumerate()
            .filter(|(_, (c, _))| sizes[*c] > 1)
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);
        let Some(i) = far else { break };
        sizes[assigned[i].0] -= 1;
        sizes[empty] += 1;
        assigned[i] = (empty, 0.0);
        centroids[empty] = points[i].clone();
        moved = true;
    }
    moved
}

fn means(points: &[Vec<f64>], assigned: &[(usize, f64)], old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; old.len()];
    let mut counts = vec![0usize; old.len()];
    for (p, (c, _)) in points.iter().zip(assigned) {
        counts[*c] += 1;
        for (s, x) in sums[*c].iter_mut().zip(p) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(old)
        .map(|((s, n), o)| {
            if n == 0 {
                o.clone()
            } else {
                s.into_iter().map(|x| x / n as f64).collect()
            }
        })
        .collect()
}

/// Cluster `points` into `n` groups under squared Euclidean distance.
///
/// Terminates when no centroid moves more than `tol` or after `max_iters`
/// Lloyd iterations. If `n` exceeds the number of distinct points the
/// effective cluster count is reduced and a warning recorded.
pub fn kmeans(
    points: &[Vec<f64>],
    n: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("kmeans needs at least one point".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("kmeans needs n >= 1".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|x| !x.is_finite())) {
        return Err(Error::InvalidArgument(
            "kmeans points must be finite and share one dimension".into(),
        ));
    }
    let distinct = distinct_count(points);
    let (k, warning) = if n > distinct {
        let msg = format!("requested {n} clusters but only {distinct} distinct points; using {distinct}");
        log::warn!("{msg}");
        (distinct, Some(msg))
    } else {
        (n, None)
    };

    let mut centroids = plus_plus_seeds(points, k, seed);
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let mut assigned = assign(points, &centroids);
        repair_empty(points, &mut centroids, &mut assigned);
        let next = means(points, &assigned, &centroids);
        let shift = next
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < tol {
            break;
        }
    }

    let mut assigned = assign(points, &centroids);
    for _ in 0..k {
        if !repair_empty(points, &mut centroids, &mut assigned) {
            break;
        }
        assigned = assign(points, &centroids);
    }
    let inertia = assigned.iter().map(|(_, d)| d).sum();
    Ok(KMeansResult {
        centroids,
        assignments: assigned.into_iter().map(|(c, _)| c).collect(),
        inertia,
        iterations,
        warning,
    })
}
