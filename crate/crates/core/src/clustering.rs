//! k-means with k-means++ seeding, and pair-counting agreement indices.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::write_file;
use crate::error::{Error, Result};
use crate::seed;

const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster id in `[0, k)` for each row.
    pub labels: Vec<usize>,
    pub k: usize,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
    pub iterations_run: usize,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_plus_plus(x: ArrayView2<'_, f64>, k: usize, rng: &mut seed::Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&x.row(first));
    chosen[first] = true;
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            // guard against rounding landing on a zero-weight tail
            if d2[idx] == 0.0 {
                idx = d2.iter().rposition(|&w| w > 0.0).expect("total > 0");
            }
            idx
        } else {
            // every point coincides with a center; fall back to the first unused row
            chosen.iter().position(|&u| !u).unwrap_or(0)
        };
        chosen[pick] = true;
        centers.row_mut(c).assign(&x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(pick)));
        }
    }
    centers
}

fn nearest(point: ArrayView1<'_, f64>, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn inertia_of(x: ArrayView2<'_, f64>, labels: &[usize], centers: &Array2<f64>) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(x.row(i), centers.row(c)))
        .sum()
}

fn lloyd(x: ArrayView2<'_, f64>, k: usize, mut centers: Array2<f64>) -> ClusterAssignment {
    let n = x.nrows();
    let mut labels = vec![usize::MAX; n];
    let mut previous_inertia = f64::INFINITY;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(x.row(i), &centers);
            dist[i] = d;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        // Empty clusters take the point farthest from its centroid.
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&c| counts[c] += 1);
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                counts[labels[i]] -= 1;
                labels[i] = empty;
                counts[empty] = 1;
                dist[i] = 0.0;
                centers.row_mut(empty).assign(&x.row(i));
                changed = true;
            }
        }
        if !changed {
            break;
        }
        iterations += 1;
        centers.fill(0.0);
        for (i, &c) in labels.iter().enumerate() {
            let mut row = centers.row_mut(c);
            row += &x.row(i);
        }
        for (c, mut row) in centers.rows_mut().into_iter().enumerate() {
            row /= counts[c] as f64;
        }
        let inertia = inertia_of(x, &labels, &centers);
        debug_assert!(
            inertia <= previous_inertia + 1e-9 * previous_inertia.abs().max(1.0),
            "Lloyd step increased inertia: {previous_inertia} -> {inertia}"
        );
        previous_inertia = inertia;
    }
    let inertia = inertia_of(x, &labels, &centers);
    ClusterAssignment {
        labels,
        k,
        inertia,
        iterations_run: iterations,
    }
}

/// Best of `restarts` k-means++ initialisations followed by Lloyd iterations
/// to a fixed point (at most 300). Ties in inertia go to the earlier restart.
pub fn kmeans(x: ArrayView2<'_, f64>, k: usize, restarts: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::invalid_arg("k-means on an empty matrix"));
    }
    if k < 2 || k > n {
        return Err(Error::invalid_arg(format!("k = {k} must lie in [2, {n}]")));
    }
    if restarts == 0 {
        return Err(Error::invalid_arg("restarts must be >= 1"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_data("non-finite value in k-means input"));
    }
    let runs: Vec<ClusterAssignment> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed::derive(seed, r as u64));
            let centers = kmeans_plus_plus(x, k, &mut rng);
            lloyd(x, k, centers)
        })
        .collect();
    Ok(runs
        .into_iter()
        .reduce(|best, run| if run.inertia < best.inertia { run } else { best })
        .expect("restarts >= 1"))
}

struct PairCounts {
    /// same cluster, same class
    a: u128,
    /// different cluster, different class
    b: u128,
    /// same cluster, different class
    c: u128,
    /// different cluster, same class
    d: u128,
}

fn choose2(m: u128) -> u128 {
    m * m.saturating_sub(1) / 2
}

fn pair_counts(pred: &[usize], truth: &[usize]) -> Result<PairCounts> {
    if pred.len() != truth.len() {
        return Err(Error::invalid_data(format!(
            "label coverage mismatch: {} predictions vs {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::invalid_arg("pair-counting indices need at least 2 samples"));
    }
    let mut table = BTreeMap::new();
    let mut rows = BTreeMap::new();
    let mut cols = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *table.entry((p, t)).or_insert(0u128) += 1;
        *rows.entry(p).or_insert(0u128) += 1;
        *cols.entry(t).or_insert(0u128) += 1;
    }
    let total = choose2(pred.len() as u128);
    let a: u128 = table.values().map(|&m| choose2(m)).sum();
    let same_cluster: u128 = rows.values().map(|&m| choose2(m)).sum();
    let same_class: u128 = cols.values().map(|&m| choose2(m)).sum();
    let c = same_cluster - a;
    let d = same_class - a;
    let b = total - a - c - d;
    Ok(PairCounts { a, b, c, d })
}

/// (A + B) / (A + B + C + D) over all sample pairs.
pub fn rand_index(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let pc = pair_counts(pred, truth)?;
    Ok((pc.a + pc.b) as f64 / (pc.a + pc.b + pc.c + pc.d) as f64)
}

/// Hubert–Arabie chance-corrected Rand index. Defined as 1 when both
/// partitions are trivial in the same way (the index is 0/0).
pub fn adjusted_rand_index(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let pc = pair_counts(pred, truth)?;
    let total = (pc.a + pc.b + pc.c + pc.d) as f64;
    let index = pc.a as f64;
    let same_cluster = (pc.a + pc.c) as f64;
    let same_class = (pc.a + pc.d) as f64;
    let expected = same_cluster * same_class / total;
    let max = 0.5 * (same_cluster + same_class);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Two-column `sample_id  cluster_id` dump.
pub fn write_assignment(
    path: impl AsRef<Path>,
    sample_ids: &[String],
    assignment: &ClusterAssignment,
) -> Result<()> {
    if sample_ids.len() != assignment.labels.len() {
        return Err(Error::shape(assignment.labels.len(), sample_ids.len()));
    }
    let mut out = String::from("sample\tcluster\n");
    for (id, c) in sample_ids.iter().zip(&assignment.labels) {
        out.push_str(&format!("{id}\t{c}\n"));
    }
    write_file(path.as_ref(), out.as_bytes())
}
