//! Benchmark selectors: Sparse K-Means (Witten & Tibshirani) and spectral
//! feature selection (Zhao & Liu, normalised-Laplacian score).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, ClusterAssignment};
use crate::dataio::ExpressionMatrix;
use crate::error::{Error, Result};
use crate::kernel::{gaussian_kernel, median_bandwidth};
use crate::seed;

const SKM_MAX_ROUNDS: usize = 20;
const SKM_TOLERANCE: f64 = 1e-4;

/// Feature ordering from which the top `p` are taken.
pub trait FeatureRanking {
    /// Feature indices best first.
    fn ranking(&self) -> &[usize];

    fn select_top_p(&self, p: usize) -> Result<Vec<usize>> {
        let ranking = self.ranking();
        if p == 0 || p > ranking.len() {
            return Err(Error::invalid_arg(format!(
                "p = {p} must lie in [1, {}]",
                ranking.len()
            )));
        }
        Ok(ranking[..p].to_vec())
    }
}

/// sign(v) · max(|v| − δ, 0)
pub fn soft_threshold(v: f64, delta: f64) -> f64 {
    v.signum() * (v.abs() - delta).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkmResult {
    /// Non-negative, ‖w‖₂ ≤ 1, ‖w‖₁ ≤ s.
    pub weights: Vec<f64>,
    pub assignment: ClusterAssignment,
    pub s: f64,
    /// Features by descending weight, ties to the lower index.
    pub ranking: Vec<usize>,
    /// Weighted between-cluster sum of squares Σ wⱼ bⱼ after each half-step.
    pub objective_history: Vec<f64>,
    pub rounds: usize,
}

impl FeatureRanking for SkmResult {
    fn ranking(&self) -> &[usize] {
        &self.ranking
    }
}

/// Per-feature between-cluster sum of squares: total minus within.
pub fn between_cluster_ss(x: ArrayView2<'_, f64>, labels: &[usize], k: usize) -> Array1<f64> {
    let n = x.nrows();
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let mut sums = Array2::<f64>::zeros((k, x.ncols()));
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        let mut row = sums.row_mut(c);
        row += &x.row(i);
        counts[c] += 1;
    }
    let mut total = Array1::<f64>::zeros(x.ncols());
    let mut within = Array1::<f64>::zeros(x.ncols());
    for i in 0..n {
        let c = labels[i];
        for j in 0..x.ncols() {
            let v = x[[i, j]];
            total[j] += (v - mean[j]).powi(2);
            let centroid = sums[[c, j]] / counts[c] as f64;
            within[j] += (v - centroid).powi(2);
        }
    }
    total - within
}

fn l1(w: &[f64]) -> f64 {
    w.iter().map(|v| v.abs()).sum()
}

fn normalized_soft_threshold(b: &[f64], delta: f64) -> Option<Vec<f64>> {
    let w: Vec<f64> = b.iter().map(|&v| soft_threshold(v, delta)).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm > 0.0).then(|| w.iter().map(|v| v / norm).collect())
}

/// w = S(b⁺, Δ)/‖S(b⁺, Δ)‖₂ with Δ = 0 when that already satisfies
/// ‖w‖₁ ≤ s, otherwise Δ found by bisection so the L1 bound binds.
pub fn skm_weight_update(b: &[f64], s: f64) -> Result<(Vec<f64>, f64)> {
    let b_pos: Vec<f64> = b.iter().map(|&v| v.max(0.0)).collect();
    let top = b_pos.iter().copied().fold(0.0, f64::max);
    if !(top > 0.0) {
        return Err(Error::numerical(
            "no feature has positive between-cluster dispersion",
        ));
    }
    let w0 = normalized_soft_threshold(&b_pos, 0.0).expect("top > 0");
    if l1(&w0) <= s {
        return Ok((w0, 0.0));
    }
    let (mut lo, mut hi) = (0.0, top);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        match normalized_soft_threshold(&b_pos, mid) {
            Some(w) if l1(&w) > s => lo = mid,
            _ => hi = mid,
        }
        if hi - lo <= f64::EPSILON * top {
            break;
        }
    }
    let mut w = normalized_soft_threshold(&b_pos, hi)
        .or_else(|| normalized_soft_threshold(&b_pos, lo))
        .expect("lo keeps at least one feature");
    // Ties at the maximum can make the bound unattainable on the unit sphere;
    // shrink into the feasible region instead.
    let norm1 = l1(&w);
    if norm1 > s {
        w.iter_mut().for_each(|v| *v *= s / norm1);
    }
    Ok((w, hi))
}

fn weighted_view(x: ArrayView2<'_, f64>, w: &[f64]) -> Array2<f64> {
    let scale = Array1::from_iter(w.iter().map(|v| v.sqrt()));
    &x * &scale
}

fn dot(a: &[f64], b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Alternates weighted k-means and the lasso-type weight update until the
/// relative weight change drops below 1e-4 (at most 20 rounds).
pub fn sparse_kmeans(
    x: &ExpressionMatrix,
    k: usize,
    s: f64,
    restarts: usize,
    seed: u64,
) -> Result<SkmResult> {
    let d = x.n_features();
    if !(s > 1.0 && s <= (d as f64).sqrt()) {
        return Err(Error::invalid_arg(format!(
            "L1 bound s = {s} must lie in (1, sqrt(d) = {}]",
            (d as f64).sqrt()
        )));
    }
    if k < 2 {
        return Err(Error::invalid_arg("sparse k-means needs k >= 2"));
    }
    let values = x.values().view();
    let mut w = vec![1.0 / (d as f64).sqrt(); d];
    let mut assignment: Option<ClusterAssignment> = None;
    let mut history = Vec::new();
    let mut rounds = 0;

    while rounds < SKM_MAX_ROUNDS {
        rounds += 1;
        // (a) clustering for fixed weights; keep the previous partition if
        // the fresh one scores worse under the current weights.
        let fresh = kmeans(
            weighted_view(values, &w).view(),
            k,
            restarts,
            seed::derive(seed, rounds as u64),
        )?;
        let fresh_score = dot(&w, &between_cluster_ss(values, &fresh.labels, k));
        let (current, score) = match assignment.take() {
            Some(prev) => {
                let prev_score = dot(&w, &between_cluster_ss(values, &prev.labels, k));
                if prev_score > fresh_score {
                    (prev, prev_score)
                } else {
                    (fresh, fresh_score)
                }
            }
            None => (fresh, fresh_score),
        };
        history.push(score);

        // (b) weights for fixed clustering
        let b = between_cluster_ss(values, &current.labels, k);
        let (w_new, _) = skm_weight_update(b.as_slice().expect("contiguous"), s)?;
        history.push(dot(&w_new, &b));
        let change: f64 = w_new.iter().zip(&w).map(|(a, b)| (a - b).abs()).sum::<f64>() / l1(&w);
        w = w_new;
        assignment = Some(current);
        if change < SKM_TOLERANCE {
            break;
        }
    }

    let mut ranking: Vec<usize> = (0..d).collect();
    ranking.sort_by(|&a, &b| w[b].total_cmp(&w[a]));
    Ok(SkmResult {
        weights: w,
        assignment: assignment.expect("at least one round"),
        s,
        ranking,
        objective_history: history,
        rounds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecResult {
    /// f̂ᵀ L f̂ per feature; +∞ for features with zero weighted norm.
    pub scores: Vec<f64>,
    /// Features by ascending score, ties to the lower index.
    pub ranking: Vec<usize>,
    pub sigma: f64,
}

impl FeatureRanking for SpecResult {
    fn ranking(&self) -> &[usize] {
        &self.ranking
    }
}

/// Scores each feature by its normalised-Laplacian quadratic form on a dense
/// Gaussian sample-similarity graph. `sigma` defaults to the median heuristic.
///
/// With f̂ = D^½f/‖D^½f‖ and L = I − D^-½ S D^-½, the score simplifies to
/// 1 − fᵀSf / fᵀDf, which is what is evaluated here.
pub fn spec_scores(x: &ExpressionMatrix, sigma: Option<f64>) -> Result<SpecResult> {
    if x.n_samples() < 2 {
        return Err(Error::invalid_arg("SPEC needs at least 2 samples"));
    }
    let values = x.values().view();
    let sigma = match sigma {
        Some(s) => s,
        None => median_bandwidth(values)?,
    };
    let similarity = gaussian_kernel(values, sigma)?;
    let s = similarity.entries();
    let degree = s.sum_axis(Axis(1));
    let scores: Vec<f64> = x
        .values()
        .columns()
        .into_iter()
        .map(|f| {
            let dff: f64 = f.iter().zip(degree.iter()).map(|(v, d)| v * v * d).sum();
            if !(dff > 0.0) {
                return f64::INFINITY;
            }
            let sf = s.dot(&f);
            let fsf: f64 = f.dot(&sf);
            (1.0 - fsf / dff).clamp(0.0, 2.0)
        })
        .collect();
    let mut ranking: Vec<usize> = (0..scores.len()).collect();
    ranking.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    Ok(SpecResult {
        scores,
        ranking,
        sigma,
    })
}
