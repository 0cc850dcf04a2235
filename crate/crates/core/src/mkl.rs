//! Greedy multiple kernel learning by kernel-target alignment.
//!
//! Each step combines exactly two kernels: the current combination `K_μ`
//! and one candidate `K_j`. The optimal non-negative pair of weights has a
//! closed form (see [`solve_pair_weights`]), so one step costs one Frobenius
//! product per remaining candidate. The selector keeps the running products
//! ⟨K_μ,K_z⟩, ⟨K_μ,K_μ⟩ and ⟨K_μ,K_j⟩ instead of materialising `K_μ`.

use ndarray::Array2;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{alignment_from_products, frobenius_inner, frobenius_raw, KernelMatrix};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MklConfig {
    /// Maximum number of features to select.
    pub p: usize,
    /// Minimum alignment gain for a candidate to be accepted.
    pub improvement_tolerance: f64,
    /// Score only this many randomly drawn remaining candidates per step.
    pub candidate_subsample: Option<usize>,
    /// Seed for `candidate_subsample` draws.
    pub seed: u64,
}

impl Default for MklConfig {
    fn default() -> Self {
        Self {
            p: 10,
            improvement_tolerance: 1e-6,
            candidate_subsample: None,
            seed: 0,
        }
    }
}

impl MklConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::invalid_arg("p must be at least 1"));
        }
        if !(self.improvement_tolerance >= 0.0) {
            return Err(Error::invalid_arg("improvement_tolerance must be >= 0"));
        }
        if self.candidate_subsample == Some(0) {
            return Err(Error::invalid_arg("candidate_subsample must be >= 1"));
        }
        Ok(())
    }
}

/// Which rule ended the greedy loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// `p` features were selected.
    TargetSize,
    /// No remaining candidate raised the alignment by more than the tolerance.
    NoImprovement,
    /// Every usable candidate was already selected.
    CandidatesExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MklSolution {
    /// One weight per candidate; non-zero exactly on `selected`, sums to 1.
    pub mu: Vec<f64>,
    /// Candidate indices in the order they were accepted.
    pub selected: Vec<usize>,
    /// Alignment with the target after each acceptance.
    pub alignment_trajectory: Vec<f64>,
    /// Final alignment A(K_μ, K_z).
    pub target_alignment: f64,
    pub stop_reason: StopReason,
}

impl MklSolution {
    /// Weights of the selected features, in selection order.
    pub fn selected_weights(&self) -> Vec<f64> {
        self.selected.iter().map(|&i| self.mu[i]).collect()
    }
}

/// Result of the two-kernel weight solve; weights sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairWeights {
    pub mu_a: f64,
    pub mu_b: f64,
    pub alignment: f64,
}

/// Frobenius products needed to score μ_a·K_a + μ_b·K_b against K_z.
#[derive(Debug, Clone, Copy)]
struct PairProducts {
    az: f64,
    bz: f64,
    aa: f64,
    ab: f64,
    bb: f64,
    zz: f64,
}

fn pair_alignment(p: &PairProducts, mu_a: f64, mu_b: f64) -> f64 {
    let num = mu_a * p.az + mu_b * p.bz;
    let norm = mu_a * mu_a * p.aa + 2.0 * mu_a * mu_b * p.ab + mu_b * mu_b * p.bb;
    num / (norm * p.zz).sqrt()
}

fn solve_pair(p: &PairProducts) -> Result<PairWeights> {
    if !(p.zz > 0.0) {
        return Err(Error::numerical("target kernel has zero norm"));
    }
    let mut best: Option<PairWeights> = None;
    let mut consider = |mu_a: f64, mu_b: f64| {
        let alignment = pair_alignment(p, mu_a, mu_b);
        if alignment.is_finite() && best.is_none_or(|b| alignment > b.alignment) {
            best = Some(PairWeights {
                mu_a,
                mu_b,
                alignment,
            });
        }
    };
    // Boundary points first so exact ties resolve to (1, 0).
    if p.aa > 0.0 {
        consider(1.0, 0.0);
    }
    if p.bb > 0.0 {
        consider(0.0, 1.0);
    }
    // Stationary point of the alignment: μ ∝ M⁻¹a with M the 2×2 Gram matrix.
    let det = p.aa * p.bb - p.ab * p.ab;
    if det > 1e-12 * p.aa * p.bb {
        let u = (p.bb * p.az - p.ab * p.bz) / det;
        let v = (p.aa * p.bz - p.ab * p.az) / det;
        if u > 0.0 && v > 0.0 {
            let s = u + v;
            consider(u / s, v / s);
        }
    }
    match best {
        Some(w) if w.alignment > 0.0 || det > 1e-12 * p.aa * p.bb => Ok(w),
        _ => Err(Error::numerical(
            "pair weights undefined: kernels are degenerate or orthogonal to the target",
        )),
    }
}

/// Non-negative (μ_a, μ_b), summing to 1, maximising A(μ_a·K_a + μ_b·K_b, K_z).
///
/// With a = (⟨K_a,K_z⟩, ⟨K_b,K_z⟩) and M the Gram matrix of ⟨K_·,K_·⟩, the
/// unconstrained maximiser is proportional to M⁻¹a. When that has a
/// non-positive component the optimum sits on a boundary, and the better of
/// (1,0) and (0,1) is returned, preferring (1,0) on ties.
pub fn solve_pair_weights(
    ka: &KernelMatrix,
    kb: &KernelMatrix,
    kz: &KernelMatrix,
) -> Result<PairWeights> {
    let p = PairProducts {
        az: frobenius_inner(ka, kz)?,
        bz: frobenius_inner(kb, kz)?,
        aa: frobenius_inner(ka, ka)?,
        ab: frobenius_inner(ka, kb)?,
        bb: frobenius_inner(kb, kb)?,
        zz: frobenius_inner(kz, kz)?,
    };
    solve_pair(&p)
}

/// Greedy selection of at most `config.p` kernels.
pub fn greedy_select(
    candidates: &[KernelMatrix],
    kz: &KernelMatrix,
    config: &MklConfig,
) -> Result<MklSolution> {
    let mut path = greedy_path(candidates, kz, config, &[config.p])?;
    Ok(path.pop().expect("one checkpoint requested"))
}

/// Runs the greedy loop once up to the largest requested size and returns
/// the solution as it stood when each size in `sizes` was reached (or the
/// final solution if the loop stopped earlier). Identical to calling
/// [`greedy_select`] once per size.
pub fn greedy_path(
    candidates: &[KernelMatrix],
    kz: &KernelMatrix,
    config: &MklConfig,
    sizes: &[usize],
) -> Result<Vec<MklSolution>> {
    config.validate()?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::invalid_arg("checkpoint sizes must be non-empty and >= 1"));
    }
    if candidates.is_empty() {
        return Err(Error::invalid_arg("no candidate kernels"));
    }
    if let Some(k) = candidates.iter().find(|k| k.n() != kz.n()) {
        return Err(Error::shape(format!("{}×{} kernels", kz.n(), kz.n()), k.n()));
    }
    let usable: Vec<usize> = (0..candidates.len())
        .filter(|&j| !candidates[j].is_degenerate())
        .collect();
    if usable.is_empty() {
        return Err(Error::invalid_data("every candidate kernel is degenerate"));
    }
    let max_p = *sizes.iter().max().expect("non-empty");

    let d = candidates.len();
    let zz = frobenius_raw(kz.entries(), kz.entries());
    let (cz, cc): (Vec<f64>, Vec<f64>) = (0..d)
        .into_par_iter()
        .map(|j| {
            if candidates[j].is_degenerate() {
                (0.0, 0.0)
            } else {
                let e = candidates[j].entries();
                (frobenius_raw(e, kz.entries()), frobenius_raw(e, e))
            }
        })
        .unzip();

    // First pick: best standalone alignment, lowest index on ties.
    let mut first: Option<(usize, f64)> = None;
    for &j in &usable {
        let a = alignment_from_products(cz[j], cc[j], zz)?;
        if first.is_none_or(|(_, best)| a > best) {
            first = Some((j, a));
        }
    }
    let (first, first_alignment) = first.expect("usable is non-empty");

    let mut state = GreedyState {
        mu: vec![0.0; d],
        selected: vec![first],
        trajectory: vec![first_alignment],
        mz: cz[first],
        mm: cc[first],
        cross: vec![0.0; d],
        remaining: usable.iter().copied().filter(|&j| j != first).collect(),
    };
    state.mu[first] = 1.0;
    state.fold_in(candidates, first, 0.0, 1.0);

    let mut rng = seed::rng(config.seed);
    let mut snapshots: Vec<Option<MklSolution>> = vec![None; sizes.len()];
    let record = |snapshots: &mut Vec<Option<MklSolution>>, state: &GreedyState, reason| {
        for (slot, &size) in snapshots.iter_mut().zip(sizes) {
            if slot.is_none() && size == state.selected.len() {
                *slot = Some(state.solution(reason));
            }
        }
    };

    let stop_reason = loop {
        if state.selected.len() >= max_p {
            break StopReason::TargetSize;
        }
        record(&mut snapshots, &state, StopReason::TargetSize);
        if state.remaining.is_empty() {
            break StopReason::CandidatesExhausted;
        }
        let pool: Vec<usize> = match config.candidate_subsample {
            Some(m) if m < state.remaining.len() => {
                let mut picks = index::sample(&mut rng, state.remaining.len(), m).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(|i| state.remaining[i]).collect()
            }
            _ => state.remaining.clone(),
        };
        let scored: Vec<Result<(usize, PairWeights)>> = pool
            .par_iter()
            .map(|&j| {
                let products = PairProducts {
                    az: state.mz,
                    bz: cz[j],
                    aa: state.mm,
                    ab: state.cross[j],
                    bb: cc[j],
                    zz,
                };
                solve_pair(&products).map(|w| (j, w))
            })
            .collect();
        // pool is in ascending index order, so strict > keeps the lowest index on ties
        let mut best: Option<(usize, PairWeights)> = None;
        for r in scored {
            let (j, w) = r?;
            if best.is_none_or(|(_, b)| w.alignment > b.alignment) {
                best = Some((j, w));
            }
        }
        let current = *state.trajectory.last().expect("non-empty");
        match best {
            Some((j, w)) if w.alignment - current > config.improvement_tolerance
                && w.mu_a > 0.0
                && w.mu_b > 0.0 => {
                state.accept(candidates, j, w, &cz, &cc);
            }
            _ => break StopReason::NoImprovement,
        }
    };

    let last = state.solution(stop_reason);
    Ok(snapshots
        .into_iter()
        .map(|s| s.unwrap_or_else(|| last.clone()))
        .collect())
}

struct GreedyState {
    mu: Vec<f64>,
    selected: Vec<usize>,
    trajectory: Vec<f64>,
    /// ⟨K_μ, K_z⟩
    mz: f64,
    /// ⟨K_μ, K_μ⟩
    mm: f64,
    /// ⟨K_μ, K_j⟩ for every still-remaining j
    cross: Vec<f64>,
    remaining: Vec<usize>,
}

impl GreedyState {
    /// cross[l] ← keep·cross[l] + add·⟨K_new, K_l⟩ over remaining l.
    fn fold_in(&mut self, candidates: &[KernelMatrix], new: usize, keep: f64, add: f64) {
        let e_new = candidates[new].entries();
        let updates: Vec<(usize, f64)> = self
            .remaining
            .par_iter()
            .map(|&l| (l, frobenius_raw(e_new, candidates[l].entries())))
            .collect();
        for (l, inner) in updates {
            self.cross[l] = keep * self.cross[l] + add * inner;
        }
    }

    fn accept(
        &mut self,
        candidates: &[KernelMatrix],
        j: usize,
        w: PairWeights,
        cz: &[f64],
        cc: &[f64],
    ) {
        let (m1, m2) = (w.mu_a, w.mu_b);
        for &s in &self.selected {
            self.mu[s] *= m1;
        }
        self.mu[j] = m2;
        self.mm = m1 * m1 * self.mm + 2.0 * m1 * m2 * self.cross[j] + m2 * m2 * cc[j];
        self.mz = m1 * self.mz + m2 * cz[j];
        self.selected.push(j);
        self.trajectory.push(w.alignment);
        self.remaining.retain(|&l| l != j);
        self.fold_in(candidates, j, m1, m2);
    }

    fn solution(&self, stop_reason: StopReason) -> MklSolution {
        let total: f64 = self.selected.iter().map(|&i| self.mu[i]).sum();
        let mu = self.mu.iter().map(|m| m / total).collect();
        MklSolution {
            mu,
            selected: self.selected.clone(),
            alignment_trajectory: self.trajectory.clone(),
            target_alignment: *self.trajectory.last().expect("non-empty"),
            stop_reason,
        }
    }
}

/// K_μ = Σ μᵢ Kᵢ over the selected features.
pub fn combined_kernel(solution: &MklSolution, candidates: &[KernelMatrix]) -> Result<KernelMatrix> {
    let first = *solution
        .selected
        .first()
        .ok_or_else(|| Error::invalid_arg("solution selects no features"))?;
    if let Some(&bad) = solution
        .selected
        .iter()
        .find(|&&i| i >= candidates.len() || i >= solution.mu.len())
    {
        return Err(Error::invalid_arg(format!(
            "selected index {bad} out of range for {} candidates",
            candidates.len()
        )));
    }
    let n = candidates[first].n();
    let mut acc = Array2::<f64>::zeros((n, n));
    for &i in &solution.selected {
        let k = &candidates[i];
        if k.n() != n {
            return Err(Error::shape(n, k.n()));
        }
        acc.scaled_add(solution.mu[i], k.entries());
    }
    // Every diagonal entry is the same rounded Σμ; dividing by it restores
    // an exact unit diagonal and keeps all entries ≤ 1.
    let diag = acc[[0, 0]];
    if diag != 1.0 {
        acc.mapv_inplace(|v| v / diag);
    }
    Ok(KernelMatrix::combined(acc))
}
