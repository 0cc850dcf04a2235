//! Redundancy scoring, 2-D projections and report aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::{write_file, ExpressionMatrix};
use crate::error::{Error, Result};
use crate::linalg::{pearson, symmetric_eigen};

/// Feature selection method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lkfs,
    Skm,
    Spec,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Lkfs, Method::Skm, Method::Spec];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lkfs => "lkfs",
            Method::Skm => "skm",
            Method::Spec => "spec",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lkfs" => Ok(Method::Lkfs),
            "skm" => Ok(Method::Skm),
            "spec" => Ok(Method::Spec),
            other => Err(Error::invalid_arg(format!(
                "unknown method {other:?} (expected lkfs, skm or spec)"
            ))),
        }
    }
}

/// Mean absolute Pearson correlation over ordered pairs of distinct
/// selected features.
pub fn red_score(x: &ExpressionMatrix, selected: &[usize]) -> Result<f64> {
    let p = selected.len();
    if p < 2 {
        return Err(Error::invalid_arg(format!(
            "RED needs at least 2 selected features, got {p}"
        )));
    }
    if let Some(&j) = selected.iter().find(|&&j| j >= x.n_features()) {
        return Err(Error::invalid_arg(format!(
            "feature index {j} out of range for {} features",
            x.n_features()
        )));
    }
    let mut total = 0.0;
    for (a, &i) in selected.iter().enumerate() {
        for &j in &selected[a + 1..] {
            let r = pearson(x.column(i), x.column(j)).ok_or_else(|| {
                let constant = if pearson(x.column(i), x.column(i)).is_none() {
                    i
                } else {
                    j
                };
                Error::invalid_data(format!(
                    "feature {:?} is constant; correlation undefined",
                    x.feature_names()[constant]
                ))
            })?;
            total += r.abs();
        }
    }
    Ok(2.0 * total / (p * (p - 1)) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2d {
    /// n × 2 coordinates on the first two principal components.
    pub coords: Array2<f64>,
    /// Variance captured by each component.
    pub variances: [f64; 2],
    /// Set when the centred data has rank below two; the second
    /// coordinate is then all zeros.
    pub rank_deficient: bool,
}

/// Projection onto the top two principal components of the column-centred
/// matrix. Each component's largest-magnitude loading is made positive.
pub fn pca_2d(x: ArrayView2<'_, f64>) -> Result<Projection2d> {
    let (n, m) = x.dim();
    if n < 3 {
        return Err(Error::invalid_arg(format!("PCA needs at least 3 samples, got {n}")));
    }
    if m == 0 {
        return Err(Error::invalid_arg("PCA needs at least one column"));
    }
    let mean = x.mean_axis(Axis(0)).expect("n > 0");
    let centered = &x - &mean;
    let dof = (n - 1) as f64;

    // loadings: m × 2 unit vectors, variances: eigenvalues / (n − 1)
    let (loadings, eig) = if m <= n {
        let cov = centered.t().dot(&centered) / dof;
        let (values, vectors) = symmetric_eigen(cov.view());
        let take = m.min(2);
        let mut l = Array2::<f64>::zeros((m, 2));
        for c in 0..take {
            l.column_mut(c).assign(&vectors.column(c));
        }
        let ev = [values[0], if take > 1 { values[1] } else { 0.0 }];
        (l, ev)
    } else {
        let gram = centered.dot(&centered.t());
        let (values, vectors) = symmetric_eigen(gram.view());
        let mut l = Array2::<f64>::zeros((m, 2));
        for c in 0..2 {
            if values[c] > 0.0 {
                let v = centered.t().dot(&vectors.column(c)) / values[c].sqrt();
                l.column_mut(c).assign(&v);
            }
        }
        (l, [values[0] / dof, values[1] / dof])
    };

    let magnitude = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if eig[0].is_nan() || eig[0] <= (1e-12 * magnitude).powi(2) {
        return Err(Error::invalid_data("PCA input has no variance"));
    }
    let rank_deficient = eig[1] <= 1e-10 * eig[0];

    let mut loadings = loadings;
    for c in 0..2 {
        let col = loadings.column(c);
        let mut best = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() + 1e-12 {
                best = i;
            }
        }
        if col[best] < 0.0 {
            loadings.column_mut(c).mapv_inplace(|v| -v);
        }
    }
    let mut coords = centered.dot(&loadings);
    if rank_deficient {
        coords.column_mut(1).fill(0.0);
    }
    Ok(Projection2d {
        coords,
        variances: [eig[0], if rank_deficient { 0.0 } else { eig[1] }],
        rank_deficient,
    })
}

/// Clustering quality for one (repetition, p, k) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub k: usize,
    pub rand_index: Option<f64>,
    pub adjusted_rand_index: Option<f64>,
    pub inertia: f64,
}

/// Selection and clustering results for one (repetition, p).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRecord {
    pub repetition: usize,
    pub seed: u64,
    pub p: usize,
    pub selected: Vec<String>,
    /// Null when fewer than two features were selected.
    pub red: Option<f64>,
    pub clusters: Vec<ClusterRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    /// None when `values` is empty.
    pub fn of(values: &[f64]) -> Option<Self> {
        let count = values.len();
        if count == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let sd = if count > 1 {
            let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (count - 1) as f64).sqrt()
        } else {
            0.0
        };
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Self {
            count,
            mean: mean.clamp(min, max),
            sd,
            min,
            max,
        })
    }
}

/// Aggregate over repetitions for one (p, k) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub p: usize,
    pub k: usize,
    pub repetitions: usize,
    pub red: Option<Summary>,
    pub rand_index: Option<Summary>,
    pub adjusted_rand_index: Option<Summary>,
    pub inertia: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: Method,
    pub dataset: String,
    /// Sorted by (repetition, p).
    pub records: Vec<RepetitionRecord>,
    /// Sorted by (p, k).
    pub aggregates: Vec<CellAggregate>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn cell(&self, p: usize, k: usize) -> Option<&CellAggregate> {
        self.aggregates.iter().find(|c| c.p == p && c.k == k)
    }

    pub fn cluster_record_count(&self) -> usize {
        self.records.iter().map(|r| r.clusters.len()).sum()
    }
}

/// Per-cell mean and sample standard deviation. Records are first sorted by
/// (repetition, p) so the result does not depend on input order.
pub fn aggregate(
    method: Method,
    dataset: &str,
    records: Vec<RepetitionRecord>,
) -> Result<EvaluationReport> {
    if records.is_empty() {
        return Err(Error::invalid_arg("cannot aggregate zero records"));
    }
    let mut records = records;
    records.sort_by_key(|r| (r.repetition, r.p));
    for w in records.windows(2) {
        if (w[0].repetition, w[0].p) == (w[1].repetition, w[1].p) {
            return Err(Error::invalid_data(format!(
                "duplicate record for repetition {} and p = {}",
                w[0].repetition, w[0].p
            )));
        }
    }
    let k_set = |r: &RepetitionRecord| r.clusters.iter().map(|c| c.k).collect::<Vec<_>>();
    let reference = k_set(&records[0]);
    let mut seen = reference.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != reference.len() {
        return Err(Error::invalid_data("duplicate k within a record"));
    }
    if let Some(bad) = records.iter().find(|r| k_set(r) != reference) {
        return Err(Error::invalid_data(format!(
            "record for repetition {} and p = {} has k values {:?}, expected {:?}",
            bad.repetition,
            bad.p,
            k_set(bad),
            reference
        )));
    }

    let mut by_p: BTreeMap<usize, Vec<&RepetitionRecord>> = BTreeMap::new();
    for r in &records {
        by_p.entry(r.p).or_default().push(r);
    }
    let mut aggregates = Vec::new();
    for (&p, recs) in &by_p {
        let red: Vec<f64> = recs.iter().filter_map(|r| r.red).collect();
        let mut ks = reference.clone();
        ks.sort_unstable();
        for k in ks {
            let cells: Vec<&ClusterRecord> = recs
                .iter()
                .map(|r| r.clusters.iter().find(|c| c.k == k).expect("k sets checked"))
                .collect();
            let ri: Vec<f64> = cells.iter().filter_map(|c| c.rand_index).collect();
            let ari: Vec<f64> = cells.iter().filter_map(|c| c.adjusted_rand_index).collect();
            let inertia: Vec<f64> = cells.iter().map(|c| c.inertia).collect();
            aggregates.push(CellAggregate {
                p,
                k,
                repetitions: recs.len(),
                red: Summary::of(&red),
                rand_index: Summary::of(&ri),
                adjusted_rand_index: Summary::of(&ari),
                inertia: Summary::of(&inertia).expect("non-empty"),
            });
        }
    }
    Ok(EvaluationReport {
        method,
        dataset: dataset.to_string(),
        records,
        aggregates,
    })
}

/// Selected features with their weights, the common dump format for all
/// three selectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionDump {
    pub method: Method,
    pub selected: Vec<String>,
    /// Aligned with `selected`: MKL weights, SKM weights or SPEC scores.
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment_trajectory: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_alignment: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<String>,
}

/// Tab-separated `sample_id x y true_label cluster_id`; the label column is
/// empty for samples without one.
pub fn write_projection(
    path: impl AsRef<Path>,
    sample_ids: &[String],
    projection: &Projection2d,
    true_labels: Option<&[Option<String>]>,
    clusters: &[usize],
) -> Result<()> {
    let n = projection.coords.nrows();
    if sample_ids.len() != n || clusters.len() != n || true_labels.is_some_and(|t| t.len() != n) {
        return Err(Error::shape(format!("{n} rows"), "mismatched projection inputs"));
    }
    let mut out = String::from("sample_id\tx\ty\ttrue_label\tcluster_id\n");
    for i in 0..n {
        let label = true_labels
            .and_then(|t| t[i].as_deref())
            .unwrap_or_default();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            sample_ids[i],
            projection.coords[[i, 0]],
            projection.coords[[i, 1]],
            label,
            clusters[i]
        ));
    }
    write_file(path.as_ref(), out.as_bytes())
}

const PALETTE: [&str; 8] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666",
];

/// Static scatter plot of a projection, points coloured by cluster.
pub fn projection_svg(projection: &Projection2d, clusters: &[usize], title: &str) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 32.0;
    let coords = &projection.coords;
    let range = |c: usize| {
        let col = coords.column(c);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-12))
    };
    let (x0, xw) = range(0);
    let (y0, yw) = range(1);
    let inner = SIZE - 2.0 * PAD;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
        escape_xml(title)
    );
    for (i, &c) in clusters.iter().enumerate().take(coords.nrows()) {
        let x = PAD + (coords[[i, 0]] - x0) / xw * inner;
        let y = SIZE - PAD - (coords[[i, 1]] - y0) / yw * inner;
        svg.push_str(&format!(
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{}\"/>\n",
            PALETTE[c % PALETTE.len()]
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Variance of each column of a projection, for reporting.
pub fn column_variances(coords: ArrayView2<'_, f64>) -> Array1<f64> {
    coords.var_axis(Axis(0), 1.0)
}
