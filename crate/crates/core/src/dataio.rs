//! Loading, validating, preprocessing and resampling sample-by-feature
//! matrices, plus the synthetic fixtures used in tests and demos.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// n samples × d features with identifiers on both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    values: Array2<f64>,
    sample_ids: Vec<String>,
    feature_names: Vec<String>,
}

impl ExpressionMatrix {
    pub fn new(
        values: Array2<f64>,
        sample_ids: Vec<String>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if values.nrows() != sample_ids.len() {
            return Err(Error::shape(
                format!("{} sample ids", values.nrows()),
                sample_ids.len(),
            ));
        }
        if values.ncols() != feature_names.len() {
            return Err(Error::shape(
                format!("{} feature names", values.ncols()),
                feature_names.len(),
            ));
        }
        if let Some(((r, c), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid_data(format!(
                "non-finite value {v} at sample {} / feature {}",
                sample_ids[r], feature_names[c]
            )));
        }
        check_unique(&sample_ids, "sample id")?;
        check_unique(&feature_names, "feature name")?;
        Ok(Self {
            values,
            sample_ids,
            feature_names,
        })
    }

    /// Builds a matrix with generated identifiers `s{i}` / `f{j}`.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let sample_ids = (0..values.nrows()).map(|i| format!("s{i}")).collect();
        let feature_names = (0..values.ncols()).map(|j| format!("f{j}")).collect();
        Self::new(values, sample_ids, feature_names)
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.values.column(j)
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    /// Columns in the given order.
    pub fn select_features(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&j| j >= self.n_features()) {
            return Err(Error::invalid_arg(format!(
                "feature index {bad} out of range for {} features",
                self.n_features()
            )));
        }
        Self::new(
            self.values.select(Axis(1), indices),
            self.sample_ids.clone(),
            indices.iter().map(|&j| self.feature_names[j].clone()).collect(),
        )
    }

    /// Rows in the given order.
    pub fn select_samples(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_samples()) {
            return Err(Error::invalid_arg(format!(
                "sample index {bad} out of range for {} samples",
                self.n_samples()
            )));
        }
        Self::new(
            self.values.select(Axis(0), indices),
            indices.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            self.feature_names.clone(),
        )
    }
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::invalid_data(format!("duplicate {what} {id:?}")));
        }
    }
    Ok(())
}

/// Which axis of the file holds samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// One sample per line, features as columns.
    #[default]
    Rows,
    /// One feature per line, samples as columns; transposed on load.
    Cols,
}

impl std::str::FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rows" | "samples-as-rows" => Ok(Orientation::Rows),
            "cols" | "features-as-rows" => Ok(Orientation::Cols),
            other => Err(Error::invalid_arg(format!(
                "orientation must be 'rows' or 'cols', got {other:?}"
            ))),
        }
    }
}

fn detect_delimiter(header: &str) -> char {
    if header.contains('\t') {
        '\t'
    } else {
        ','
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads a delimited matrix file.
///
/// The header line names the columns (its first cell is ignored) and the
/// first cell of every following line names the row. Tab or comma is picked
/// from the header line.
pub fn load_matrix(path: impl AsRef<Path>, orientation: Orientation) -> Result<ExpressionMatrix> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());

    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path.to_owned(),
        line: 1,
        column: 1,
        message: "empty file".into(),
    })?;
    let delim = detect_delimiter(header);
    let col_names: Vec<String> = header
        .split(delim)
        .skip(1)
        .map(|c| c.trim().to_string())
        .collect();
    if col_names.is_empty() {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: 1,
            column: 2,
            message: "header has no data columns".into(),
        });
    }

    let mut row_names = Vec::new();
    let mut data = Vec::new();
    for (lineno, line) in lines {
        let mut cells = line.split(delim);
        let name = cells.next().unwrap_or_default().trim().to_string();
        let mut count = 0;
        for (j, cell) in cells.enumerate() {
            let cell = cell.trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.to_owned(),
                line: lineno + 1,
                column: j + 2,
                message: format!(
                    "non-numeric cell {cell:?} (row {name:?}, column {:?})",
                    col_names.get(j).map(String::as_str).unwrap_or("?")
                ),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: lineno + 1,
                    column: j + 2,
                    message: format!("non-finite cell {cell:?} (row {name:?})"),
                });
            }
            data.push(v);
            count += 1;
        }
        if count != col_names.len() {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: lineno + 1,
                column: count + 2,
                message: format!(
                    "ragged row {name:?}: {count} values, header has {}",
                    col_names.len()
                ),
            });
        }
        row_names.push(name);
    }
    if row_names.is_empty() {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: 2,
            column: 1,
            message: "no data rows".into(),
        });
    }

    let values = Array2::from_shape_vec((row_names.len(), col_names.len()), data)
        .expect("row lengths checked above");
    let (values, samples, features) = match orientation {
        Orientation::Rows => (values, row_names, col_names),
        Orientation::Cols => (values.reversed_axes().as_standard_layout().to_owned(), col_names, row_names),
    };
    ExpressionMatrix::new(values, samples, features).map_err(|e| e.context(path.display().to_string()))
}

/// Writes a tab-separated samples-as-rows file readable by [`load_matrix`].
/// Values use the shortest representation that parses back to the same bits.
pub fn save_matrix(x: &ExpressionMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str("sample");
    for f in x.feature_names() {
        out.push('\t');
        out.push_str(f);
    }
    out.push('\n');
    for (i, row) in x.values().rows().into_iter().enumerate() {
        out.push_str(&x.sample_ids()[i]);
        for v in row {
            out.push('\t');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Categorical ground-truth labels keyed by sample id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelVector {
    labels: BTreeMap<String, String>,
}

impl LabelVector {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut labels = BTreeMap::new();
        for (id, label) in pairs {
            if labels.insert(id.clone(), label).is_some() {
                return Err(Error::invalid_data(format!("duplicate sample id {id:?} in labels")));
            }
        }
        if labels.is_empty() {
            return Err(Error::invalid_data("label set is empty"));
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&str> {
        self.labels.get(sample_id).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.labels.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Distinct class names, sorted.
    pub fn classes(&self) -> Vec<&str> {
        self.labels
            .values()
            .map(String::as_str)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Integer class codes for `sample_ids`, in order. Every id must be labelled.
    pub fn encode(&self, sample_ids: &[String]) -> Result<Vec<usize>> {
        let classes = self.classes();
        sample_ids
            .iter()
            .map(|id| {
                let label = self.get(id).ok_or_else(|| {
                    Error::invalid_data(format!("sample {id:?} has no ground-truth label"))
                })?;
                Ok(classes.binary_search(&label).expect("label drawn from classes"))
            })
            .collect()
    }

    /// Positions in `sample_ids` that carry a label, and their class codes.
    pub fn intersect(&self, sample_ids: &[String]) -> (Vec<usize>, Vec<usize>) {
        let classes = self.classes();
        sample_ids
            .iter()
            .enumerate()
            .filter_map(|(i, id)| {
                self.get(id)
                    .map(|l| (i, classes.binary_search(&l).expect("label drawn from classes")))
            })
            .unzip()
    }
}

/// Reads a two-column `sample_id, label` file. A first line whose second
/// cell is `label` is treated as a header.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVector> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    let mut delim = None;
    let mut first = true;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d = *delim.get_or_insert_with(|| detect_delimiter(line));
        let cells: Vec<&str> = line.split(d).map(str::trim).collect();
        if cells.len() != 2 {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: lineno + 1,
                column: cells.len().min(2) + 1,
                message: format!("expected 2 columns, found {}", cells.len()),
            });
        }
        let is_header = first
            && cells[1].parse::<f64>().is_err()
            && cells[1].eq_ignore_ascii_case("label");
        first = false;
        if is_header {
            continue;
        }
        if !seen.insert(cells[0].to_string()) {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: lineno + 1,
                column: 1,
                message: format!("duplicate sample id {:?}", cells[0]),
            });
        }
        pairs.push((cells[0].to_string(), cells[1].to_string()));
    }
    if pairs.is_empty() {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: 1,
            column: 1,
            message: "empty label file".into(),
        });
    }
    LabelVector::new(pairs)
}

pub fn save_labels(labels: &LabelVector, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("sample\tlabel\n");
    for (id, label) in labels.iter() {
        out.push_str(id);
        out.push('\t');
        out.push_str(label);
        out.push('\n');
    }
    write_file(path.as_ref(), out.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub variance_keep_fraction: f64,
    pub subsample_fraction: f64,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            variance_keep_fraction: 0.5,
            subsample_fraction: 0.8,
            repetitions: 10,
            seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        check_fraction("variance_keep_fraction", self.variance_keep_fraction)?;
        check_fraction("subsample_fraction", self.subsample_fraction)?;
        if self.repetitions == 0 {
            return Err(Error::invalid_arg("repetitions must be at least 1"));
        }
        Ok(())
    }
}

fn check_fraction(name: &str, f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid_arg(format!("{name} must lie in (0, 1], got {f}")))
    }
}

/// ⌊fraction · count⌋, tolerant of representation error such as 0.29 · 100.
fn fraction_of(fraction: f64, count: usize) -> usize {
    (fraction * count as f64 + 1e-9).floor() as usize
}

/// Maps every column affinely onto [0, 1]. Constant columns become zeros.
pub fn minmax_scale(x: &ExpressionMatrix) -> ExpressionMatrix {
    let mut values = x.values.clone();
    for mut col in values.columns_mut() {
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        if range > 0.0 {
            col.mapv_inplace(|v| (v - lo) / range);
        } else {
            col.fill(0.0);
        }
    }
    ExpressionMatrix {
        values,
        sample_ids: x.sample_ids.clone(),
        feature_names: x.feature_names.clone(),
    }
}

/// Unbiased sample variance; zero for a single observation.
pub fn sample_variance(col: ArrayView1<'_, f64>) -> f64 {
    let n = col.len();
    if n < 2 {
        return 0.0;
    }
    let mean = col.sum() / n as f64;
    col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Indices of the columns [`variance_filter`] keeps, in original order.
pub fn variance_ranking_keep(x: &ExpressionMatrix, keep_fraction: f64) -> Result<Vec<usize>> {
    check_fraction("keep_fraction", keep_fraction)?;
    let keep = fraction_of(keep_fraction, x.n_features());
    if keep == 0 {
        return Err(Error::invalid_arg(format!(
            "variance filter keeping {keep_fraction} of {} features leaves none",
            x.n_features()
        )));
    }
    let variances: Vec<f64> = x.values.columns().into_iter().map(sample_variance).collect();
    let mut order: Vec<usize> = (0..variances.len()).collect();
    // stable sort: equal variances stay in ascending index order
    order.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Keeps the ⌊keep_fraction · d⌋ highest-variance columns.
pub fn variance_filter(x: &ExpressionMatrix, keep_fraction: f64) -> Result<ExpressionMatrix> {
    let kept = variance_ranking_keep(x, keep_fraction)?;
    x.select_features(&kept)
}

/// Draws ⌊fraction · n⌋ rows uniformly without replacement.
pub fn subsample(x: &ExpressionMatrix, fraction: f64, seed: u64) -> Result<ExpressionMatrix> {
    check_fraction("fraction", fraction)?;
    let m = fraction_of(fraction, x.n_samples());
    if m < 2 {
        return Err(Error::invalid_arg(format!(
            "subsampling {fraction} of {} samples leaves {m} (< 2)",
            x.n_samples()
        )));
    }
    let mut rng = seed::rng(seed);
    let rows = index::sample(&mut rng, x.n_samples(), m).into_vec();
    x.select_samples(&rows)
}

/// Scaling followed by the variance filter.
pub fn preprocess(x: &ExpressionMatrix, config: &PreprocessConfig) -> Result<ExpressionMatrix> {
    config.validate()?;
    variance_filter(&minmax_scale(x), config.variance_keep_fraction)
}

fn sample_names(n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len().max(3);
    (0..n).map(|i| format!("s{i:0width$}")).collect()
}

fn balanced_labels(ids: &[String]) -> LabelVector {
    let half = ids.len() / 2;
    LabelVector::new(
        ids.iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), if i < half { "c0" } else { "c1" }.to_string())),
    )
    .expect("generated ids are unique")
}

/// Two balanced Gaussian classes. The first `informative` features carry a
/// mean shift of `separation` between classes; the rest are pure noise.
pub fn generate_synthetic(
    n: usize,
    d: usize,
    informative: usize,
    separation: f64,
    seed: u64,
) -> Result<(ExpressionMatrix, LabelVector)> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::invalid_arg(format!("n must be even and >= 2, got {n}")));
    }
    if d == 0 || informative > d {
        return Err(Error::invalid_arg(format!(
            "need 0 <= informative ({informative}) <= d ({d}) and d >= 1"
        )));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::invalid_arg(format!("separation must be > 0, got {separation}")));
    }
    let mut rng = seed::rng(seed);
    let half = n / 2;
    let values = Array2::from_shape_fn((n, d), |(i, j)| {
        let noise: f64 = StandardNormal.sample(&mut rng);
        if i >= half && j < informative {
            noise + separation
        } else {
            noise
        }
    });
    let width = d.saturating_sub(1).to_string().len().max(3);
    let features = (0..d).map(|j| format!("f{j:0width$}")).collect();
    let ids = sample_names(n);
    let labels = balanced_labels(&ids);
    Ok((ExpressionMatrix::new(values, ids, features)?, labels))
}

/// A fixture with built-in redundancy: each of `informative` class-separating
/// signals appears `copies` times (each copy adds independent Gaussian jitter
/// with standard deviation `jitter`), followed by `noise` pure-noise features.
/// Copy `c` of signal `g` is named `g{g}_{c}`; noise features `n{j}`.
pub fn generate_redundant(
    n: usize,
    informative: usize,
    copies: usize,
    noise: usize,
    separation: f64,
    jitter: f64,
    seed: u64,
) -> Result<(ExpressionMatrix, LabelVector)> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::invalid_arg(format!("n must be even and >= 2, got {n}")));
    }
    if informative == 0 || copies == 0 {
        return Err(Error::invalid_arg("informative and copies must be >= 1"));
    }
    if !(separation > 0.0) || !(jitter >= 0.0) {
        return Err(Error::invalid_arg("separation must be > 0 and jitter >= 0"));
    }
    let mut rng = seed::rng(seed);
    let half = n / 2;
    let d = informative * copies + noise;
    let mut values = Array2::zeros((n, d));
    let mut names = Vec::with_capacity(d);
    for g in 0..informative {
        let base: Vec<f64> = (0..n)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                if i >= half {
                    z + separation
                } else {
                    z
                }
            })
            .collect();
        for c in 0..copies {
            let j = g * copies + c;
            for i in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                values[[i, j]] = base[i] + jitter * z;
            }
            names.push(format!("g{g}_{c}"));
        }
    }
    for k in 0..noise {
        let j = informative * copies + k;
        for i in 0..n {
            values[[i, j]] = StandardNormal.sample(&mut rng);
        }
        names.push(format!("n{k}"));
    }
    let ids = sample_names(n);
    let labels = balanced_labels(&ids);
    Ok((ExpressionMatrix::new(values, ids, names)?, labels))
}
