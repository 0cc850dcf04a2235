//! Gaussian Gram matrices, Frobenius inner products and kernel alignment.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{write_file, ExpressionMatrix};
use crate::error::{Error, Result};

/// What a kernel was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelSource {
    Latent,
    Feature(usize),
    Combined,
    /// Supplied directly by the caller.
    Explicit,
}

/// n×n symmetric Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    entries: Array2<f64>,
    bandwidth: f64,
    source: KernelSource,
    degenerate: bool,
}

impl KernelMatrix {
    /// Wraps an arbitrary symmetric matrix. Symmetry is checked exactly.
    pub fn from_entries(entries: Array2<f64>, source: KernelSource) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::shape("square matrix", format!("{:?}", entries.dim())));
        }
        let n = entries.nrows();
        for i in 0..n {
            for j in i + 1..n {
                if entries[[i, j]] != entries[[j, i]] {
                    return Err(Error::invalid_data(format!(
                        "kernel matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_data("kernel matrix has non-finite entries"));
        }
        Ok(Self {
            entries,
            bandwidth: f64::NAN,
            source,
            degenerate: false,
        })
    }

    pub(crate) fn combined(entries: Array2<f64>) -> Self {
        Self {
            entries,
            bandwidth: f64::NAN,
            source: KernelSource::Combined,
            degenerate: false,
        }
    }

    /// The kernel of a constant feature: every pair maximally similar.
    fn degenerate(n: usize, source: KernelSource) -> Self {
        Self {
            entries: Array2::ones((n, n)),
            bandwidth: f64::NAN,
            source,
            degenerate: true,
        }
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    /// Bandwidth σ; NaN for kernels not built by [`gaussian_kernel`].
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn source(&self) -> KernelSource {
        self.source
    }

    /// Built from a constant column; carries no information and is never
    /// offered to the selector.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            entries: &self.entries * c,
            ..self.clone()
        }
    }
}

/// Bandwidth used for the feature-wise kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthMode {
    /// Median of each feature's own 1-D pairwise distances.
    #[default]
    PerFeature,
    /// One median over full-dimensional sample distances, shared by all features.
    Global,
}

fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn pairwise_distances(points: ArrayView2<'_, f64>) -> Vec<f64> {
    let n = points.nrows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        let a = points.row(i);
        for j in i + 1..n {
            out.push(squared_distance(a, points.row(j)).sqrt());
        }
    }
    out
}

/// Median of the n(n−1)/2 pairwise Euclidean distances between rows.
/// An even count takes the mean of the two middle values.
pub fn median_bandwidth(points: ArrayView2<'_, f64>) -> Result<f64> {
    if points.nrows() < 2 {
        return Err(Error::invalid_arg("median bandwidth needs at least 2 points"));
    }
    let mut dists = pairwise_distances(points);
    if dists.iter().any(|d| !d.is_finite()) {
        return Err(Error::numerical("non-finite pairwise distance"));
    }
    if dists.iter().all(|&d| d == 0.0) {
        return Err(Error::numerical("all points identical; bandwidth undefined"));
    }
    let m = dists.len();
    let (_, &mut upper, _) = dists.select_nth_unstable_by(m / 2, f64::total_cmp);
    if m % 2 == 1 {
        Ok(upper)
    } else {
        // lower middle is the max of the left partition
        let lower = dists[..m / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(0.5 * (lower + upper))
    }
}

/// K[i][j] = exp(−‖xᵢ − xⱼ‖² / 2σ²), computed once per unordered pair.
///
/// Entries are floored at the smallest positive normal double so that
/// far-apart pairs stay strictly positive instead of underflowing to zero.
pub fn gaussian_kernel(points: ArrayView2<'_, f64>, sigma: f64) -> Result<KernelMatrix> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid_arg(format!("bandwidth must be positive, got {sigma}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_data("non-finite input to gaussian kernel"));
    }
    let n = points.nrows();
    let denom = 2.0 * sigma * sigma;
    let mut k = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        k[[i, i]] = 1.0;
        let a = points.row(i);
        for j in i + 1..n {
            let v = (-squared_distance(a, points.row(j)) / denom)
                .exp()
                .max(f64::MIN_POSITIVE);
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    Ok(KernelMatrix {
        entries: k,
        bandwidth: sigma,
        source: KernelSource::Explicit,
        degenerate: false,
    })
}

/// Gaussian kernel with median-heuristic bandwidth over the latent rows.
pub fn target_kernel(latent: ArrayView2<'_, f64>) -> Result<KernelMatrix> {
    let sigma = median_bandwidth(latent)?;
    let mut k = gaussian_kernel(latent, sigma)?;
    k.source = KernelSource::Latent;
    Ok(k)
}

/// One kernel per column of `x`. Constant columns produce a kernel flagged
/// [`KernelMatrix::is_degenerate`].
pub fn feature_kernels(x: &ExpressionMatrix, mode: BandwidthMode) -> Result<Vec<KernelMatrix>> {
    let n = x.n_samples();
    if n < 2 {
        return Err(Error::invalid_arg("feature kernels need at least 2 samples"));
    }
    let global = match mode {
        BandwidthMode::Global => Some(median_bandwidth(x.values().view())?),
        BandwidthMode::PerFeature => None,
    };
    (0..x.n_features())
        .into_par_iter()
        .map(|j| {
            let col = x.column(j).insert_axis(Axis(1));
            let constant = col.iter().all(|&v| v == col[[0, 0]]);
            if constant {
                return Ok(KernelMatrix::degenerate(n, KernelSource::Feature(j)));
            }
            let sigma = match global {
                Some(s) => s,
                None => median_bandwidth(col)?,
            };
            let mut k = gaussian_kernel(col, sigma)?;
            k.source = KernelSource::Feature(j);
            Ok(k)
        })
        .collect()
}

fn check_same_dim(a: &KernelMatrix, b: &KernelMatrix) -> Result<()> {
    if a.entries.dim() != b.entries.dim() {
        return Err(Error::shape(
            format!("{:?}", a.entries.dim()),
            format!("{:?}", b.entries.dim()),
        ));
    }
    Ok(())
}

/// Σᵢⱼ A[i][j]·B[i][j], summed in row-major order.
pub(crate) fn frobenius_raw(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(x), Some(y)) => x.iter().zip(y).map(|(p, q)| p * q).sum(),
        _ => a.iter().zip(b.iter()).map(|(p, q)| p * q).sum(),
    }
}

pub fn frobenius_inner(k1: &KernelMatrix, k2: &KernelMatrix) -> Result<f64> {
    check_same_dim(k1, k2)?;
    Ok(frobenius_raw(&k1.entries, &k2.entries))
}

/// ⟨K1,K2⟩ / √(⟨K1,K1⟩⟨K2,K2⟩) from precomputed inner products.
pub fn alignment_from_products(k12: f64, k11: f64, k22: f64) -> Result<f64> {
    let denom = (k11 * k22).sqrt();
    if !(denom > 0.0 && denom.is_finite()) {
        return Err(Error::numerical("alignment undefined: zero-norm kernel"));
    }
    Ok(k12 / denom)
}

/// Uncentered kernel alignment.
pub fn alignment(k1: &KernelMatrix, k2: &KernelMatrix) -> Result<f64> {
    check_same_dim(k1, k2)?;
    alignment_from_products(
        frobenius_raw(&k1.entries, &k2.entries),
        frobenius_raw(&k1.entries, &k1.entries),
        frobenius_raw(&k2.entries, &k2.entries),
    )
}

/// Tab-separated dense dump, one row per line.
pub fn write_kernel_text(k: &KernelMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for row in k.entries.rows() {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&line.join("\t"));
        out.push('\n');
    }
    write_file(path.as_ref(), out.as_bytes())
}

/// Binary dump: n as little-endian u64, then n² little-endian f64 row-major.
pub fn write_kernel_binary(k: &KernelMatrix, path: impl AsRef<Path>) -> Result<()> {
    let n = k.n();
    let mut buf = Vec::with_capacity(8 + 8 * n * n);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for v in k.entries.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path.as_ref(), &buf)
}

pub fn read_kernel_binary(path: impl AsRef<Path>) -> Result<KernelMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |message: String| Error::Format {
        path: path.to_owned(),
        message,
    };
    let header: [u8; 8] = bytes
        .get(..8)
        .and_then(|h| h.try_into().ok())
        .ok_or_else(|| malformed("missing 8-byte header".into()))?;
    let n = u64::from_le_bytes(header) as usize;
    let expected = n
        .checked_mul(n)
        .and_then(|m| m.checked_mul(8))
        .and_then(|m| m.checked_add(8))
        .ok_or_else(|| malformed(format!("implausible dimension {n}")))?;
    if bytes.len() != expected {
        return Err(malformed(format!(
            "expected {expected} bytes for n = {n}, found {}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let entries = Array2::from_shape_vec((n, n), values).expect("length checked");
    KernelMatrix::from_entries(entries, KernelSource::Explicit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn pts(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
    }

    fn sort_median(points: ArrayView2<'_, f64>) -> f64 {
        let mut d = Vec::new();
        for i in 0..points.nrows() {
            for j in i + 1..points.nrows() {
                let s: f64 = points
                    .row(i)
                    .iter()
                    .zip(points.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d.push(s.sqrt());
            }
        }
        d.sort_by(f64::total_cmp);
        let m = d.len();
        if m % 2 == 1 {
            d[m / 2]
        } else {
            0.5 * (d[m / 2 - 1] + d[m / 2])
        }
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_bandwidth(pts(&[0.0, 1.0, 3.0]).view()).unwrap(), 2.0);
        assert_eq!(median_bandwidth(pts(&[0.0, 1.0, 2.0]).view()).unwrap(), 1.0);
        // duplicates allowed: distances {0,1,1,1,1,0} -> sorted middle pair (1,1)
        assert_eq!(median_bandwidth(pts(&[0.0, 0.0, 1.0, 1.0]).view()).unwrap(), 1.0);
        assert!(median_bandwidth(pts(&[2.0, 2.0, 2.0]).view()).is_err());
        assert!(median_bandwidth(pts(&[2.0]).view()).is_err());
    }

    #[test]
    fn gaussian_examples() {
        let p = array![[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]];
        let k = gaussian_kernel(p.view(), 1.0).unwrap();
        assert_eq!(k.entries()[[0, 2]], 1.0);
        assert_abs_diff_eq!(k.entries()[[0, 1]], (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(k.entries()[[0, 1]], 0.367879, epsilon = 1e-6);
        let wide = gaussian_kernel(p.view(), 1e6).unwrap();
        assert!(wide.entries().iter().all(|&v| (v - 1.0).abs() < 1e-9));
        assert!(gaussian_kernel(p.view(), 0.0).is_err());
        assert!(gaussian_kernel(array![[f64::NAN]].view(), 1.0).is_err());
    }

    #[test]
    fn distant_pairs_stay_positive() {
        let k = gaussian_kernel(pts(&[0.0, 1e3]).view(), 1.0).unwrap();
        assert!(k.entries()[[0, 1]] > 0.0);
    }

    #[test]
    fn inner_product_and_alignment_closed_forms() {
        let i4 = KernelMatrix::from_entries(Array2::eye(4), KernelSource::Explicit).unwrap();
        let j4 = KernelMatrix::from_entries(Array2::ones((4, 4)), KernelSource::Explicit).unwrap();
        assert_eq!(frobenius_inner(&i4, &j4).unwrap(), 4.0);
        assert_eq!(alignment(&i4, &j4).unwrap(), 0.5);
        assert_eq!(alignment(&j4, &j4).unwrap(), 1.0);
        let two = KernelMatrix::from_entries(Array2::eye(2), KernelSource::Explicit).unwrap();
        assert!(frobenius_inner(&i4, &two).is_err());
        let zero = KernelMatrix::from_entries(Array2::zeros((4, 4)), KernelSource::Explicit).unwrap();
        assert!(alignment(&zero, &j4).is_err());
    }

    #[test]
    fn feature_kernels_flag_constants() {
        let x = ExpressionMatrix::from_values(array![[1.0, 5.0, 0.0], [2.0, 5.0, 3.0], [4.0, 5.0, 1.0]])
            .unwrap();
        let ks = feature_kernels(&x, BandwidthMode::PerFeature).unwrap();
        assert_eq!(ks.len(), 3);
        assert!(!ks[0].is_degenerate() && ks[1].is_degenerate() && !ks[2].is_degenerate());
        assert_eq!(ks[2].source(), KernelSource::Feature(2));
        for k in &ks {
            assert!((0..3).all(|i| k.entries()[[i, i]] == 1.0));
        }
        // column 0: distances {1,3,2} -> sigma 2
        assert_eq!(ks[0].bandwidth(), 2.0);
        let g = feature_kernels(&x, BandwidthMode::Global).unwrap();
        assert_eq!(g[0].bandwidth(), g[2].bandwidth());
    }

    #[test]
    fn binary_dump_round_trips() {
        let k = gaussian_kernel(array![[0.0], [0.3], [2.0]].view(), 0.7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.bin");
        write_kernel_binary(&k, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 8 + 9 * 8);
        assert_eq!(read_kernel_binary(&p).unwrap().entries(), k.entries());
        fs::write(&p, [1u8, 0, 0]).unwrap();
        assert!(read_kernel_binary(&p).is_err());
        write_kernel_text(&k, dir.path().join("k.tsv")).unwrap();
    }

    proptest! {
        #[test]
        fn median_matches_sort_oracle(v in proptest::collection::vec(-50.0f64..50.0, 6..40)) {
            let p = Array2::from_shape_vec((v.len() / 2, 2), v[..v.len() / 2 * 2].to_vec()).unwrap();
            prop_assume!(p.nrows() >= 2);
            let ours = median_bandwidth(p.view());
            let oracle = sort_median(p.view());
            if oracle == 0.0 && ours.is_err() {
                return Ok(());
            }
            prop_assert_eq!(ours.unwrap(), oracle);
        }

        #[test]
        fn alignment_is_symmetric_and_scale_invariant(
            v in proptest::collection::vec(-3.0f64..3.0, 10),
            c in 0.01f64..100.0,
        ) {
            let p = Array2::from_shape_vec((5, 2), v).unwrap();
            let k1 = gaussian_kernel(p.view(), 1.0).unwrap();
            let k2 = gaussian_kernel(p.column(0).insert_axis(Axis(1)), 0.5).unwrap();
            let a = alignment(&k1, &k2).unwrap();
            prop_assert!((a - alignment(&k2, &k1).unwrap()).abs() < 1e-15);
            prop_assert!((a - alignment(&k1.scaled(c), &k2).unwrap()).abs() < 1e-12);
            prop_assert!(a > 0.0 && a <= 1.0 + 1e-15);
            let inner = frobenius_inner(&k1.scaled(c), &k2).unwrap();
            prop_assert!((inner - c * frobenius_inner(&k1, &k2).unwrap()).abs() < 1e-9 * inner.abs());
            prop_assert!(frobenius_inner(&k1, &k1).unwrap() >= 5.0);
        }

        #[test]
        fn gaussian_is_monotone_in_distance(d1 in 0.0f64..5.0, extra in 1e-3f64..5.0, sigma in 0.1f64..10.0) {
            let p = pts(&[0.0, d1, d1 + extra]);
            let k = gaussian_kernel(p.view(), sigma).unwrap();
            prop_assert!(k.entries()[[0, 1]] >= k.entries()[[0, 2]]);
        }
    }
}
