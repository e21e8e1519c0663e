//! POI information matrix, cosine-similarity graph, and the spectral
//! operators (scaled Laplacian, Chebyshev basis) built on it.

use crate::error::{Error, Result};
use crate::flow::STD_GUARD;
use crate::tensor::Tensor;

pub const DEFAULT_CATEGORIES: usize = 21;

/// Non-negative POI counts, `N x C`, row `i` for region id `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoiCountMatrix {
    counts: Tensor,
    category_names: Vec<String>,
}

impl PoiCountMatrix {
    pub fn new(counts: Vec<f64>, category_names: Vec<String>) -> Result<Self> {
        let c = category_names.len();
        if c == 0 {
            return Err(Error::invalid("at least one POI category is required"));
        }
        if counts.len() % c != 0 {
            return Err(Error::invalid(format!(
                "{} counts do not fill rows of {c} categories",
                counts.len()
            )));
        }
        if let Some(v) = counts.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!("POI count {v} is negative or not finite")));
        }
        let n = counts.len() / c;
        Ok(PoiCountMatrix {
            counts: Tensor::new(&[n, c], counts)?,
            category_names,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.counts.shape()[0]
    }

    pub fn n_categories(&self) -> usize {
        self.category_names.len()
    }

    pub fn category_names(&self) -> &[String] {
        &self.category_names
    }

    pub fn counts(&self) -> &Tensor {
        &self.counts
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.counts.row(r)
    }

    /// Sums the rows of regions that map to the same new index.
    pub fn remap(&self, mapping: &[usize], n_new: usize) -> Result<Self> {
        if mapping.len() != self.n_regions() || mapping.iter().any(|&m| m >= n_new) {
            return Err(Error::invalid("region mapping does not fit the POI matrix"));
        }
        let c = self.n_categories();
        let mut out = vec![0.0; n_new * c];
        for (old, &new) in mapping.iter().enumerate() {
            for (k, v) in self.row(old).iter().enumerate() {
                out[new * c + k] += v;
            }
        }
        Self::new(out, self.category_names.clone())
    }
}

/// How the second block of the POI information matrix is standardised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Standardization {
    /// One mean/std over every entry of the count matrix.
    #[default]
    Global,
    /// Separate mean/std per category column.
    PerColumn,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std < STD_GUARD { 1.0 } else { std })
}

/// `P = [row-normalised counts | standardised counts]`, shape `N x 2C`.
/// All-zero rows stay zero in the first block; std below the guard is
/// replaced by 1.
pub fn build_poi_matrix(counts: &PoiCountMatrix, mode: Standardization) -> Result<Tensor> {
    let (n, c) = counts.counts.dims2()?;
    if n == 0 {
        return Err(Error::invalid("POI matrix needs at least one region"));
    }
    let raw = counts.counts.data();
    let global = mean_std(raw.iter().copied());
    let column: Vec<(f64, f64)> = (0..c)
        .map(|j| mean_std((0..n).map(move |i| raw[i * c + j])))
        .collect();
    let mut p = Tensor::zeros(&[n, 2 * c]);
    for i in 0..n {
        let row = counts.row(i);
        let sum: f64 = row.iter().sum();
        for (j, &v) in row.iter().enumerate() {
            if sum > 0.0 {
                p.set(&[i, j], v / sum);
            }
            let (mean, std) = match mode {
                Standardization::Global => global,
                Standardization::PerColumn => column[j],
            };
            p.set(&[i, c + j], (v - mean) / std);
        }
    }
    Ok(p)
}

/// Pairwise cosine similarity of the rows of `p`; zero rows are similar to
/// nothing, themselves included.
pub fn cosine_similarity(p: &Tensor) -> Result<Tensor> {
    let (n, _) = p.dims2()?;
    let gram = p.matmul(&p.transpose2()?)?;
    let norms: Vec<f64> = (0..n).map(|i| gram.at(&[i, i]).sqrt()).collect();
    Ok(Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else if i == j {
            1.0
        } else {
            let (a, b) = (i.min(j), i.max(j));
            (gram.at(&[a, b]) / (norms[a] * norms[b])).clamp(-1.0, 1.0)
        }
    }))
}

/// `A_ij = 1` iff `S_ij >= c`, diagonal included.
pub fn threshold_adjacency(s: &Tensor, c: f64) -> Result<Tensor> {
    s.dims2()?;
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::invalid(format!("threshold {c} must lie in (0, 1)")));
    }
    if !(0.3..=0.6).contains(&c) {
        log::warn!("similarity threshold {c} is outside the usual range [0.3, 0.6]");
    }
    Ok(s.map(|v| if v >= c { 1.0 } else { 0.0 }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGraph {
    pub similarity: Tensor,
    pub adjacency: Tensor,
    pub threshold: f64,
}

impl SimilarityGraph {
    pub fn build(p: &Tensor, threshold: f64) -> Result<Self> {
        let similarity = cosine_similarity(p)?;
        let adjacency = threshold_adjacency(&similarity, threshold)?;
        Ok(SimilarityGraph {
            similarity,
            adjacency,
            threshold,
        })
    }
}

fn check_symmetric(a: &Tensor, what: &str) -> Result<usize> {
    let (n, m) = a.dims2()?;
    if n != m {
        return Err(Error::invalid(format!("{what} must be square, got {n}x{m}")));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (a.at(&[i, j]) - a.at(&[j, i])).abs() > 1e-12 {
                return Err(Error::invalid(format!("{what} is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(n)
}

/// `I - D^-1/2 A D^-1/2`; isolated nodes keep an identity row.
pub fn normalized_laplacian(a: &Tensor) -> Result<Tensor> {
    let n = check_symmetric(a, "adjacency")?;
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = a.row(i).iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        let eye = if i == j { 1.0 } else { 0.0 };
        eye - inv_sqrt[i] * a.at(&[i, j]) * inv_sqrt[j]
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaledLaplacian {
    pub l_tilde: Tensor,
    pub lambda_max: f64,
}

pub const POWER_TOLERANCE: f64 = 1e-6;
pub const POWER_MAX_ITER: usize = 1000;
pub const LAMBDA_FALLBACK: f64 = 2.0;

/// Largest eigenvalue of a symmetric PSD matrix by power iteration. The
/// start vector `v_i = 1 + i / n` is deterministic but, unlike the constant
/// vector, not orthogonal to the top eigenvector of symmetric graphs. Stops once the residual `|Lv - lambda v|` is within
/// `POWER_TOLERANCE * lambda`; returns `None` if that never happens or the
/// iterate collapses to zero.
pub fn power_iteration(l: &Tensor) -> Option<f64> {
    let (n, _) = l.dims2().ok()?;
    if n == 0 {
        return None;
    }
    let start = Tensor::from_fn(&[n, 1], |i| 1.0 + i as f64 / n as f64);
    let start_norm = start.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut v = start.map(|x| x / start_norm);
    for _ in 0..POWER_MAX_ITER {
        let w = l.matmul(&v).ok()?;
        let lambda: f64 = v.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let norm = w.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(lambda > 1e-12 && norm > 0.0) {
            return None;
        }
        let residual = w
            .data()
            .iter()
            .zip(v.data())
            .map(|(wi, vi)| (wi - lambda * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= POWER_TOLERANCE * lambda {
            return Some(lambda);
        }
        v = w.map(|x| x / norm);
    }
    None
}

/// `L~ = (2 / lambda_max) L - I`.
pub fn scaled_laplacian(l: &Tensor) -> Result<ScaledLaplacian> {
    let n = check_symmetric(l, "Laplacian")?;
    let lambda_max = power_iteration(l).unwrap_or(LAMBDA_FALLBACK);
    let eye = Tensor::eye(n);
    let l_tilde = l.zip_map(&eye, |x, e| 2.0 / lambda_max * x - e)?;
    Ok(ScaledLaplacian {
        l_tilde,
        lambda_max,
    })
}

/// `[T_0, ..., T_{K-1}]` with `T_0 = I`, `T_1 = L~`,
/// `T_k = 2 L~ T_{k-1} - T_{k-2}`.
pub fn cheb_basis(l_tilde: &Tensor, k: usize) -> Result<Vec<Tensor>> {
    if k < 1 {
        return Err(Error::invalid("Chebyshev order must be at least 1"));
    }
    let (n, m) = l_tilde.dims2()?;
    if n != m {
        return Err(Error::invalid("scaled Laplacian must be square"));
    }
    let mut basis = vec![Tensor::eye(n)];
    if k > 1 {
        basis.push(l_tilde.clone());
    }
    while basis.len() < k {
        let prev = &basis[basis.len() - 1];
        let prev2 = &basis[basis.len() - 2];
        let next = l_tilde.matmul(prev)?.zip_map(prev2, |a, b| 2.0 * a - b)?;
        basis.push(next);
    }
    Ok(basis)
}

/// Everything the refiner needs from the POI data.
#[derive(Clone, Debug)]
pub struct PoiGraph {
    pub info: Tensor,
    pub graph: SimilarityGraph,
    pub laplacian: ScaledLaplacian,
    pub basis: Vec<Tensor>,
}

impl PoiGraph {
    pub fn build(counts: &PoiCountMatrix, threshold: f64, k: usize) -> Result<Self> {
        let info = build_poi_matrix(counts, Standardization::Global)?;
        let graph = SimilarityGraph::build(&info, threshold)?;
        let laplacian = scaled_laplacian(&normalized_laplacian(&graph.adjacency)?)?;
        let basis = cheb_basis(&laplacian.l_tilde, k)?;
        Ok(PoiGraph {
            info,
            graph,
            laplacian,
            basis,
        })
    }
}
