//! Representation-geometry metrics: Gram distortion, pairwise distances,
//! class statistics, k-NN overlap, and shared-basis 2D views.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fmt::f17;
use crate::graph::class_sets;
use crate::numerics::{orthogonal_procrustes, pca_fit, pca_project, sym_eigenvalues, Matrix};
use crate::seed::rng_from_seed;

/// Slack allowed on every certificate comparison.
pub const CERT_SLACK: f64 = 1e-8;
/// At most this many evaluation nodes enter the k-NN overlap.
pub const DEFAULT_SUBSET_CAP: usize = 500;

fn same_shape(z: &Matrix, zt: &Matrix) -> Result<()> {
    if z.shape() != zt.shape() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", z.shape(), zt.shape())));
    }
    Ok(())
}

pub fn gram(z: &Matrix) -> Matrix {
    z * z.transpose()
}

/// ‖ZZᵀ − Z̃Z̃ᵀ‖_F / ‖ZZᵀ‖_F.
pub fn gram_distortion(z: &Matrix, zt: &Matrix) -> Result<f64> {
    same_shape(z, zt)?;
    let g = gram(z);
    let den = g.norm();
    if den == 0.0 {
        return Err(Error::InvalidInput("dense embedding is zero".into()));
    }
    Ok((&g - gram(zt)).norm() / den)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GramGaps {
    pub spectral: f64,
    pub frobenius: f64,
    /// ‖ZΔᵀ + ΔZ̃ᵀ − (ZZᵀ − Z̃Z̃ᵀ)‖_F.
    pub factorization_residual: f64,
}

/// Spectral and Frobenius norms of ZZᵀ − Z̃Z̃ᵀ. Fails if the difference does
/// not factor as ZΔᵀ + ΔZ̃ᵀ to within rounding.
pub fn gram_norm_gaps(z: &Matrix, zt: &Matrix) -> Result<GramGaps> {
    same_shape(z, zt)?;
    let (g, gt) = (gram(z), gram(zt));
    let diff = &g - &gt;
    let delta = z - zt;
    let factored = z * delta.transpose() + &delta * zt.transpose();
    let factorization_residual = (&factored - &diff).norm();
    let scale = 1f64.max(g.norm() + gt.norm());
    if factorization_residual > 1e-9 * scale {
        return Err(Error::ContractViolation(format!("Gram factorization residual {factorization_residual:e}")));
    }
    let spectral = sym_eigenvalues(&diff)?.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(GramGaps { spectral, frobenius: diff.norm(), factorization_residual })
}

fn sq_dist(z: &Matrix, i: usize, j: usize) -> f64 {
    z.row(i).iter().zip(z.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// max over pairs of |‖z_i − z_j‖² − ‖z̃_i − z̃_j‖²|, and whether it is within
/// the supplied bound.
pub fn max_pairwise_sq_distance_gap(z: &Matrix, zt: &Matrix, bound: Option<f64>) -> Result<(f64, Option<bool>)> {
    same_shape(z, zt)?;
    let n = z.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((sq_dist(z, i, j) - sq_dist(zt, i, j)).abs());
        }
    }
    Ok((worst, bound.map(|b| worst <= b + CERT_SLACK)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub means: Vec<DVector<f64>>,
    /// Population covariances (divisor n_c).
    pub covariances: Vec<Matrix>,
    pub sizes: Vec<usize>,
}

pub fn class_stats(z: &Matrix, labels: &[usize]) -> Result<ClassStats> {
    if labels.len() != z.nrows() {
        return Err(Error::DimensionMismatch(format!("{} labels for {} rows", labels.len(), z.nrows())));
    }
    let c = crate::graph::validate_labels(labels)?;
    let d = z.ncols();
    let mut out = ClassStats { means: vec![], covariances: vec![], sizes: vec![] };
    for members in class_sets(labels, c) {
        let nc = members.len() as f64;
        let mut mu = DVector::zeros(d);
        for &i in &members {
            mu += z.row(i).transpose();
        }
        mu /= nc;
        let mut cov = Matrix::zeros(d, d);
        for &i in &members {
            let v = z.row(i).transpose() - &mu;
            cov += &v * v.transpose();
        }
        cov /= nc;
        out.means.push(mu);
        out.covariances.push(cov);
        out.sizes.push(members.len());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassGap {
    pub class: usize,
    pub size: usize,
    pub mean_gap: f64,
    pub cov_spectral_gap: f64,
    /// ‖Δ‖_F / √n_c.
    pub mean_bound: f64,
    /// 8 B_Z ‖Δ‖_F / √n_c.
    pub cov_bound: f64,
    pub b_z: f64,
    pub mean_pass: bool,
    pub cov_pass: bool,
}

fn max_row_norm(z: &Matrix) -> f64 {
    z.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
}

pub fn class_stat_gaps(z: &Matrix, zt: &Matrix, labels: &[usize]) -> Result<Vec<ClassGap>> {
    same_shape(z, zt)?;
    let (a, b) = (class_stats(z, labels)?, class_stats(zt, labels)?);
    let delta = (z - zt).norm();
    let b_z = max_row_norm(z).max(max_row_norm(zt));
    let mut out = Vec::with_capacity(a.sizes.len());
    for c in 0..a.sizes.len() {
        let root = (a.sizes[c] as f64).sqrt();
        let mean_gap = (&a.means[c] - &b.means[c]).norm();
        let diff = &a.covariances[c] - &b.covariances[c];
        let cov_spectral_gap = sym_eigenvalues(&diff)?.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mean_bound = delta / root;
        let cov_bound = 8.0 * b_z * delta / root;
        out.push(ClassGap {
            class: c,
            size: a.sizes[c],
            mean_gap,
            cov_spectral_gap,
            mean_bound,
            cov_bound,
            b_z,
            mean_pass: mean_gap <= mean_bound + CERT_SLACK,
            cov_pass: cov_spectral_gap <= cov_bound + CERT_SLACK,
        });
    }
    Ok(out)
}

/// Class-balanced split: per class, a seeded `test_fraction` share (at
/// least one node) goes to the test side. Both sides are sorted.
pub fn class_balanced_split(labels: &[usize], test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("test fraction {test_fraction} must be in (0, 1]")));
    }
    let c = crate::graph::validate_labels(labels)?;
    let mut rng = rng_from_seed(seed);
    let (mut train, mut test) = (vec![], vec![]);
    for mut members in class_sets(labels, c) {
        members.shuffle(&mut rng);
        let k = ((test_fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        test.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// The nodes themselves if at most `cap`, otherwise a seeded sample of `cap`, sorted.
pub fn eval_subset(nodes: &[usize], cap: usize, seed: u64) -> Vec<usize> {
    let mut out = nodes.to_vec();
    if out.len() > cap {
        out.shuffle(&mut rng_from_seed(seed));
        out.truncate(cap);
    }
    out.sort_unstable();
    out
}

fn unit_rows(z: &Matrix) -> Result<Matrix> {
    let mut u = z.clone();
    for (i, mut row) in u.row_iter_mut().enumerate() {
        let n = row.norm();
        if n == 0.0 {
            return Err(Error::InvalidInput(format!("embedding row {i} has zero norm")));
        }
        row /= n;
    }
    Ok(u)
}

/// The k most cosine-similar nodes to `i` among all others, ties by index.
fn cosine_neighbors(u: &Matrix, i: usize, k: usize) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = (0..u.nrows()).filter(|&j| j != i).map(|j| (u.row(i).dot(&u.row(j)), j)).collect();
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = cand[..k].iter().map(|c| c.1).collect();
    out.sort_unstable();
    out
}

/// Mean over the subset of |N_k(i; Z) ∩ N_k(i; Z̃)| / k under cosine
/// similarity. Subsets larger than [`DEFAULT_SUBSET_CAP`] are sampled with `seed`.
pub fn knn_overlap(z: &Matrix, zt: &Matrix, k: usize, subset: &[usize], seed: u64) -> Result<f64> {
    same_shape(z, zt)?;
    let n = z.nrows();
    if k == 0 || k >= n {
        return Err(Error::InvalidInput(format!("k={k} must be in 1..{n}")));
    }
    if subset.is_empty() {
        return Err(Error::InvalidInput("evaluation subset is empty".into()));
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidInput(format!("subset node {bad} out of range")));
    }
    let subset = eval_subset(subset, DEFAULT_SUBSET_CAP, seed);
    let (u, ut) = (unit_rows(z)?, unit_rows(zt)?);
    let total: f64 = subset
        .iter()
        .map(|&i| {
            let a = cosine_neighbors(&u, i, k);
            let b = cosine_neighbors(&ut, i, k);
            let shared = a.iter().filter(|x| b.binary_search(x).is_ok()).count();
            shared as f64 / k as f64
        })
        .sum();
    Ok(total / subset.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CentroidProjection {
    pub dense: Vec<[f64; 2]>,
    pub sparse: Vec<[f64; 2]>,
    pub displacement: Vec<f64>,
}

impl CentroidProjection {
    pub fn max_displacement(&self) -> f64 {
        self.displacement.iter().copied().fold(0.0, f64::max)
    }

    /// Smallest 2D distance between two dense centroids.
    pub fn min_dense_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.dense.iter().enumerate() {
            for b in &self.dense[i + 1..] {
                best = best.min(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
        best
    }
}

fn to_pairs(m: &Matrix) -> Vec<[f64; 2]> {
    m.row_iter().map(|r| [r[0], r[1]]).collect()
}

/// Class centroids of both embeddings in the 2D PCA basis fitted on `z`.
pub fn centroid_projection(z: &Matrix, zt: &Matrix, labels: &[usize]) -> Result<CentroidProjection> {
    same_shape(z, zt)?;
    let basis = pca_fit(z, 2)?;
    let (a, b) = (class_stats(z, labels)?, class_stats(zt, labels)?);
    let stack = |means: &[DVector<f64>]| Matrix::from_fn(means.len(), z.ncols(), |i, j| means[i][j]);
    let pd = pca_project(&basis, &stack(&a.means))?;
    let ps = pca_project(&basis, &stack(&b.means))?;
    let displacement = (0..pd.nrows()).map(|i| (pd.row(i) - ps.row(i)).norm()).collect();
    Ok(CentroidProjection { dense: to_pairs(&pd), sparse: to_pairs(&ps), displacement })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcrustesReport {
    pub dense: Vec<[f64; 2]>,
    pub sparse_aligned: Vec<[f64; 2]>,
    pub residual: f64,
    pub relative_residual: f64,
    /// ‖P_dense − P_sparse‖_F before alignment.
    pub unaligned: f64,
}

/// Both embeddings in the dense 2D PCA basis, sparse rotated onto dense.
pub fn procrustes_report(z: &Matrix, zt: &Matrix) -> Result<ProcrustesReport> {
    same_shape(z, zt)?;
    let basis = pca_fit(z, 2)?;
    let pd = pca_project(&basis, z)?;
    let ps = pca_project(&basis, zt)?;
    let (q, residual) = orthogonal_procrustes(&pd, &ps)?;
    let aligned = &ps * q;
    let den = pd.norm();
    Ok(ProcrustesReport {
        dense: to_pairs(&pd),
        sparse_aligned: to_pairs(&aligned),
        residual,
        relative_residual: if den > 0.0 { residual / den } else { 0.0 },
        unaligned: (&pd - &ps).norm(),
    })
}

/// Geometry metrics and certificate outcomes for one sparsifier draw.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryReport {
    pub rel_gram_distortion: f64,
    pub rel_representation_error: f64,
    pub gram_gaps: GramGaps,
    pub max_pairwise_sq_gap: f64,
    pub class_gaps: Vec<ClassGap>,
    pub knn_overlap: f64,
    /// 4 C_gram ε, when certified constants are available.
    pub pairwise_bound: Option<f64>,
    pub pairwise_pass: Option<bool>,
    /// max pairwise gap ≤ 4 × measured Gram spectral gap.
    pub pairwise_mechanism_pass: bool,
}

impl GeometryReport {
    pub fn mean_gap_max(&self) -> f64 {
        self.class_gaps.iter().map(|g| g.mean_gap).fold(0.0, f64::max)
    }

    pub fn cov_gap_max(&self) -> f64 {
        self.class_gaps.iter().map(|g| g.cov_spectral_gap).fold(0.0, f64::max)
    }

    pub fn class_bounds_pass(&self) -> bool {
        self.class_gaps.iter().all(|g| g.mean_pass && g.cov_pass)
    }
}

/// All metrics on the evaluation rows. `c_gram_eps` is C_gram·ε_emp if known.
pub fn geometry_report(
    z: &Matrix,
    zt: &Matrix,
    labels: &[usize],
    k: usize,
    subset: &[usize],
    seed: u64,
    c_gram_eps: Option<f64>,
) -> Result<GeometryReport> {
    let gram_gaps = gram_norm_gaps(z, zt)?;
    let pairwise_bound = c_gram_eps.map(|b| 4.0 * b);
    let (max_gap, pairwise_pass) = max_pairwise_sq_distance_gap(z, zt, pairwise_bound)?;
    Ok(GeometryReport {
        rel_gram_distortion: gram_distortion(z, zt)?,
        rel_representation_error: crate::model::representation_error(z, zt)?.1,
        gram_gaps,
        max_pairwise_sq_gap: max_gap,
        class_gaps: class_stat_gaps(z, zt, labels)?,
        knn_overlap: knn_overlap(z, zt, k, subset, seed)?,
        pairwise_bound,
        pairwise_pass,
        pairwise_mechanism_pass: max_gap <= 4.0 * gram_gaps.spectral + CERT_SLACK,
    })
}

pub const GEOMETRY_HEADER: &str = "dataset,level_index,draw_index,eps_emp,retained_fraction,rel_filter_err,rel_repr_err,rel_gram_err,knn_overlap,max_sq_dist_gap,mean_gap_max,cov_gap_max,cp_bound_pass,crep_bound_pass,gram_bound_pass";

/// One geometry CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryRow {
    pub dataset: String,
    pub level_index: i64,
    pub draw_index: usize,
    pub eps_emp: f64,
    pub retained_fraction: f64,
    pub rel_filter_err: f64,
    pub rel_repr_err: f64,
    pub rel_gram_err: f64,
    pub knn_overlap: f64,
    pub max_sq_dist_gap: f64,
    pub mean_gap_max: f64,
    pub cov_gap_max: f64,
    pub cp_bound_pass: bool,
    pub crep_bound_pass: bool,
    pub gram_bound_pass: bool,
}

impl GeometryRow {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.dataset,
            self.level_index,
            self.draw_index,
            f17(self.eps_emp),
            f17(self.retained_fraction),
            f17(self.rel_filter_err),
            f17(self.rel_repr_err),
            f17(self.rel_gram_err),
            f17(self.knn_overlap),
            f17(self.max_sq_dist_gap),
            f17(self.mean_gap_max),
            f17(self.cov_gap_max),
            self.cp_bound_pass,
            self.crep_bound_pass,
            self.gram_bound_pass
        );
        s
    }

    pub fn all_pass(&self) -> bool {
        self.cp_bound_pass && self.crep_bound_pass && self.gram_bound_pass
    }
}

pub fn geometry_csv(rows: &[GeometryRow]) -> String {
    let mut s = String::from(GEOMETRY_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}
