//! State-space abstraction by clustering the enumerated discrete
//! states.
//!
//! Three algorithms are supported: k-means under squared Euclidean
//! distance (KME), k-means under Mahalanobis distance (KMM, implemented
//! by whitening with the regularized sample covariance) and Gaussian
//! mixture models fit by EM. All fits are deterministic for a fixed
//! seed: parallelism is restricted to per-point work and every
//! reduction runs sequentially in point order.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ITERS: usize = 300;
const ASSIGN_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterAlgorithm {
    Kme,
    Kmm,
    Gmm,
}

impl ClusterAlgorithm {
    pub fn name(self) -> &'static str {
        match self {
            ClusterAlgorithm::Kme => "kme",
            ClusterAlgorithm::Kmm => "kmm",
            ClusterAlgorithm::Gmm => "gmm",
        }
    }
}

impl std::str::FromStr for ClusterAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kme" => Ok(ClusterAlgorithm::Kme),
            "kmm" => Ok(ClusterAlgorithm::Kmm),
            "gmm" => Ok(ClusterAlgorithm::Gmm),
            other => Err(Error::config(format!("unknown clustering algorithm {other:?}"))),
        }
    }
}

/// Per-component covariances of a fitted mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "structure", content = "values")]
pub enum GmmCovariances {
    /// K vectors of per-dimension variances.
    Diagonal(Vec<Vec<f64>>),
    /// K full covariance matrices.
    Full(Vec<Vec<Vec<f64>>>),
}

/// Abstraction map from original states to `[0, K)`.
///
/// `assignment[i]` is the abstract id of the i-th input point; empty
/// clusters keep their id (and centroid) so downstream matrices stay
/// K-by-K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub algorithm: ClusterAlgorithm,
    pub k: usize,
    /// Cluster centroids (for GMM: component means), original space.
    pub centroids: Vec<Vec<f64>>,
    /// Inverse of the regularized covariance used by KMM.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inv_covariance: Option<Vec<Vec<f64>>>,
    /// Mixture weights (GMM), summing to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariances: Option<GmmCovariances>,
    pub assignment: Vec<u32>,
    pub iterations: usize,
    /// Per-iteration fit objective: total within-cluster squared
    /// distance in the fit metric for KME/KMM, log-likelihood for GMM.
    pub history: Vec<f64>,
}

impl ClusterModel {
    /// Abstract id of an original state index.
    pub fn map_state(&self, state_index: usize) -> Result<u32> {
        self.assignment
            .get(state_index)
            .copied()
            .ok_or_else(|| Error::config(format!(
                "state index {state_index} out of range (|S| = {})",
                self.assignment.len()
            )))
    }

    /// Member count per abstract id.
    pub fn population(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.k];
        for &a in &self.assignment {
            counts[a as usize] += 1;
        }
        counts
    }

    /// Original-state indices grouped by abstract id.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.k];
        for (i, &a) in self.assignment.iter().enumerate() {
            members[a as usize].push(i);
        }
        members
    }
}

/// MSE-versus-K data for cluster-count selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowData {
    pub points: Vec<ElbowPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowPoint {
    pub k: usize,
    pub mse: f64,
}

struct Flat {
    data: Vec<f64>,
    n: usize,
    dims: usize,
}

fn flatten(points: &[&[f64]]) -> Result<Flat> {
    if points.is_empty() {
        return Err(Error::config("no points to cluster"));
    }
    let dims = points[0].len();
    if dims == 0 {
        return Err(Error::config("points must have at least one dimension"));
    }
    let mut data = Vec::with_capacity(points.len() * dims);
    for p in points {
        if p.len() != dims {
            return Err(Error::config("points have inconsistent dimensions"));
        }
        data.extend_from_slice(p);
    }
    Ok(Flat { data, n: points.len(), dims })
}

fn as_refs(points: &[Vec<f64>]) -> Vec<&[f64]> {
    points.iter().map(Vec::as_slice).collect()
}

fn distinct_count(flat: &Flat) -> usize {
    let mut seen: HashSet<Vec<u64>> = HashSet::with_capacity(flat.n);
    for p in flat.data.chunks_exact(flat.dims) {
        seen.insert(p.iter().map(|v| v.to_bits()).collect());
    }
    seen.len()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Transpose centroids from k-by-dims to dims-by-k so the assignment
/// inner loop streams contiguously over clusters.
fn transpose_centroids(centroids: &[f64], k: usize, dims: usize) -> Vec<f64> {
    let mut t = vec![0.0; k * dims];
    for j in 0..k {
        for dim in 0..dims {
            t[dim * k + j] = centroids[j * dims + dim];
        }
    }
    t
}

/// Nearest-centroid assignment for all points; ties go to the lowest
/// cluster id. Fills `assignment` and the squared distance `best`.
fn assign_points(
    flat: &Flat,
    centroids_t: &[f64],
    k: usize,
    assignment: &mut [u32],
    best: &mut [f64],
) {
    let dims = flat.dims;
    let data = &flat.data;
    assignment
        .par_chunks_mut(ASSIGN_CHUNK)
        .zip(best.par_chunks_mut(ASSIGN_CHUNK))
        .enumerate()
        .for_each(|(chunk_idx, (a_chunk, b_chunk))| {
            let mut score = vec![0.0f64; k];
            let base = chunk_idx * ASSIGN_CHUNK;
            for (off, (slot, dist_slot)) in a_chunk.iter_mut().zip(b_chunk.iter_mut()).enumerate() {
                let p = &data[(base + off) * dims..(base + off + 1) * dims];
                score.fill(0.0);
                for (dim, &x) in p.iter().enumerate() {
                    let row = &centroids_t[dim * k..(dim + 1) * k];
                    for (s, c) in score.iter_mut().zip(row) {
                        let t = x - c;
                        *s += t * t;
                    }
                }
                let mut best_j = 0usize;
                let mut best_d = score[0];
                for (j, &s) in score.iter().enumerate().skip(1) {
                    if s < best_d {
                        best_d = s;
                        best_j = j;
                    }
                }
                *slot = best_j as u32;
                *dist_slot = best_d;
            }
        });
}

/// k-means++ seeding. When every remaining point coincides with a
/// chosen centroid (only possible when k exceeds the number of
/// distinct points) the next seed is drawn uniformly.
fn kmeans_pp(flat: &Flat, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * flat.dims);
    let first = rng.random_range(0..flat.n);
    centroids.extend_from_slice(&flat.data[first * flat.dims..(first + 1) * flat.dims]);
    let mut d2: Vec<f64> = vec![f64::INFINITY; flat.n];
    extend_kmeans_pp(flat, k, rng, &mut centroids, &mut d2);
    centroids
}

/// Continues k-means++ until `centroids` holds k seeds, updating the
/// distance-to-nearest-seed vector `d2` as it goes.
fn extend_kmeans_pp(
    flat: &Flat,
    k: usize,
    rng: &mut ChaCha8Rng,
    centroids: &mut Vec<f64>,
    d2: &mut [f64],
) {
    let dims = flat.dims;
    // Refresh d2 against the latest centroid only; callers keep d2
    // consistent with all earlier ones.
    let refresh = |d2: &mut [f64], c: &[f64], data: &[f64]| {
        d2.par_chunks_mut(ASSIGN_CHUNK).enumerate().for_each(|(chunk_idx, chunk)| {
            let base = chunk_idx * ASSIGN_CHUNK;
            for (off, slot) in chunk.iter_mut().enumerate() {
                let p = &data[(base + off) * dims..(base + off + 1) * dims];
                let d = dist2(p, c);
                if d < *slot {
                    *slot = d;
                }
            }
        });
    };
    let start = centroids.len() / dims;
    refresh(d2, &centroids[(start - 1) * dims..start * dims], &flat.data);
    for _ in start..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 && total.is_finite() {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = flat.n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > r {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..flat.n)
        };
        centroids.extend_from_slice(&flat.data[pick * dims..(pick + 1) * dims]);
        let len = centroids.len();
        refresh(d2, &centroids[len - dims..], &flat.data);
    }
}

struct LloydFit {
    centroids: Vec<f64>,
    assignment: Vec<u32>,
    iterations: usize,
    history: Vec<f64>,
}

/// Lloyd's algorithm until the assignment reaches a fixpoint or the
/// iteration cap. The returned assignment is always consistent with the
/// returned centroids; empty clusters keep their previous centroid.
fn lloyd(flat: &Flat, k: usize, mut centroids: Vec<f64>, max_iters: usize) -> LloydFit {
    let dims = flat.dims;
    let mut assignment = vec![0u32; flat.n];
    let mut best = vec![0.0f64; flat.n];
    let mut prev: Option<Vec<u32>> = None;
    let mut history = Vec::new();
    let mut iterations = 0;

    for iter in 0..max_iters {
        let centroids_t = transpose_centroids(&centroids, k, dims);
        assign_points(flat, &centroids_t, k, &mut assignment, &mut best);
        iterations = iter + 1;
        history.push(best.iter().sum());
        if prev.as_deref() == Some(assignment.as_slice()) || iter + 1 == max_iters {
            break;
        }
        prev = Some(assignment.clone());

        let mut counts = vec![0usize; k];
        let mut sums = vec![0.0f64; k * dims];
        for (i, &a) in assignment.iter().enumerate() {
            let j = a as usize;
            counts[j] += 1;
            let p = &flat.data[i * dims..(i + 1) * dims];
            for (s, &x) in sums[j * dims..(j + 1) * dims].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for dim in 0..dims {
                    centroids[j * dims + dim] = sums[j * dims + dim] * inv;
                }
            }
        }
    }

    LloydFit { centroids, assignment, iterations, history }
}

fn centroids_to_rows(centroids: &[f64], k: usize, dims: usize) -> Vec<Vec<f64>> {
    (0..k).map(|j| centroids[j * dims..(j + 1) * dims].to_vec()).collect()
}

fn check_k(k: usize, distinct: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::config("cluster count must be >= 1"));
    }
    if k > distinct {
        return Err(Error::config(format!(
            "cluster count {k} exceeds the {distinct} distinct points"
        )));
    }
    Ok(())
}

/// K-means with squared Euclidean distance.
pub fn fit_kme(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    let refs = as_refs(points);
    let flat = flatten(&refs)?;
    check_k(k, distinct_count(&flat))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = kmeans_pp(&flat, k, &mut rng);
    let fit = lloyd(&flat, k, seeds, MAX_ITERS);
    Ok(ClusterModel {
        algorithm: ClusterAlgorithm::Kme,
        k,
        centroids: centroids_to_rows(&fit.centroids, k, flat.dims),
        inv_covariance: None,
        weights: None,
        covariances: None,
        assignment: fit.assignment,
        iterations: fit.iterations,
        history: fit.history,
    })
}

/// Population covariance (denominator n) of the points.
fn covariance(flat: &Flat) -> (Vec<f64>, Vec<f64>) {
    let dims = flat.dims;
    let inv_n = 1.0 / flat.n as f64;
    let mut mean = vec![0.0; dims];
    for p in flat.data.chunks_exact(dims) {
        for (m, &x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m *= inv_n;
    }
    let mut cov = vec![0.0; dims * dims];
    for p in flat.data.chunks_exact(dims) {
        for i in 0..dims {
            let di = p[i] - mean[i];
            for j in i..dims {
                cov[i * dims + j] += di * (p[j] - mean[j]);
            }
        }
    }
    for i in 0..dims {
        for j in i..dims {
            let v = cov[i * dims + j] * inv_n;
            cov[i * dims + j] = v;
            cov[j * dims + i] = v;
        }
    }
    (mean, cov)
}

/// K-means with Mahalanobis distance: points are whitened with the
/// inverse Cholesky factor of the ridge-regularized sample covariance
/// (epsilon = 1e-6 times the mean diagonal), then clustered under
/// Euclidean distance in the whitened space.
pub fn fit_kmm(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    let refs = as_refs(points);
    let flat = flatten(&refs)?;
    check_k(k, distinct_count(&flat))?;
    let dims = flat.dims;

    let (_, mut cov) = covariance(&flat);
    let mean_diag = (0..dims).map(|i| cov[i * dims + i]).sum::<f64>() / dims as f64;
    let eps = 1e-6 * mean_diag;
    for i in 0..dims {
        cov[i * dims + i] += eps;
    }
    let cov_mat = DMatrix::from_row_slice(dims, dims, &cov);
    let chol = nalgebra::Cholesky::new(cov_mat.clone())
        .ok_or_else(|| Error::numeric("covariance is singular after regularization"))?;
    let l_inv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::numeric("covariance factor is not invertible"))?;
    let inv_cov = chol.inverse();

    // Whiten: y = L^-1 x, so squared Euclidean distance in y equals the
    // Mahalanobis distance in x.
    let mut whitened = vec![0.0; flat.n * dims];
    for (y, p) in whitened.chunks_exact_mut(dims).zip(flat.data.chunks_exact(dims)) {
        for i in 0..dims {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += l_inv[(i, j)] * p[j];
            }
            y[i] = acc;
        }
    }
    let wflat = Flat { data: whitened, n: flat.n, dims };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = kmeans_pp(&wflat, k, &mut rng);
    let fit = lloyd(&wflat, k, seeds, MAX_ITERS);

    // Report centroids in the original space as member means; clusters
    // that ended up empty get their whitened centroid mapped back.
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0f64; k * dims];
    for (i, &a) in fit.assignment.iter().enumerate() {
        let j = a as usize;
        counts[j] += 1;
        for (s, &x) in sums[j * dims..(j + 1) * dims].iter_mut().zip(&flat.data[i * dims..(i + 1) * dims]) {
            *s += x;
        }
    }
    let l = chol.l();
    let mut centroids = vec![0.0f64; k * dims];
    for j in 0..k {
        if counts[j] > 0 {
            let inv = 1.0 / counts[j] as f64;
            for dim in 0..dims {
                centroids[j * dims + dim] = sums[j * dims + dim] * inv;
            }
        } else {
            for i in 0..dims {
                let mut acc = 0.0;
                for jj in 0..=i {
                    acc += l[(i, jj)] * fit.centroids[j * dims + jj];
                }
                centroids[j * dims + i] = acc;
            }
        }
    }

    let inv_cov_rows: Vec<Vec<f64>> =
        (0..dims).map(|i| (0..dims).map(|j| inv_cov[(i, j)]).collect()).collect();
    Ok(ClusterModel {
        algorithm: ClusterAlgorithm::Kmm,
        k,
        centroids: centroids_to_rows(&centroids, k, dims),
        inv_covariance: Some(inv_cov_rows),
        weights: None,
        covariances: None,
        assignment: fit.assignment,
        iterations: fit.iterations,
        history: fit.history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GmmCovKind {
    #[default]
    Diagonal,
    Full,
}

#[derive(Debug, Clone)]
pub struct GmmOptions {
    pub covariance: GmmCovKind,
    pub max_iters: usize,
    /// Stop once the log-likelihood improves by less than this.
    pub tol: f64,
    pub var_floor: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions { covariance: GmmCovKind::Diagonal, max_iters: MAX_ITERS, tol: 1e-6, var_floor: 1e-6 }
    }
}

/// Gaussian mixture fit by EM with diagonal covariances.
pub fn fit_gmm(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    fit_gmm_with(points, k, seed, &GmmOptions::default())
}

pub fn fit_gmm_with(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    options: &GmmOptions,
) -> Result<ClusterModel> {
    let refs = as_refs(points);
    let flat = flatten(&refs)?;
    if k == 0 {
        return Err(Error::config("component count must be >= 1"));
    }
    if k > flat.n {
        return Err(Error::config(format!("component count {k} exceeds the {} points", flat.n)));
    }
    match options.covariance {
        GmmCovKind::Diagonal => gmm_em::<DiagCov>(&flat, k, seed, options),
        GmmCovKind::Full => gmm_em::<FullCov>(&flat, k, seed, options),
    }
}

/// Covariance handling for one EM variant. `prepare` turns raw
/// covariance parameters into whatever the density evaluation needs.
trait CovModel: Sized + Send + Sync {
    type Prepared: Send + Sync;

    fn initial(global_var: &[f64], dims: usize) -> Self;
    fn prepare(&self, dims: usize) -> Result<Self::Prepared>;
    fn log_density(prepared: &Self::Prepared, point: &[f64], mean: &[f64]) -> f64;
    /// Covariance update from accumulated moments: sum of r*x*x^T (or
    /// its diagonal), the component mean, and the responsibility mass.
    fn from_moments(sum_outer: &[f64], mean: &[f64], mass: f64, dims: usize, floor: f64) -> Self;
    fn outer_len(dims: usize) -> usize;
    fn accumulate_outer(acc: &mut [f64], point: &[f64], resp: f64, dims: usize);
    fn export(components: Vec<Self>) -> GmmCovariances;
}

struct DiagCov(Vec<f64>);

impl CovModel for DiagCov {
    type Prepared = (Vec<f64>, f64); // inverse variances, log normalizer

    fn initial(global_var: &[f64], _dims: usize) -> Self {
        DiagCov(global_var.to_vec())
    }

    fn prepare(&self, dims: usize) -> Result<(Vec<f64>, f64)> {
        let mut log_norm = -0.5 * dims as f64 * (2.0 * std::f64::consts::PI).ln();
        let mut inv = Vec::with_capacity(dims);
        for &v in &self.0 {
            log_norm -= 0.5 * v.ln();
            inv.push(1.0 / v);
        }
        Ok((inv, log_norm))
    }

    fn log_density(prepared: &(Vec<f64>, f64), point: &[f64], mean: &[f64]) -> f64 {
        let mut q = 0.0;
        for ((x, m), iv) in point.iter().zip(mean).zip(&prepared.0) {
            let d = x - m;
            q += d * d * iv;
        }
        prepared.1 - 0.5 * q
    }

    fn from_moments(sum_outer: &[f64], mean: &[f64], mass: f64, _dims: usize, floor: f64) -> Self {
        let vars = sum_outer
            .iter()
            .zip(mean)
            .map(|(&sxx, &m)| (sxx / mass - m * m).max(floor))
            .collect();
        DiagCov(vars)
    }

    fn outer_len(dims: usize) -> usize {
        dims
    }

    fn accumulate_outer(acc: &mut [f64], point: &[f64], resp: f64, _dims: usize) {
        for (a, &x) in acc.iter_mut().zip(point) {
            *a += resp * x * x;
        }
    }

    fn export(components: Vec<Self>) -> GmmCovariances {
        GmmCovariances::Diagonal(components.into_iter().map(|c| c.0).collect())
    }
}

struct FullCov(Vec<f64>); // dims x dims, row-major

impl CovModel for FullCov {
    type Prepared = (DMatrix<f64>, f64); // inverse of L, log normalizer

    fn initial(global_var: &[f64], dims: usize) -> Self {
        let mut cov = vec![0.0; dims * dims];
        for (i, &v) in global_var.iter().enumerate() {
            cov[i * dims + i] = v;
        }
        FullCov(cov)
    }

    fn prepare(&self, dims: usize) -> Result<(DMatrix<f64>, f64)> {
        let cov = DMatrix::from_row_slice(dims, dims, &self.0);
        let chol = nalgebra::Cholesky::new(cov)
            .ok_or_else(|| Error::numeric("mixture component covariance is not positive definite"))?;
        let l = chol.l();
        let mut log_det = 0.0;
        for i in 0..dims {
            log_det += l[(i, i)].ln();
        }
        let log_norm = -0.5 * dims as f64 * (2.0 * std::f64::consts::PI).ln() - log_det;
        let l_inv = l
            .try_inverse()
            .ok_or_else(|| Error::numeric("mixture component covariance factor is singular"))?;
        Ok((l_inv, log_norm))
    }

    fn log_density(prepared: &(DMatrix<f64>, f64), point: &[f64], mean: &[f64]) -> f64 {
        let dims = mean.len();
        let mut q = 0.0;
        for i in 0..dims {
            let mut z = 0.0;
            for j in 0..=i {
                z += prepared.0[(i, j)] * (point[j] - mean[j]);
            }
            q += z * z;
        }
        prepared.1 - 0.5 * q
    }

    fn from_moments(sum_outer: &[f64], mean: &[f64], mass: f64, dims: usize, floor: f64) -> Self {
        let mut cov = vec![0.0; dims * dims];
        for i in 0..dims {
            for j in 0..dims {
                cov[i * dims + j] = sum_outer[i * dims + j] / mass - mean[i] * mean[j];
            }
        }
        for i in 0..dims {
            cov[i * dims + i] += floor;
        }
        FullCov(cov)
    }

    fn outer_len(dims: usize) -> usize {
        dims * dims
    }

    fn accumulate_outer(acc: &mut [f64], point: &[f64], resp: f64, dims: usize) {
        for i in 0..dims {
            let rx = resp * point[i];
            for j in 0..dims {
                acc[i * dims + j] += rx * point[j];
            }
        }
    }

    fn export(components: Vec<Self>) -> GmmCovariances {
        let dims = (components[0].0.len() as f64).sqrt() as usize;
        GmmCovariances::Full(
            components
                .into_iter()
                .map(|c| (0..dims).map(|i| c.0[i * dims..(i + 1) * dims].to_vec()).collect())
                .collect(),
        )
    }
}

fn gmm_em<C: CovModel>(flat: &Flat, k: usize, seed: u64, options: &GmmOptions) -> Result<ClusterModel> {
    let dims = flat.dims;
    let n = flat.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (global_mean, global_cov) = covariance(flat);
    let global_var: Vec<f64> =
        (0..dims).map(|i| global_cov[i * dims + i].max(options.var_floor)).collect();
    let _ = global_mean;

    // Means from k-means++ seeding, uniform weights, global variances.
    let seeds = kmeans_pp(flat, k, &mut rng);
    let mut means: Vec<Vec<f64>> = centroids_to_rows(&seeds, k, dims);
    let mut weights = vec![1.0 / k as f64; k];
    let mut covs: Vec<C> = (0..k).map(|_| C::initial(&global_var, dims)).collect();

    let outer_len = C::outer_len(dims);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut assignment = vec![0u32; n];

    for iter in 0..options.max_iters {
        iterations = iter + 1;
        let prepared: Vec<C::Prepared> =
            covs.iter().map(|c| c.prepare(dims)).collect::<Result<_>>()?;
        let log_w: Vec<f64> = weights.iter().map(|w| w.max(1e-300).ln()).collect();

        // E-step: responsibilities per chunk in parallel, accumulation
        // sequential in point order for reproducibility.
        let chunks: Vec<(Vec<f64>, Vec<f64>, Vec<u32>)> = (0..n.div_ceil(ASSIGN_CHUNK))
            .into_par_iter()
            .map(|chunk_idx| {
                let start = chunk_idx * ASSIGN_CHUNK;
                let end = (start + ASSIGN_CHUNK).min(n);
                let mut resp = vec![0.0f64; (end - start) * k];
                let mut lse = vec![0.0f64; end - start];
                let mut arg = vec![0u32; end - start];
                for (row, i) in (start..end).enumerate() {
                    let p = &flat.data[i * dims..(i + 1) * dims];
                    let lp = &mut resp[row * k..(row + 1) * k];
                    let mut m = f64::NEG_INFINITY;
                    let mut best = 0u32;
                    for j in 0..k {
                        let v = log_w[j] + C::log_density(&prepared[j], p, &means[j]);
                        lp[j] = v;
                        if v > m {
                            m = v;
                            best = j as u32;
                        }
                    }
                    let sum: f64 = lp.iter().map(|&v| (v - m).exp()).sum();
                    let l = m + sum.ln();
                    for v in lp.iter_mut() {
                        *v = (*v - l).exp();
                    }
                    lse[row] = l;
                    arg[row] = best;
                }
                (resp, lse, arg)
            })
            .collect();

        let mut ll = 0.0;
        let mut mass = vec![0.0f64; k];
        let mut sum_x = vec![0.0f64; k * dims];
        let mut sum_outer = vec![0.0f64; k * outer_len];
        let mut pos = 0usize;
        for (resp, lse, arg) in &chunks {
            for (row, l) in lse.iter().enumerate() {
                ll += l;
                let i = pos + row;
                assignment[i] = arg[row];
                let p = &flat.data[i * dims..(i + 1) * dims];
                let r = &resp[row * k..(row + 1) * k];
                for j in 0..k {
                    let rj = r[j];
                    if rj == 0.0 {
                        continue;
                    }
                    mass[j] += rj;
                    for (s, &x) in sum_x[j * dims..(j + 1) * dims].iter_mut().zip(p) {
                        *s += rj * x;
                    }
                    C::accumulate_outer(&mut sum_outer[j * outer_len..(j + 1) * outer_len], p, rj, dims);
                }
            }
            pos += lse.len();
        }
        history.push(ll);

        // M-step.
        let total_mass: f64 = mass.iter().sum();
        for j in 0..k {
            if mass[j] < 1e-10 {
                // Dead component: restart it from a random point.
                log::warn!("gmm component {j} lost all responsibility mass; reinitializing");
                let pick = rng.random_range(0..n);
                means[j] = flat.data[pick * dims..(pick + 1) * dims].to_vec();
                covs[j] = C::initial(&global_var, dims);
                weights[j] = 1.0 / n as f64;
                continue;
            }
            let inv = 1.0 / mass[j];
            for dim in 0..dims {
                means[j][dim] = sum_x[j * dims + dim] * inv;
            }
            covs[j] = C::from_moments(
                &sum_outer[j * outer_len..(j + 1) * outer_len],
                &means[j],
                mass[j],
                dims,
                options.var_floor,
            );
            weights[j] = mass[j] / total_mass;
        }
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }

        if history.len() >= 2 {
            let delta = history[history.len() - 1] - history[history.len() - 2];
            if delta.abs() < options.tol {
                break;
            }
        }
    }

    Ok(ClusterModel {
        algorithm: ClusterAlgorithm::Gmm,
        k,
        centroids: means,
        inv_covariance: None,
        weights: Some(weights),
        covariances: Some(C::export(covs)),
        assignment,
        iterations,
        history,
    })
}

/// Mean squared Euclidean distance of each point to its assigned
/// centroid.
pub fn mean_squared_distance(points: &[Vec<f64>], model: &ClusterModel) -> f64 {
    let total: f64 = points
        .iter()
        .zip(&model.assignment)
        .map(|(p, &a)| dist2(p, &model.centroids[a as usize]))
        .sum();
    total / points.len() as f64
}

/// KME elbow data over the requested cluster counts.
///
/// Runs are chained: each larger K starts from the previous converged
/// centroids plus fresh k-means++ seeds, which (with Lloyd's monotone
/// updates) guarantees the reported MSE never increases in K.
pub fn elbow(points: &[Vec<f64>], k_list: &[usize], seed: u64) -> Result<ElbowData> {
    let refs = as_refs(points);
    let flat = flatten(&refs)?;
    let distinct = distinct_count(&flat);
    for &k in k_list {
        check_k(k, distinct)?;
    }
    let mut sorted: Vec<usize> = k_list.to_vec();
    sorted.sort_unstable();
    sorted.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mse_by_k = std::collections::BTreeMap::new();
    let mut centroids: Vec<f64> = Vec::new();
    for &k in &sorted {
        if centroids.is_empty() {
            centroids = kmeans_pp(&flat, k, &mut rng);
        } else {
            let prev_k = centroids.len() / flat.dims;
            let mut d2 = vec![f64::INFINITY; flat.n];
            for chunk_start in (0..prev_k).map(|j| j * flat.dims) {
                let c = centroids[chunk_start..chunk_start + flat.dims].to_vec();
                for (i, slot) in d2.iter_mut().enumerate() {
                    let d = dist2(&flat.data[i * flat.dims..(i + 1) * flat.dims], &c);
                    if d < *slot {
                        *slot = d;
                    }
                }
            }
            extend_kmeans_pp(&flat, k, &mut rng, &mut centroids, &mut d2);
        }
        let fit = lloyd(&flat, k, centroids.clone(), MAX_ITERS);
        centroids = fit.centroids;
        mse_by_k.insert(k, fit.history.last().copied().unwrap_or(0.0) / flat.n as f64);
    }

    Ok(ElbowData {
        points: k_list.iter().map(|&k| ElbowPoint { k, mse: mse_by_k[&k] }).collect(),
    })
}

pub fn save_model(path: impl AsRef<Path>, model: &ClusterModel) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), model)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ClusterModel> {
    let file = std::fs::File::open(path.as_ref())?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(center: (f64, f64), spread: f64, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| {
                vec![
                    center.0 + spread * (rng.random::<f64>() - 0.5),
                    center.1 + spread * (rng.random::<f64>() - 0.5),
                ]
            })
            .collect()
    }

    /// Relabel an assignment by first appearance so partitions can be
    /// compared independently of cluster ids.
    fn canonical(assignment: &[u32]) -> Vec<u32> {
        let mut map = std::collections::HashMap::new();
        let mut next = 0u32;
        assignment
            .iter()
            .map(|a| {
                *map.entry(*a).or_insert_with(|| {
                    let id = next;
                    next += 1;
                    id
                })
            })
            .collect()
    }

    #[test]
    fn singleton_clustering_has_zero_mse() {
        let points: Vec<Vec<f64>> =
            (0..12).map(|i| vec![f64::from(i), f64::from(i * i % 7)]).collect();
        let model = fit_kme(&points, 12, 7).unwrap();
        assert_eq!(mean_squared_distance(&points, &model), 0.0);
        // Injective on distinct points.
        let mut seen = std::collections::HashSet::new();
        for i in 0..12 {
            assert!(seen.insert(model.map_state(i).unwrap()));
        }
    }

    #[test]
    fn separated_groups_split_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut points = blob((0.0, 0.0), 1.0, 30, &mut rng);
        points.extend(blob((20.0, 20.0), 1.0, 30, &mut rng));
        let model = fit_kme(&points, 2, 5).unwrap();
        // Exhaustive nearest-centroid recheck.
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in model.centroids.iter().enumerate() {
                let d = dist2(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assert_eq!(model.assignment[i], best as u32);
        }
        let first = model.assignment[0];
        assert!(model.assignment[..30].iter().all(|&a| a == first));
        assert!(model.assignment[30..].iter().all(|&a| a != first));
    }

    #[test]
    fn k_larger_than_distinct_points_is_an_error() {
        let points = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]];
        assert!(matches!(fit_kme(&points, 3, 0), Err(Error::Config(_))));
        assert!(fit_kme(&points, 2, 0).is_ok());
    }

    #[test]
    fn kme_fit_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut points = blob((0.0, 0.0), 4.0, 50, &mut rng);
        points.extend(blob((8.0, 3.0), 4.0, 50, &mut rng));
        let a = fit_kme(&points, 5, 33).unwrap();
        let b = fit_kme(&points, 5, 33).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn kme_objective_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut points = blob((0.0, 0.0), 6.0, 80, &mut rng);
        points.extend(blob((5.0, 5.0), 6.0, 80, &mut rng));
        let model = fit_kme(&points, 6, 11).unwrap();
        for w in model.history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-9, "objective rose: {w:?}");
        }
    }

    #[test]
    fn kmm_matches_kme_on_identity_covariance_data() {
        // Four blobs at the compass points, each invariant under the
        // 90-degree rotation, so the population covariance is a
        // multiple of the identity.
        let mut points = Vec::new();
        for (cx, cy) in [(6.0, 0.0), (-6.0, 0.0), (0.0, 6.0), (0.0, -6.0)] {
            for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
                points.push(vec![cx + dx, cy + dy]);
            }
        }
        let kme = fit_kme(&points, 4, 17).unwrap();
        let kmm = fit_kmm(&points, 4, 17).unwrap();
        assert_eq!(kme.assignment, kmm.assignment);
    }

    #[test]
    fn kmm_is_invariant_to_axis_scaling_where_kme_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Two groups separated along x; y is pure noise that dominates
        // once scaled up.
        let mut points: Vec<Vec<f64>> = Vec::new();
        for _ in 0..25 {
            points.push(vec![-1.5 + 0.2 * (rng.random::<f64>() - 0.5), rng.random::<f64>() - 0.5]);
        }
        for _ in 0..25 {
            points.push(vec![1.5 + 0.2 * (rng.random::<f64>() - 0.5), rng.random::<f64>() - 0.5]);
        }
        let scaled: Vec<Vec<f64>> = points.iter().map(|p| vec![p[0], p[1] * 100.0]).collect();

        let kmm_plain = canonical(&fit_kmm(&points, 2, 3).unwrap().assignment);
        let kmm_scaled = canonical(&fit_kmm(&scaled, 2, 3).unwrap().assignment);
        assert_eq!(kmm_plain, kmm_scaled);

        let kme_plain = canonical(&fit_kme(&points, 2, 3).unwrap().assignment);
        let kme_scaled = canonical(&fit_kme(&scaled, 2, 3).unwrap().assignment);
        assert_ne!(kme_plain, kme_scaled);
        // The unscaled problem is the clean x-split KMM finds.
        assert_eq!(kme_plain, kmm_plain);
    }

    #[test]
    fn gmm_single_component_is_the_data_mean() {
        let points =
            vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 0.0], vec![7.0, 2.0], vec![4.0, 2.0]];
        let model = fit_gmm(&points, 1, 0).unwrap();
        assert!((model.centroids[0][0] - 4.0).abs() < 1e-9);
        assert!((model.centroids[0][1] - 2.0).abs() < 1e-9);
        assert_eq!(model.weights.as_ref().unwrap(), &vec![1.0]);
    }

    #[test]
    fn gmm_loglik_is_non_decreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut points = blob((0.0, 0.0), 2.0, 60, &mut rng);
        points.extend(blob((9.0, 9.0), 2.0, 60, &mut rng));
        let model = fit_gmm(&points, 2, 21).unwrap();
        for w in model.history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "log-likelihood fell: {w:?}");
        }
    }

    #[test]
    fn gmm_recovers_separated_blob_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = blob((0.0, 0.0), 1.0, 100, &mut rng);
        let b = blob((10.0, -4.0), 1.0, 100, &mut rng);
        let mean = |ps: &[Vec<f64>]| {
            let n = ps.len() as f64;
            vec![
                ps.iter().map(|p| p[0]).sum::<f64>() / n,
                ps.iter().map(|p| p[1]).sum::<f64>() / n,
            ]
        };
        let (ma, mb) = (mean(&a), mean(&b));
        let mut points = a;
        points.extend(b);
        let model = fit_gmm(&points, 2, 13).unwrap();
        let close = |c: &[f64], m: &[f64]| dist2(c, m) < 0.05;
        let c = &model.centroids;
        assert!(
            (close(&c[0], &ma) && close(&c[1], &mb)) || (close(&c[0], &mb) && close(&c[1], &ma)),
            "means {c:?} vs blobs {ma:?}/{mb:?}"
        );
        let w = model.weights.as_ref().unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gmm_full_covariance_fits_correlated_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let points: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let t = rng.random::<f64>() * 4.0 - 2.0;
                vec![t, 0.8 * t + 0.1 * (rng.random::<f64>() - 0.5)]
            })
            .collect();
        let options = GmmOptions { covariance: GmmCovKind::Full, ..GmmOptions::default() };
        let model = fit_gmm_with(&points, 1, 3, &options).unwrap();
        let GmmCovariances::Full(covs) = model.covariances.as_ref().unwrap() else {
            panic!("expected full covariances");
        };
        // Strong positive xy-correlation must show up off-diagonal.
        assert!(covs[0][0][1] > 0.5 * covs[0][0][0].sqrt() * covs[0][1][1].sqrt());
        for w in model.history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn elbow_mse_non_increasing_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut points = blob((0.0, 0.0), 8.0, 120, &mut rng);
        points.extend(blob((15.0, 2.0), 8.0, 120, &mut rng));
        let data = elbow(&points, &[2, 4, 8, 16], 5).unwrap();
        assert_eq!(data.points.len(), 4);
        for w in data.points.windows(2) {
            assert!(w[1].mse <= w[0].mse + 1e-12, "{w:?}");
        }
        // Duplicate K entries give identical values.
        let dup = elbow(&points, &[4, 4, 8], 5).unwrap();
        assert_eq!(dup.points[0].mse, dup.points[1].mse);
        // K = distinct count drives MSE to zero.
        let tiny: Vec<Vec<f64>> = (0..6).map(|i| vec![f64::from(i), 0.0]).collect();
        let zero = elbow(&tiny, &[6], 0).unwrap();
        assert_eq!(zero.points[0].mse, 0.0);
    }

    #[test]
    fn map_state_bounds() {
        let points = vec![vec![0.0], vec![1.0], vec![5.0]];
        let model = fit_kme(&points, 2, 0).unwrap();
        assert!(model.map_state(2).is_ok());
        assert!(model.map_state(3).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let points = vec![vec![0.0, 1.0], vec![4.0, 5.0], vec![4.5, 5.0], vec![0.0, 0.5]];
        for model in [
            fit_kme(&points, 2, 1).unwrap(),
            fit_kmm(&points, 2, 1).unwrap(),
            fit_gmm(&points, 2, 1).unwrap(),
        ] {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.json");
            save_model(&path, &model).unwrap();
            assert_eq!(load_model(&path).unwrap(), model);
        }
    }
}
