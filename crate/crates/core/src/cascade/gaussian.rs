use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples per parallel accumulation unit; fixed for reproducible sums.
const CHUNK: usize = 256;
/// Number of evenly spaced quantiles kept from the training distances.
pub const PERCENTILE_STEPS: usize = 10_000;

/// Floor for trace-relative regularization, so constant data stays factorable.
pub const MIN_EPSILON: f64 = 1e-9;

/// Ridge added to the covariance diagonal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Regularization {
    Absolute(f64),
    /// `max(r * trace / dim, MIN_EPSILON)`
    RelativeTrace(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    #[default]
    Full,
    /// Off-diagonal covariance ignored.
    Diagonal,
}

impl CovarianceKind {
    pub fn code(self) -> u32 {
        match self {
            CovarianceKind::Full => 0,
            CovarianceKind::Diagonal => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(CovarianceKind::Full),
            1 => Some(CovarianceKind::Diagonal),
            _ => None,
        }
    }
}

/// Quantiles of a distance sample at `q = i / PERCENTILE_STEPS`, linearly
/// interpolated between order statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct PercentileTable {
    values: Vec<f64>,
}

/// Linear-interpolation quantile of a sorted sample (the "type 7" estimator).
pub fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl PercentileTable {
    pub fn from_sample(mut sample: Vec<f64>) -> Result<Self> {
        if sample.is_empty() {
            return Err(Error::Degenerate("no distances to tabulate".into()));
        }
        sample.sort_by(f64::total_cmp);
        let values = (0..=PERCENTILE_STEPS)
            .map(|i| sorted_quantile(&sample, i as f64 / PERCENTILE_STEPS as f64))
            .collect();
        Ok(Self { values })
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() != PERCENTILE_STEPS + 1 || values.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::Config("percentile table must hold sorted quantiles".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn quantile(&self, q: f64) -> f64 {
        sorted_quantile(&self.values, q)
    }

    pub fn max(&self) -> f64 {
        self.values[PERCENTILE_STEPS]
    }
}

/// One-class Gaussian model with cached whitening factor.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianModel {
    dim: usize,
    mean: Vec<f64>,
    /// Sample covariance (denominator `N - 1`) without regularization.
    covariance: Vec<f64>,
    epsilon: f64,
    kind: CovarianceKind,
    /// `L^-1` where `L L^T = covariance + epsilon I` (lower triangular, row-major).
    whitener: Vec<f64>,
    percentiles: Option<PercentileTable>,
}

/// Lower Cholesky factor of a symmetric `n x n` matrix, or `None` if not positive definite.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Inverse of a lower-triangular matrix.
fn invert_lower(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0 / l[i * n + i];
        for j in 0..i {
            let mut s = 0.0;
            for k in j..i {
                s += l[i * n + k] * inv[k * n + j];
            }
            inv[i * n + j] = -s / l[i * n + i];
        }
    }
    inv
}

impl GaussianModel {
    /// Fits mean and covariance of `vectors` (`N x dim`, row-major) and tabulates
    /// the training distances.
    pub fn fit(vectors: &[f64], dim: usize, epsilon: f64, kind: CovarianceKind) -> Result<Self> {
        Self::fit_regularized(vectors, dim, Regularization::Absolute(epsilon), kind)
    }

    pub fn fit_regularized(vectors: &[f64], dim: usize, reg: Regularization, kind: CovarianceKind) -> Result<Self> {
        if dim == 0 || vectors.len() % dim != 0 {
            return Err(Error::Dimension { expected: dim, got: vectors.len() });
        }
        let n = vectors.len() / dim;
        if n < 2 {
            return Err(Error::Degenerate(format!("need at least 2 vectors to fit a Gaussian, got {n}")));
        }
        let mean = column_mean(vectors, dim);
        let covariance = match kind {
            CovarianceKind::Full => full_covariance(vectors, dim, &mean),
            CovarianceKind::Diagonal => diagonal_covariance(vectors, dim, &mean),
        };
        let epsilon = match reg {
            Regularization::Absolute(e) => e,
            Regularization::RelativeTrace(r) => {
                let trace: f64 = (0..dim).map(|i| covariance[i * dim + i]).sum();
                (r * trace / dim as f64).max(MIN_EPSILON)
            }
        };
        let mut model = Self::from_parts(mean, covariance, epsilon, kind)?;
        let distances = model.distances(vectors)?;
        model.percentiles = Some(PercentileTable::from_sample(distances)?);
        Ok(model)
    }

    /// Rebuilds a model from stored moments; the whitener is recomputed.
    pub fn from_parts(mean: Vec<f64>, covariance: Vec<f64>, epsilon: f64, kind: CovarianceKind) -> Result<Self> {
        let dim = mean.len();
        if covariance.len() != dim * dim {
            return Err(Error::Dimension { expected: dim * dim, got: covariance.len() });
        }
        if !(epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon must be non-negative, got {epsilon}")));
        }
        let mut reg = vec![0.0; dim * dim];
        for i in 0..dim {
            match kind {
                CovarianceKind::Full => reg[i * dim..(i + 1) * dim].copy_from_slice(&covariance[i * dim..(i + 1) * dim]),
                CovarianceKind::Diagonal => reg[i * dim + i] = covariance[i * dim + i],
            }
            reg[i * dim + i] += epsilon;
        }
        let trace: f64 = (0..dim).map(|i| covariance[i * dim + i]).sum();
        let l = cholesky(&reg, dim).ok_or(Error::NotPositiveDefinite {
            epsilon,
            suggested: (epsilon * 10.0).max(1e-6 * (trace / dim as f64).max(1.0)),
        })?;
        Ok(Self {
            dim,
            mean,
            covariance,
            epsilon,
            kind,
            whitener: invert_lower(&l, dim),
            percentiles: None,
        })
    }

    pub fn with_percentiles(mut self, table: PercentileTable) -> Self {
        self.percentiles = Some(table);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &[f64] {
        &self.covariance
    }

    /// `covariance + epsilon I` as used for distances.
    pub fn regularized_covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mut c = self.covariance.clone();
        for i in 0..d {
            if self.kind == CovarianceKind::Diagonal {
                for j in 0..d {
                    if i != j {
                        c[i * d + j] = 0.0;
                    }
                }
            }
            c[i * d + i] += self.epsilon;
        }
        c
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn kind(&self) -> CovarianceKind {
        self.kind
    }

    pub fn percentiles(&self) -> Option<&PercentileTable> {
        self.percentiles.as_ref()
    }

    /// Precision matrix `(covariance + epsilon I)^-1 = L^-T L^-1`.
    pub fn precision(&self) -> Vec<f64> {
        let d = self.dim;
        let w = &self.whitener;
        let mut p = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                p[i * d + j] = (i.max(j)..d).map(|k| w[k * d + i] * w[k * d + j]).sum();
            }
        }
        p
    }

    pub fn mahalanobis(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: x.len() });
        }
        Ok(self.mahalanobis_unchecked(x))
    }

    pub(crate) fn mahalanobis_unchecked(&self, x: &[f64]) -> f64 {
        let d = self.dim;
        let mut delta = Vec::with_capacity(d);
        delta.extend(x.iter().zip(&self.mean).map(|(a, b)| a - b));
        let mut sq = 0.0;
        for i in 0..d {
            let row = &self.whitener[i * d..i * d + i + 1];
            let z: f64 = row.iter().zip(&delta).map(|(w, v)| w * v).sum();
            sq += z * z;
        }
        sq.sqrt()
    }

    /// Distances of every row of `vectors`.
    pub fn distances(&self, vectors: &[f64]) -> Result<Vec<f64>> {
        if vectors.len() % self.dim != 0 {
            return Err(Error::Dimension { expected: self.dim, got: vectors.len() % self.dim });
        }
        Ok(vectors
            .par_chunks(self.dim)
            .map(|x| self.mahalanobis_unchecked(x))
            .collect())
    }
}

fn column_mean(vectors: &[f64], dim: usize) -> Vec<f64> {
    let n = vectors.len() / dim;
    let partial: Vec<Vec<f64>> = vectors
        .par_chunks(CHUNK * dim)
        .map(|chunk| {
            let mut s = vec![0.0; dim];
            for row in chunk.chunks_exact(dim) {
                s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            s
        })
        .collect();
    let mut mean = vec![0.0; dim];
    for s in &partial {
        mean.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

fn full_covariance(vectors: &[f64], dim: usize, mean: &[f64]) -> Vec<f64> {
    let n = vectors.len() / dim;
    let partial: Vec<Vec<f64>> = vectors
        .par_chunks(CHUNK * dim)
        .map(|chunk| {
            let mut acc = vec![0.0; dim * dim];
            let mut delta = vec![0.0; dim];
            for row in chunk.chunks_exact(dim) {
                delta.iter_mut().zip(row.iter().zip(mean)).for_each(|(d, (x, m))| *d = x - m);
                for i in 0..dim {
                    let di = delta[i];
                    if di == 0.0 {
                        continue;
                    }
                    let dst = &mut acc[i * dim..i * dim + i + 1];
                    for (a, &dj) in dst.iter_mut().zip(&delta[..=i]) {
                        *a += di * dj;
                    }
                }
            }
            acc
        })
        .collect();
    let mut cov = vec![0.0; dim * dim];
    for p in &partial {
        cov.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let denom = (n - 1) as f64;
    for i in 0..dim {
        for j in 0..=i {
            let v = cov[i * dim + j] / denom;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    cov
}

fn diagonal_covariance(vectors: &[f64], dim: usize, mean: &[f64]) -> Vec<f64> {
    let n = vectors.len() / dim;
    let mut var = vec![0.0; dim];
    for row in vectors.chunks_exact(dim) {
        for i in 0..dim {
            let d = row[i] - mean[i];
            var[i] += d * d;
        }
    }
    let mut cov = vec![0.0; dim * dim];
    for i in 0..dim {
        cov[i * dim + i] = var[i] / (n - 1) as f64;
    }
    cov
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_vectors() {
        let v = [1.0, -2.0, 3.0];
        let data: Vec<f64> = (0..4).flat_map(|_| v).collect();
        let g = GaussianModel::fit(&data, 3, 0.5, CovarianceKind::Full).unwrap();
        assert_eq!(g.mean(), &v);
        assert!(g.covariance().iter().all(|&c| c == 0.0));
        let reg = g.regularized_covariance();
        assert_eq!(reg[0], 0.5);
        assert_eq!(reg[1], 0.0);
        assert_eq!(g.percentiles().unwrap().max(), 0.0);
    }

    #[test]
    fn relative_regularization() {
        let g = GaussianModel::fit_regularized(&[0.0, 0.0, 2.0, 4.0], 2, Regularization::RelativeTrace(0.1), CovarianceKind::Full).unwrap();
        // Variances 2 and 8.
        assert!((g.epsilon() - 0.5).abs() < 1e-12);
        let flat = GaussianModel::fit_regularized(&[1.0; 6], 2, Regularization::RelativeTrace(0.1), CovarianceKind::Full).unwrap();
        assert_eq!(flat.epsilon(), MIN_EPSILON);
    }

    #[test]
    fn one_dimensional_hand_case() {
        let g = GaussianModel::fit(&[0.0, 2.0], 1, 0.25, CovarianceKind::Full).unwrap();
        assert_eq!(g.mean(), &[1.0]);
        assert_eq!(g.regularized_covariance(), vec![2.25]);
        assert!((g.mahalanobis(&[2.5]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standard_normal_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data: Vec<f64> = (0..200_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let g = GaussianModel::fit(&data, 2, 0.0, CovarianceKind::Full).unwrap();
        assert!(g.mean().iter().all(|m| m.abs() < 0.05));
        let c = g.covariance();
        assert!((c[0] - 1.0).abs() < 0.05 && (c[3] - 1.0).abs() < 0.05 && c[1].abs() < 0.05);
    }

    #[test]
    fn unit_distance() {
        let g = GaussianModel::from_parts(vec![1.0, 1.0], vec![1.0, 0.0, 0.0, 1.0], 0.0, CovarianceKind::Full).unwrap();
        assert_eq!(g.mahalanobis(&[1.0, 1.0]).unwrap(), 0.0);
        assert!((g.mahalanobis(&[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(g.mahalanobis(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn singular_covariance_suggests_epsilon() {
        let err = GaussianModel::from_parts(vec![0.0; 2], vec![1.0, 1.0, 1.0, 1.0], 0.0, CovarianceKind::Full).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { suggested, .. } if suggested > 0.0));
    }

    #[test]
    fn precision_inverts_covariance() {
        let cov = vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let g = GaussianModel::from_parts(vec![0.0; 3], cov.clone(), 0.0, CovarianceKind::Full).unwrap();
        let p = g.precision();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| cov[i * 3 + k] * p[k * 3 + j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn diagonal_mode_ignores_correlation() {
        let data = [0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.1];
        let g = GaussianModel::fit(&data, 2, 0.0, CovarianceKind::Diagonal).unwrap();
        let reg = g.regularized_covariance();
        assert_eq!(reg[1], 0.0);
        let expect = ((1.5f64 / reg[0]) + (1.5f64 / reg[3])).sqrt();
        let d = g.mahalanobis(&[g.mean()[0] + 1.5f64.sqrt(), g.mean()[1] + 1.5f64.sqrt()]).unwrap();
        assert!((d - expect).abs() < 1e-12);
    }

    #[test]
    fn percentile_interpolation() {
        let t = PercentileTable::from_sample((1..=1000).map(f64::from).collect()).unwrap();
        assert!((t.quantile(0.95) - 950.05).abs() < 1e-9);
        assert!((t.quantile(0.999) - 999.001).abs() < 1e-9);
        assert_eq!(t.quantile(1.0), 1000.0);
        assert_eq!(t.quantile(0.0), 1.0);
    }
}
