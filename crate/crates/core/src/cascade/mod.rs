//! Two-stage Gaussian cascade.
//!
//! Stage one measures the Mahalanobis distance `d1` of a raw regional feature
//! vector from `G1`:
//!
//! * `d1 <= beta` is normal,
//! * `d1 >= alpha` is abnormal,
//! * anything in between is suspicious.
//!
//! Suspicious cells are re-described by the autoencoder layer and measured
//! against `G2`; `d2 >= phi` is abnormal, otherwise normal.

mod gaussian;

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gaussian::{
    sorted_quantile, CovarianceKind, GaussianModel, PercentileTable, Regularization, MIN_EPSILON, PERCENTILE_STEPS,
};

use crate::error::{Error, Result};
use crate::net::{conv_forward, ConvLayerSpec, FeatureGrid};
use crate::tensor::Tensor3;

/// Stage thresholds in Mahalanobis-distance units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub alpha: f64,
    pub beta: f64,
    pub phi: f64,
}

impl CascadeConfig {
    pub fn new(alpha: f64, beta: f64, phi: f64) -> Result<Self> {
        let cfg = Self { alpha, beta, phi };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta < self.alpha && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "cascade thresholds need 0 <= beta < alpha, got beta {} alpha {}",
                self.beta, self.alpha
            )));
        }
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(Error::Config(format!("phi must be positive, got {}", self.phi)));
        }
        Ok(())
    }
}

/// Training-distance quantiles used to place the thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantileConfig {
    pub beta: f64,
    pub alpha: f64,
    pub phi: f64,
}

impl Default for QuantileConfig {
    fn default() -> Self {
        Self {
            beta: 0.95,
            alpha: 0.999,
            phi: 0.99,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Normal,
    Suspicious,
    Abnormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionVerdict {
    pub verdict: Verdict,
    pub stage: u8,
    pub d1: f64,
    pub d2: Option<f64>,
}

impl RegionVerdict {
    /// Continuous score whose `>= 1` region is exactly the abnormal verdict:
    /// `d1 / alpha` when stage one decides, `max(d1 / alpha, d2 / phi)` otherwise.
    pub fn score(&self, cfg: &CascadeConfig) -> f64 {
        let s1 = self.d1 / cfg.alpha;
        match self.d2 {
            Some(d2) => s1.max(d2 / cfg.phi),
            None => s1,
        }
    }
}

pub fn stage1(d1: f64, cfg: &CascadeConfig) -> RegionVerdict {
    let verdict = if d1 <= cfg.beta {
        Verdict::Normal
    } else if d1 >= cfg.alpha {
        Verdict::Abnormal
    } else {
        Verdict::Suspicious
    };
    RegionVerdict {
        verdict,
        stage: 1,
        d1,
        d2: None,
    }
}

/// Resolves a suspicious stage-one verdict with the stage-two distance.
pub fn stage2(first: RegionVerdict, d2: f64, cfg: &CascadeConfig) -> RegionVerdict {
    RegionVerdict {
        verdict: if d2 >= cfg.phi { Verdict::Abnormal } else { Verdict::Normal },
        stage: 2,
        d1: first.d1,
        d2: Some(d2),
    }
}

pub fn calibrate(g1: &PercentileTable, g2: &PercentileTable, q: &QuantileConfig) -> Result<CascadeConfig> {
    for (name, v) in [("beta", q.beta), ("alpha", q.alpha), ("phi", q.phi)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("{name} quantile {v} outside [0, 1]")));
        }
    }
    if q.beta >= q.alpha {
        return Err(Error::Config(format!(
            "beta quantile {} must be below alpha quantile {}",
            q.beta, q.alpha
        )));
    }
    let cfg = CascadeConfig {
        beta: g1.quantile(q.beta),
        alpha: g1.quantile(q.alpha),
        phi: g2.quantile(q.phi),
    };
    cfg.validate().map_err(|e| Error::Degenerate(format!("calibrated thresholds are unusable: {e}")))?;
    Ok(cfg)
}

/// Per-dimension affine normalization `(x - mean) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Fits mean and standard deviation; constant dimensions keep scale 1.
    pub fn fit(vectors: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || vectors.len() % dim != 0 || vectors.is_empty() {
            return Err(Error::Dimension { expected: dim, got: vectors.len() });
        }
        let n = (vectors.len() / dim) as f64;
        let mut mean = vec![0.0; dim];
        for row in vectors.chunks_exact(dim) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in vectors.chunks_exact(dim) {
            for i in 0..dim {
                let d = row[i] - mean[i];
                var[i] += d * d;
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 1e-8 { sd } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_into(&self, x: &[f32], out: &mut [f64]) {
        for i in 0..self.mean.len() {
            out[i] = (x[i] as f64 - self.mean[i]) / self.scale[i];
        }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f64> {
        let mut out = vec![0.0; self.mean.len()];
        self.apply_into(x, &mut out);
        out
    }
}

/// Verdicts for every cell of one feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridVerdicts {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<RegionVerdict>,
    pub scores: Vec<f64>,
    /// Cells passed through the autoencoder layer.
    pub escalated: usize,
    /// Wall time spent in the autoencoder layer.
    pub encode_time: Duration,
}

impl GridVerdicts {
    /// Maximum cell score (0 for an empty grid).
    pub fn frame_score(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }

    pub fn abnormal_cells(&self) -> Vec<(usize, usize)> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, v)| v.verdict == Verdict::Abnormal)
            .map(|(k, _)| (k / self.cols, k % self.cols))
            .collect()
    }
}

/// Applies a 1x1 encoder layer to `n` row-major vectors of length `in_channels`.
pub fn encode_vectors(encoder: &ConvLayerSpec, vectors: &[f64]) -> Result<Vec<f64>> {
    let m = encoder.in_channels;
    if m == 0 || vectors.len() % m != 0 {
        return Err(Error::Dimension { expected: m, got: vectors.len() });
    }
    let n = vectors.len() / m;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut data = vec![0.0f32; m * n];
    for (k, row) in vectors.chunks_exact(m).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            data[c * n + k] = v as f32;
        }
    }
    let out = conv_forward(&Tensor3::from_vec(m, 1, n, data)?, encoder)?;
    let h = encoder.out_channels;
    let mut encoded = vec![0.0f64; n * h];
    for j in 0..h {
        for (k, &v) in out.channel(j).iter().enumerate() {
            encoded[k * h + j] = v as f64;
        }
    }
    Ok(encoded)
}

/// Fitted models and thresholds for the full cascade.
#[derive(Clone, Debug, PartialEq)]
pub struct Cascade {
    pub standardizer: Standardizer,
    pub g1: GaussianModel,
    /// Autoencoder encoder as a 1x1 convolution over standardized features.
    pub encoder: ConvLayerSpec,
    pub g2: GaussianModel,
    pub config: CascadeConfig,
}

impl Cascade {
    pub fn validate(&self) -> Result<()> {
        let m = self.standardizer.dim();
        if self.g1.dim() != m || self.encoder.in_channels != m {
            return Err(Error::Config(format!(
                "G1 ({}), encoder input ({}) and standardizer ({m}) dimensions differ",
                self.g1.dim(),
                self.encoder.in_channels
            )));
        }
        if self.g2.dim() != self.encoder.out_channels {
            return Err(Error::Config(format!(
                "G2 dimension {} differs from encoder width {}",
                self.g2.dim(),
                self.encoder.out_channels
            )));
        }
        self.encoder.validate()?;
        self.config.validate()
    }

    /// Runs the encoder layer on a batch of standardized vectors (`n x m`).
    pub fn encode_batch(&self, standardized: &[f64]) -> Result<Vec<f64>> {
        encode_vectors(&self.encoder, standardized)
    }

    pub fn classify_grid(&self, grid: &FeatureGrid) -> Result<GridVerdicts> {
        let m = self.standardizer.dim();
        if grid.dim() != m {
            return Err(Error::Dimension { expected: m, got: grid.dim() });
        }
        let (rows, cols) = (grid.rows(), grid.cols());
        let plane = rows * cols;
        let values = grid.values.data();
        let standardized: Vec<Vec<f64>> = (0..plane)
            .into_par_iter()
            .map(|k| {
                let raw: Vec<f32> = (0..m).map(|c| values[c * plane + k]).collect();
                self.standardizer.apply(&raw)
            })
            .collect();
        let mut cells: Vec<RegionVerdict> = standardized
            .par_iter()
            .map(|x| stage1(self.g1.mahalanobis_unchecked(x), &self.config))
            .collect();

        let suspicious: Vec<usize> = (0..plane)
            .filter(|&k| cells[k].verdict == Verdict::Suspicious)
            .collect();
        let t0 = Instant::now();
        let batch: Vec<f64> = suspicious
            .iter()
            .flat_map(|&k| standardized[k].iter().copied())
            .collect();
        let encoded = self.encode_batch(&batch)?;
        let encode_time = t0.elapsed();
        let h = self.g2.dim();
        let d2: Vec<f64> = encoded
            .par_chunks(h.max(1))
            .map(|t| self.g2.mahalanobis_unchecked(t))
            .collect();
        for (&k, &d) in suspicious.iter().zip(&d2) {
            cells[k] = stage2(cells[k], d, &self.config);
        }
        let scores = cells.iter().map(|v| v.score(&self.config)).collect();
        Ok(GridVerdicts {
            rows,
            cols,
            cells,
            scores,
            escalated: suspicious.len(),
            encode_time,
        })
    }
}
