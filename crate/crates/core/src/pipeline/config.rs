use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::AeHyper;
use crate::cascade::{CovarianceKind, QuantileConfig};
use crate::error::{Error, Result};
use crate::localization::DEFAULT_ZETA;
use crate::preproc::PreprocOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianConfig {
    /// Ridge as a fraction of the mean variance (`trace / dim`).
    pub epsilon_rel: f64,
    pub covariance: CovarianceKind,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        Self {
            epsilon_rel: 1e-3,
            covariance: CovarianceKind::Full,
        }
    }
}

/// Every knob of a training run, loadable from TOML.
///
/// ```toml
/// tap = "C2"
/// seed = 7
/// [autoencoder]
/// hidden = 64
/// epochs = 10
/// [quantiles]
/// alpha = 0.999
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training data: a directory of frames or a directory of per-video directories.
    pub data: Option<PathBuf>,
    /// Name of the layer whose output is classified.
    pub tap: String,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    /// Standardize regional features before fitting.
    pub standardize: bool,
    pub zeta: u32,
    pub preproc: PreprocOptions,
    pub gaussian: GaussianConfig,
    pub quantiles: QuantileConfig,
    pub autoencoder: AeHyper,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            tap: "C2".into(),
            seed: 0,
            workers: 0,
            standardize: true,
            zeta: DEFAULT_ZETA,
            preproc: PreprocOptions::default(),
            gaussian: GaussianConfig::default(),
            quantiles: QuantileConfig::default(),
            autoencoder: AeHyper::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Autoencoder settings with the run seed applied.
    pub fn autoencoder_hyper(&self) -> AeHyper {
        AeHyper {
            seed: self.seed,
            ..self.autoencoder.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tap.is_empty() {
            return Err(Error::Config("tap layer name is empty".into()));
        }
        if !(self.gaussian.epsilon_rel.is_finite() && self.gaussian.epsilon_rel >= 0.0) {
            return Err(Error::Config(format!(
                "gaussian.epsilon_rel must be a non-negative number, got {}",
                self.gaussian.epsilon_rel
            )));
        }
        let q = &self.quantiles;
        for (name, v) in [("beta", q.beta), ("alpha", q.alpha), ("phi", q.phi)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("quantiles.{name} must lie in (0, 1), got {v}")));
            }
        }
        if q.beta >= q.alpha {
            return Err(Error::Config(format!(
                "quantiles.beta ({}) must be below quantiles.alpha ({})",
                q.beta, q.alpha
            )));
        }
        if let Some([w, h]) = self.preproc.resize {
            if w == 0 || h == 0 {
                return Err(Error::Config("preproc.resize dimensions must be positive".into()));
            }
        }
        self.autoencoder.validate()
    }
}
