use rayon::prelude::*;
use serde::Serialize;

use super::bundle::ModelBundle;
use super::config::RunConfig;
use crate::autoencoder::{self, TrainingHistory};
use crate::cascade::{calibrate, encode_vectors, Cascade, GaussianModel, PercentileTable, Regularization, Standardizer};
use crate::error::{Error, Result};
use crate::net::NetworkSpec;
use crate::preproc::{build_input, Frame, PreprocOptions, HISTORY};

/// Regional feature vectors stacked row-major (`count x dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub vectors: Vec<f64>,
}

impl FeatureSet {
    pub fn count(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.vectors.len() / self.dim
        }
    }
}

/// Summary of a training run.
#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub frames: usize,
    pub vectors: usize,
    pub feature_dim: usize,
    pub encoded_dim: usize,
    pub g1_epsilon: f64,
    pub g2_epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub phi: f64,
    /// Share of training cells whose stage-one distance falls strictly between the thresholds.
    pub training_escalation: f64,
    pub autoencoder: TrainingHistory,
}

/// Prepares every frame of every video with `preproc`.
pub fn prepare_videos(videos: Vec<Vec<Frame>>, preproc: &PreprocOptions) -> Vec<Vec<Frame>> {
    videos
        .into_iter()
        .map(|v| v.into_iter().map(|f| preproc.prepare_frame(f)).collect())
        .collect()
}

/// Regional vectors of every frame with full history, in video then frame order.
///
/// Frames must already be prepared.
pub fn extract_features(net: &NetworkSpec, preproc: &PreprocOptions, videos: &[Vec<Frame>]) -> Result<FeatureSet> {
    let jobs: Vec<(usize, usize)> = videos
        .iter()
        .enumerate()
        .flat_map(|(v, frames)| (HISTORY - 1..frames.len()).map(move |t| (v, t)))
        .collect();
    if jobs.is_empty() {
        return Err(Error::InsufficientHistory {
            needed: HISTORY,
            have: videos.iter().map(Vec::len).max().unwrap_or(0),
        });
    }
    let grids: Vec<(usize, Vec<f64>)> = jobs
        .par_iter()
        .map(|&(v, t)| -> Result<(usize, Vec<f64>)> {
            let mut input = build_input(&videos[v][t + 1 - HISTORY..=t], t)?;
            preproc.finish_input(&mut input);
            let grid = net.forward_to_tap(&input)?;
            let (dim, plane) = (grid.dim(), grid.cells());
            let data = grid.values.data();
            let mut out = vec![0.0; dim * plane];
            for c in 0..dim {
                for k in 0..plane {
                    out[k * dim + c] = data[c * plane + k] as f64;
                }
            }
            Ok((dim, out))
        })
        .collect::<Result<_>>()?;
    let dim = grids[0].0;
    if let Some((d, _)) = grids.iter().find(|(d, _)| *d != dim) {
        return Err(Error::Dimension { expected: dim, got: *d });
    }
    let mut vectors = Vec::with_capacity(grids.iter().map(|g| g.1.len()).sum());
    for (_, g) in grids {
        vectors.extend_from_slice(&g);
    }
    Ok(FeatureSet { dim, vectors })
}

/// Fits the full cascade on normal videos.
///
/// `net` is the complete frozen network; it is truncated at `config.tap`.
/// Every failure is tagged with the stage that raised it, and nothing is
/// written to disk here.
pub fn train_pipeline(config: &RunConfig, net: &NetworkSpec, videos: Vec<Vec<Frame>>) -> Result<(ModelBundle, TrainReport)> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let tap = net.tap_after(&config.tap).map_err(|e| e.in_stage("config"))?;
    let network = net.clone().with_tap(tap).map_err(|e| e.in_stage("config"))?.truncated();
    let videos = prepare_videos(videos, &config.preproc);
    let frames = videos.iter().map(Vec::len).sum();

    let features = extract_features(&network, &config.preproc, &videos).map_err(|e| e.in_stage("extract"))?;
    drop(videos);
    let m = features.dim;
    log::info!("extracted {} vectors of length {m}", features.count());

    let standardizer = if config.standardize {
        Standardizer::fit(&features.vectors, m).map_err(|e| e.in_stage("standardize"))?
    } else {
        Standardizer::identity(m)
    };
    let mut x = features.vectors;
    x.par_chunks_mut(m).for_each(|row| {
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - standardizer.mean[i]) / standardizer.scale[i];
        }
    });

    let reg = Regularization::RelativeTrace(config.gaussian.epsilon_rel);
    let g1 = GaussianModel::fit_regularized(&x, m, reg, config.gaussian.covariance).map_err(|e| e.in_stage("fit G1"))?;
    log::info!("fitted G1 (epsilon {:e})", g1.epsilon());

    let hyper = config.autoencoder_hyper();
    let (ae, history) = autoencoder::train(&x, m, &hyper).map_err(|e| e.in_stage("autoencoder"))?;
    log::info!("trained autoencoder, best epoch {}", history.best_epoch);

    let encoder = ae.as_conv_layer();
    let encoded = encode_vectors(&encoder, &x).map_err(|e| e.in_stage("encode"))?;
    let g2 = GaussianModel::fit_regularized(&encoded, hyper.hidden, reg, config.gaussian.covariance)
        .map_err(|e| e.in_stage("fit G2"))?;
    log::info!("fitted G2 (epsilon {:e})", g2.epsilon());

    let table = |g: &GaussianModel| -> Result<PercentileTable> {
        g.percentiles()
            .cloned()
            .ok_or_else(|| Error::Degenerate("model has no percentile table".into()))
    };
    let cascade_config = calibrate(
        &table(&g1).map_err(|e| e.in_stage("calibrate"))?,
        &table(&g2).map_err(|e| e.in_stage("calibrate"))?,
        &config.quantiles,
    )
    .map_err(|e| e.in_stage("calibrate"))?;

    let d1 = g1.distances(&x).map_err(|e| e.in_stage("calibrate"))?;
    let escalated = d1
        .iter()
        .filter(|&&d| d > cascade_config.beta && d < cascade_config.alpha)
        .count();
    let report = TrainReport {
        frames,
        vectors: d1.len(),
        feature_dim: m,
        encoded_dim: hyper.hidden,
        g1_epsilon: g1.epsilon(),
        g2_epsilon: g2.epsilon(),
        alpha: cascade_config.alpha,
        beta: cascade_config.beta,
        phi: cascade_config.phi,
        training_escalation: escalated as f64 / d1.len() as f64,
        autoencoder: history,
    };
    let bundle = ModelBundle {
        network,
        preproc: config.preproc.clone(),
        cascade: Cascade {
            standardizer,
            g1,
            encoder,
            g2,
            config: cascade_config,
        },
        autoencoder: hyper,
        quantiles: config.quantiles,
        zeta: config.zeta,
    };
    bundle.validate().map_err(|e| e.in_stage("assemble"))?;
    Ok((bundle, report))
}
