//! Frame- and pixel-level ROC analysis.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localization::{accumulate, threshold_votes, DetectionMask};
use crate::rfgeom::RfGeometry;

/// Fraction of ground-truth pixels a detection must cover at pixel level.
pub const PIXEL_COVERAGE: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub frame_index: usize,
    pub score: f64,
    /// Ground truth says abnormal.
    pub positive: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Predictions are `score >= threshold`; `+inf` for the origin.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    /// False-positive rate where it equals the miss rate, linearly interpolated.
    pub eer: f64,
}

/// A frame is abnormal if any pixel is flagged.
pub fn frame_level_label(mask: &DetectionMask) -> bool {
    mask.any()
}

/// Whether `pred` covers at least 40% of a non-empty ground truth.
pub fn pixel_level_match(pred: &DetectionMask, gt: &DetectionMask) -> Result<bool> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let gt_count = gt.count();
    if gt_count == 0 {
        return Ok(false);
    }
    let hit = pred.pixels.iter().zip(&gt.pixels).filter(|(p, g)| **p && **g).count();
    // Integer form of hit >= 0.4 * gt_count.
    Ok(hit * 10 >= gt_count * 4)
}

fn finish_curve(mut points: Vec<RocPoint>) -> RocCurve {
    if points.last().map(|p| (p.fpr, p.tpr)) != Some((1.0, 1.0)) {
        points.push(RocPoint {
            threshold: f64::NEG_INFINITY,
            fpr: 1.0,
            tpr: 1.0,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    let eer = equal_error_rate(&points);
    RocCurve { points, auc, eer }
}

/// Walks the curve until `fpr + tpr - 1` changes sign and interpolates linearly.
fn equal_error_rate(points: &[RocPoint]) -> f64 {
    let gap = |p: &RocPoint| p.fpr + p.tpr - 1.0;
    for w in points.windows(2) {
        let (g0, g1) = (gap(&w[0]), gap(&w[1]));
        if g0 == 0.0 {
            return w[0].fpr;
        }
        if g0 < 0.0 && g1 >= 0.0 {
            let t = -g0 / (g1 - g0);
            return w[0].fpr + t * (w[1].fpr - w[0].fpr);
        }
    }
    points.last().map(|p| p.fpr).unwrap_or(1.0)
}

/// ROC over every distinct score (prediction rule `score >= threshold`).
pub fn roc(scores: &[LabeledScore]) -> Result<RocCurve> {
    if scores.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::UndefinedMetric("non-finite score".into()));
    }
    let pos = scores.iter().filter(|s| s.positive).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let mut sorted: Vec<&LabeledScore> = scores.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < sorted.len() {
        let t = sorted[k].score;
        while k < sorted.len() && sorted[k].score == t {
            if sorted[k].positive {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(finish_curve(points))
}

/// One evaluated frame for pixel-level analysis.
#[derive(Clone, Debug)]
pub struct PixelFrame {
    pub frame_index: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major cell scores.
    pub cell_scores: Vec<f64>,
    pub ground_truth: DetectionMask,
}

/// Pixel-level ROC: at each threshold the cells scoring `>= t` vote a mask
/// per frame. A frame with ground truth is a true positive when the mask covers
/// 40% of it; a frame without ground truth is a false positive when its mask is
/// non-empty.
///
/// Thresholds are the distinct cell scores, thinned to at most `max_thresholds`
/// evenly spaced order statistics.
pub fn pixel_roc(frames: &[PixelFrame], geometry: &RfGeometry, zeta: u32, max_thresholds: usize) -> Result<RocCurve> {
    let pos = frames.iter().filter(|f| f.ground_truth.any()).count();
    let neg = frames.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "pixel ROC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    for f in frames {
        if f.cell_scores.len() != f.rows * f.cols {
            return Err(Error::Dimension { expected: f.rows * f.cols, got: f.cell_scores.len() });
        }
    }
    let mut distinct: Vec<f64> = frames.iter().flat_map(|f| f.cell_scores.iter().copied()).collect();
    if distinct.iter().any(|s| !s.is_finite()) {
        return Err(Error::UndefinedMetric("non-finite cell score".into()));
    }
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    let thresholds: Vec<f64> = if distinct.len() <= max_thresholds.max(2) {
        distinct
    } else {
        let n = max_thresholds.max(2);
        (0..n)
            .map(|i| distinct[i * (distinct.len() - 1) / (n - 1)])
            .collect()
    };

    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    for &t in &thresholds {
        let outcomes: Vec<(bool, bool)> = frames
            .par_iter()
            .map(|f| -> Result<(bool, bool)> {
                let cells: Vec<(usize, usize)> = f
                    .cell_scores
                    .iter()
                    .enumerate()
                    .filter(|(_, &s)| s >= t)
                    .map(|(k, _)| (k / f.cols, k % f.cols))
                    .collect();
                let gt = &f.ground_truth;
                let votes = accumulate(&cells, geometry, (f.rows, f.cols), (gt.height, gt.width))?;
                let mask = threshold_votes(&votes, zeta, f.frame_index);
                Ok(if gt.any() {
                    (true, pixel_level_match(&mask, gt)?)
                } else {
                    (false, mask.any())
                })
            })
            .collect::<Result<_>>()?;
        let tp = outcomes.iter().filter(|(p, hit)| *p && *hit).count();
        let fp = outcomes.iter().filter(|(p, hit)| !*p && *hit).count();
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(finish_curve(points))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Frame,
    Pixel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub level: Level,
    pub frames: usize,
    pub positives: usize,
    pub negatives: usize,
    pub auc: f64,
    pub eer: f64,
    pub curve: Vec<RocPoint>,
}

impl EvalReport {
    pub fn new(level: Level, positives: usize, negatives: usize, curve: RocCurve) -> Self {
        Self {
            level,
            frames: positives + negatives,
            positives,
            negatives,
            auc: curve.auc,
            eer: curve.eer,
            curve: curve.points,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let level = match self.level {
            Level::Frame => "frame",
            Level::Pixel => "pixel",
        };
        let _ = writeln!(s, "{:<12}{:>10}", "level", level);
        let _ = writeln!(s, "{:<12}{:>10}", "frames", self.frames);
        let _ = writeln!(s, "{:<12}{:>10}", "positives", self.positives);
        let _ = writeln!(s, "{:<12}{:>10}", "negatives", self.negatives);
        let _ = writeln!(s, "{:<12}{:>10.4}", "AUC", self.auc);
        let _ = writeln!(s, "{:<12}{:>9.2}%", "EER", self.eer * 100.0);
        s
    }

    /// `threshold,fpr,tpr` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for p in &self.curve {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.fpr, p.tpr);
        }
        s
    }
}
