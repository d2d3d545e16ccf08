use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::bundle::ModelBundle;
use crate::error::Result;
use crate::localization::{accumulate, threshold_votes, DetectionMask, VoteMap};
use crate::preproc::{Frame, TemporalBuffer};
use crate::rfgeom::RfGeometry;

/// Detection output for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    pub frame_index: usize,
    /// Set for the first frames of a stream, which lack temporal history.
    pub warmup: bool,
    pub score: f64,
    pub rows: usize,
    pub cols: usize,
    /// Row-major cell scores (empty during warmup).
    pub cell_scores: Vec<f64>,
    pub escalated: usize,
    pub abnormal_cells: usize,
    pub votes: VoteMap,
    pub mask: DetectionMask,
}

impl FrameResult {
    fn warmup(frame_index: usize, height: usize, width: usize) -> Self {
        Self {
            frame_index,
            warmup: true,
            score: 0.0,
            rows: 0,
            cols: 0,
            cell_scores: Vec::new(),
            escalated: 0,
            abnormal_cells: 0,
            votes: VoteMap::zeros(height, width),
            mask: DetectionMask::empty(height, width, frame_index),
        }
    }

    pub fn record(&self) -> FrameRecord {
        FrameRecord {
            frame_index: self.frame_index,
            warmup: self.warmup,
            score: self.score,
            rows: self.rows,
            cols: self.cols,
            escalated: self.escalated,
            abnormal_cells: self.abnormal_cells,
            mask_pixels: self.mask.count(),
            cell_scores: self.cell_scores.clone(),
        }
    }
}

/// Serializable per-frame summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub warmup: bool,
    pub score: f64,
    pub rows: usize,
    pub cols: usize,
    pub escalated: usize,
    pub abnormal_cells: usize,
    pub mask_pixels: usize,
    pub cell_scores: Vec<f64>,
}

/// Time spent per stage, accumulated across frames.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    /// Resizing, temporal averaging and stacking (decoding is added by the caller).
    pub preprocessing: Duration,
    /// Frozen layers plus the encoder on escalated cells.
    pub representation: Duration,
    /// Distances, verdicts, votes and masks.
    pub classifying: Duration,
}

/// Streaming detector over one video. Holds at most six frames.
pub struct Detector<'a> {
    bundle: &'a ModelBundle,
    geometry: RfGeometry,
    buffer: TemporalBuffer,
    next_index: usize,
}

impl<'a> Detector<'a> {
    pub fn new(bundle: &'a ModelBundle) -> Self {
        Self {
            bundle,
            geometry: bundle.geometry(),
            buffer: TemporalBuffer::new(),
            next_index: 0,
        }
    }

    pub fn geometry(&self) -> &RfGeometry {
        &self.geometry
    }

    /// Number of frames pushed so far.
    pub fn frames_seen(&self) -> usize {
        self.next_index
    }

    /// Frames currently buffered.
    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Consumes a frame index without a frame, e.g. after a decode failure.
    /// The temporal window then spans the gap.
    pub fn skip(&mut self) -> usize {
        self.next_index += 1;
        self.next_index - 1
    }

    pub fn push(&mut self, frame: Frame) -> Result<FrameResult> {
        let mut times = StageTimes::default();
        self.push_timed(frame, &mut times)
    }

    /// Processes the next frame, adding the time of each stage to `times`.
    pub fn push_timed(&mut self, frame: Frame, times: &mut StageTimes) -> Result<FrameResult> {
        let t0 = Instant::now();
        let frame = self.bundle.preproc.prepare_frame(frame);
        let (height, width) = frame.dims();
        self.buffer.push(frame)?;
        let index = self.next_index;
        self.next_index += 1;
        if !self.buffer.is_ready() {
            times.preprocessing += t0.elapsed();
            return Ok(FrameResult::warmup(index, height, width));
        }
        let mut input = self.buffer.input(index)?;
        self.bundle.preproc.finish_input(&mut input);
        let t1 = Instant::now();
        times.preprocessing += t1 - t0;

        let grid = self.bundle.network.forward_to_tap(&input)?;
        let t2 = Instant::now();
        let verdicts = self.bundle.cascade.classify_grid(&grid)?;
        let cells = verdicts.abnormal_cells();
        let votes = accumulate(&cells, &self.geometry, (verdicts.rows, verdicts.cols), (height, width))?;
        let mask = threshold_votes(&votes, self.bundle.zeta, index);
        let t3 = Instant::now();
        times.representation += (t2 - t1) + verdicts.encode_time;
        times.classifying += (t3 - t2).saturating_sub(verdicts.encode_time);

        Ok(FrameResult {
            frame_index: index,
            warmup: false,
            score: verdicts.frame_score(),
            rows: verdicts.rows,
            cols: verdicts.cols,
            cell_scores: verdicts.scores,
            escalated: verdicts.escalated,
            abnormal_cells: cells.len(),
            votes,
            mask,
        })
    }
}

/// Runs a whole in-memory video.
pub fn detect_video(bundle: &ModelBundle, frames: impl IntoIterator<Item = Frame>) -> Result<Vec<FrameResult>> {
    let mut det = Detector::new(bundle);
    frames.into_iter().map(|f| det.push(f)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub frames: usize,
    pub warmup: usize,
    /// Indices of frames that failed to decode and were skipped.
    pub skipped: Vec<usize>,
    pub max_score: f64,
}

/// Runs a stream, handing each result to `emit` in frame order.
///
/// Frame source errors abort when `strict`, otherwise the frame is logged and
/// skipped. Errors raised while processing a decoded frame always abort.
pub fn detect_stream<I, F>(bundle: &ModelBundle, frames: I, strict: bool, mut emit: F) -> Result<StreamSummary>
where
    I: IntoIterator<Item = Result<Frame>>,
    F: FnMut(FrameResult) -> Result<()>,
{
    let mut det = Detector::new(bundle);
    let mut summary = StreamSummary::default();
    for item in frames {
        match item {
            Ok(frame) => {
                let r = det.push(frame)?;
                summary.frames += 1;
                summary.warmup += r.warmup as usize;
                summary.max_score = summary.max_score.max(r.score);
                emit(r)?;
            }
            Err(e) if !strict => {
                let index = det.skip();
                log::warn!("skipping frame {index}: {e}");
                summary.skipped.push(index);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(summary)
}
