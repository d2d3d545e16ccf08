use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::bundle::ModelBundle;
use super::detect::{Detector, StageTimes};
use crate::error::{Error, Result};
use crate::preproc::Frame;

/// Mean per-frame wall-clock times in milliseconds over non-warmup frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub warmup_frames: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Decoding, temporal averaging and stacking.
    pub preprocessing_ms: f64,
    /// Frozen layers plus the encoder on escalated cells.
    pub representation_ms: f64,
    /// Distances, verdicts and votes.
    pub classifying_ms: f64,
    pub total_ms: f64,
    pub fps: f64,
}

impl BenchReport {
    pub fn stage_sum_ms(&self) -> f64 {
        self.preprocessing_ms + self.representation_ms + self.classifying_ms
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} frames of {}x{} ({} warmup excluded)",
            self.frames, self.frame_width, self.frame_height, self.warmup_frames
        );
        let _ = writeln!(s, "{:<16}{:>12}", "stage", "ms / frame");
        for (name, v) in [
            ("Pre-processing", self.preprocessing_ms),
            ("Representation", self.representation_ms),
            ("Classifying", self.classifying_ms),
            ("Total", self.total_ms),
        ] {
            let _ = writeln!(s, "{name:<16}{v:>12.3}");
        }
        let _ = writeln!(s, "{:<16}{:>12.1}", "fps", self.fps);
        s
    }
}

/// Times detection over a frame stream. Each item's production (decode) is
/// counted as pre-processing; `total` is the wall time from requesting a frame
/// to receiving its result.
pub fn bench<I>(bundle: &ModelBundle, frames: I) -> Result<BenchReport>
where
    I: IntoIterator<Item = Result<Frame>>,
{
    let mut det = Detector::new(bundle);
    let mut iter = frames.into_iter();
    let mut stages = StageTimes::default();
    let mut total = Duration::ZERO;
    let (mut measured, mut warmup) = (0usize, 0usize);
    let mut dims = (0, 0);
    loop {
        let t0 = Instant::now();
        let Some(item) = iter.next() else { break };
        let frame = item?;
        let decode = t0.elapsed();
        let mut times = StageTimes::default();
        let r = det.push_timed(frame, &mut times)?;
        let elapsed = t0.elapsed();
        dims = (r.mask.height, r.mask.width);
        if r.warmup {
            warmup += 1;
            continue;
        }
        measured += 1;
        stages.preprocessing += decode + times.preprocessing;
        stages.representation += times.representation;
        stages.classifying += times.classifying;
        total += elapsed;
    }
    if measured == 0 {
        return Err(Error::InsufficientHistory {
            needed: crate::preproc::HISTORY,
            have: warmup,
        });
    }
    let ms = |d: Duration| d.as_secs_f64() * 1e3 / measured as f64;
    let total_ms = ms(total);
    Ok(BenchReport {
        frames: measured,
        warmup_frames: warmup,
        frame_height: dims.0,
        frame_width: dims.1,
        preprocessing_ms: ms(stages.preprocessing),
        representation_ms: ms(stages.representation),
        classifying_ms: ms(stages.classifying),
        total_ms,
        fps: 1e3 / total_ms,
    })
}
