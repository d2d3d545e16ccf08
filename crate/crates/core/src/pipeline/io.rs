use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bundle::ModelBundle;
use super::detect::{FrameRecord, FrameResult, StreamSummary};
use crate::error::{Error, Result};
use crate::eval::{pixel_roc, roc, EvalReport, LabeledScore, Level, PixelFrame};
use crate::localization::DetectionMask;
use crate::preproc::{list_frames, read_frame, Frame, RawFrameReader};
use crate::rfgeom::RfGeometry;

/// Frames read lazily from a directory of images or a raw byte stream.
pub enum FrameSource {
    Files(std::vec::IntoIter<PathBuf>),
    Raw(RawFrameReader<BufReader<File>>),
}

impl FrameSource {
    /// A directory of PGM files, or with `raw = Some((width, height))` a file of
    /// concatenated 8-bit frames.
    pub fn open(path: &Path, raw: Option<(usize, usize)>) -> Result<Self> {
        match raw {
            Some((w, h)) => {
                let f = File::open(path).map_err(|e| Error::io(path, e))?;
                Ok(FrameSource::Raw(RawFrameReader::new(BufReader::new(f), h, w, path)))
            }
            None => Ok(FrameSource::Files(list_frames(path)?.into_iter())),
        }
    }
}

impl Iterator for FrameSource {
    type Item = Result<Frame>;

    fn next(&mut self) -> Option<Self::Item> {
        match self {
            FrameSource::Files(paths) => paths.next().map(|p| read_frame(&p)),
            FrameSource::Raw(r) => r.next(),
        }
    }
}

/// Loads training videos: `dir` itself when it holds frames, otherwise each
/// subdirectory that does (sorted by name). Directories ending in `_gt` are ignored.
pub fn load_videos(dir: &Path) -> Result<Vec<Vec<Frame>>> {
    let own = list_frames(dir)?;
    if !own.is_empty() {
        return Ok(vec![own.iter().map(|p| read_frame(p)).collect::<Result<_>>()?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && !p.to_string_lossy().ends_with("_gt"))
        .collect();
    subdirs.sort();
    let mut videos = Vec::new();
    for d in subdirs {
        let frames = list_frames(&d)?;
        if !frames.is_empty() {
            videos.push(frames.iter().map(|p| read_frame(p)).collect::<Result<_>>()?);
        }
    }
    if videos.is_empty() {
        return Err(Error::Config(format!("no frames found under {}", dir.display())));
    }
    Ok(videos)
}

/// Contents of `detections.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionHeader {
    pub tap_layer: String,
    pub zeta: u32,
    pub frame_height: usize,
    pub frame_width: usize,
    pub geometry: RfGeometry,
    pub alpha: f64,
    pub beta: f64,
    pub phi: f64,
    pub summary: StreamSummary,
}

/// Writes detection results under `OUT/`:
///
/// * `frames.jsonl`: one [`FrameRecord`] per line,
/// * `masks.jsonl`: one run-length mask per line,
/// * `masks/mask_NNNNNN.pgm` and `heat/heat_NNNNNN.pgm`,
/// * `detections.json`: stream header, written by [`DetectionWriter::finish`].
pub struct DetectionWriter {
    dir: PathBuf,
    frames: BufWriter<File>,
    masks: BufWriter<File>,
    images: bool,
    dims: Option<(usize, usize)>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

impl DetectionWriter {
    pub fn new(dir: &Path, images: bool) -> Result<Self> {
        let mkdir = |d: &Path| fs::create_dir_all(d).map_err(|e| Error::io(d, e));
        mkdir(dir)?;
        if images {
            mkdir(&dir.join("masks"))?;
            mkdir(&dir.join("heat"))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            frames: create(&dir.join("frames.jsonl"))?,
            masks: create(&dir.join("masks.jsonl"))?,
            images,
            dims: None,
        })
    }

    pub fn write(&mut self, r: &FrameResult) -> Result<()> {
        self.dims.get_or_insert((r.mask.height, r.mask.width));
        json_line(&mut self.frames, &self.dir.join("frames.jsonl"), &r.record())?;
        json_line(&mut self.masks, &self.dir.join("masks.jsonl"), &r.mask.to_rle())?;
        if self.images {
            let (h, w) = (r.mask.height, r.mask.width);
            let name = format!("{:06}.pgm", r.frame_index);
            crate::preproc::write_pgm(&self.dir.join("masks").join(format!("mask_{name}")), h, w, &r.mask.to_gray())?;
            crate::preproc::write_pgm(&self.dir.join("heat").join(format!("heat_{name}")), h, w, &r.votes.heat_map())?;
        }
        Ok(())
    }

    pub fn finish(mut self, bundle: &ModelBundle, summary: &StreamSummary) -> Result<DetectionHeader> {
        for (w, name) in [(&mut self.frames, "frames.jsonl"), (&mut self.masks, "masks.jsonl")] {
            w.flush().map_err(|e| Error::io(self.dir.join(name), e))?;
        }
        let (frame_height, frame_width) = self.dims.unwrap_or((0, 0));
        let c = &bundle.cascade.config;
        let header = DetectionHeader {
            tap_layer: bundle.tap_layer().to_string(),
            zeta: bundle.zeta,
            frame_height,
            frame_width,
            geometry: bundle.geometry(),
            alpha: c.alpha,
            beta: c.beta,
            phi: c.phi,
            summary: summary.clone(),
        };
        write_json(&self.dir.join("detections.json"), &header)?;
        Ok(header)
    }
}

fn json_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)
        .map_err(std::io::Error::from)
        .and_then(|_| w.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a directory written by [`DetectionWriter`].
pub fn read_detections(dir: &Path) -> Result<(DetectionHeader, Vec<FrameRecord>)> {
    let header_path = dir.join("detections.json");
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: DetectionHeader = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", header_path.display())))?;
    let path = dir.join("frames.jsonl");
    let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok((header, records))
}

/// Reads ground-truth masks (nonzero pixels are anomalous), indexed by sorted position.
pub fn read_ground_truth(dir: &Path) -> Result<Vec<DetectionMask>> {
    list_frames(dir)?
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let f = read_frame(p)?;
            let (h, w) = f.dims();
            Ok(DetectionMask {
                height: h,
                width: w,
                pixels: f.data().iter().map(|&v| v > 0.0).collect(),
                frame_index: i,
            })
        })
        .collect()
}

/// Default number of thresholds in the pixel-level sweep.
pub const PIXEL_THRESHOLDS: usize = 200;

/// Scores a detection directory against ground truth. Warmup and skipped frames
/// and frames without ground truth are left out.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, level: Level, max_thresholds: usize) -> Result<EvalReport> {
    let (header, records) = read_detections(pred_dir)?;
    let gt = read_ground_truth(gt_dir)?;
    let scored: Vec<(&FrameRecord, &DetectionMask)> = records
        .iter()
        .filter(|r| !r.warmup)
        .filter_map(|r| gt.get(r.frame_index).map(|g| (r, g)))
        .collect();
    if scored.len() < records.iter().filter(|r| !r.warmup).count() {
        log::warn!(
            "{} scored frames have no ground truth and are ignored",
            records.iter().filter(|r| !r.warmup).count() - scored.len()
        );
    }
    let positives = scored.iter().filter(|(_, g)| g.any()).count();
    let negatives = scored.len() - positives;
    let curve = match level {
        Level::Frame => {
            let labeled: Vec<LabeledScore> = scored
                .iter()
                .map(|(r, g)| LabeledScore {
                    frame_index: r.frame_index,
                    score: r.score,
                    positive: g.any(),
                })
                .collect();
            roc(&labeled)?
        }
        Level::Pixel => {
            let frames: Vec<PixelFrame> = scored
                .iter()
                .map(|(r, g)| {
                    if (g.height, g.width) != (header.frame_height, header.frame_width) {
                        return Err(Error::Shape(format!(
                            "ground truth {}x{} differs from detection frames {}x{}",
                            g.height, g.width, header.frame_height, header.frame_width
                        )));
                    }
                    Ok(PixelFrame {
                        frame_index: r.frame_index,
                        rows: r.rows,
                        cols: r.cols,
                        cell_scores: r.cell_scores.clone(),
                        ground_truth: (*g).clone(),
                    })
                })
                .collect::<Result<_>>()?;
            pixel_roc(&frames, &header.geometry, header.zeta, max_thresholds)?
        }
    };
    Ok(EvalReport::new(level, positives, negatives, curve))
}
