//! Seeded "walking squares" videos with exact ground truth.
//!
//! Normal videos show small bright squares moving right at a fixed speed along
//! horizontal lanes on a dark, slightly noisy background, wrapping around at
//! the right edge. Test
//! videos add one anomalous square for a range of frames: a larger one, a
//! faster one, or one moving the opposite way.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::write_json;
use crate::error::{Error, Result};
use crate::localization::DetectionMask;
use crate::preproc::{write_frame, write_pgm, Frame};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    /// `anomaly_size` square at normal speed.
    Large,
    /// Normal-size square at `fast_factor` times normal speed.
    Fast,
    /// Normal-size square moving left.
    Reverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    pub height: usize,
    pub width: usize,
    pub train_videos: usize,
    pub heldout_videos: usize,
    pub test_videos: usize,
    pub frames_per_video: usize,
    /// Normal squares per video.
    pub objects: usize,
    pub object_size: usize,
    /// Pixels per frame.
    pub speed: usize,
    /// Horizontal lanes the squares travel along, evenly spaced; 0 places
    /// each square on a uniformly random row.
    pub lanes: usize,
    pub anomaly_size: usize,
    pub fast_factor: usize,
    pub anomaly_start: usize,
    pub anomaly_frames: usize,
    /// One entry per test video, cycled. Empty means no anomalies.
    pub anomalies: Vec<AnomalyKind>,
    pub background: u8,
    pub foreground: u8,
    /// Standard deviation of additive pixel noise, in 8-bit levels.
    pub noise_std: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            height: 120,
            width: 160,
            train_videos: 8,
            heldout_videos: 2,
            test_videos: 3,
            frames_per_video: 80,
            objects: 3,
            object_size: 8,
            speed: 2,
            lanes: 6,
            anomaly_size: 20,
            fast_factor: 3,
            anomaly_start: 25,
            anomaly_frames: 30,
            anomalies: vec![AnomalyKind::Large, AnomalyKind::Fast, AnomalyKind::Reverse],
            background: 25,
            foreground: 230,
            noise_std: 3.0,
        }
    }
}

impl FixtureSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(format!("fixture spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("fixture: {m}")));
        if self.lanes > self.height {
            return bad(format!("{} lanes do not fit {} rows", self.lanes, self.height));
        }
        if self.object_size == 0 || self.object_size > self.height.min(self.width) {
            return bad(format!("object size {} does not fit the frame", self.object_size));
        }
        if self.anomaly_size == 0 || self.anomaly_size > self.height.min(self.width) {
            return bad(format!("anomaly size {} does not fit the frame", self.anomaly_size));
        }
        if self.speed == 0 || self.fast_factor == 0 {
            return bad("speeds must be positive".into());
        }
        if !self.anomalies.is_empty() && self.anomaly_start + self.anomaly_frames > self.frames_per_video {
            return bad(format!(
                "anomaly frames {}..{} exceed video length {}",
                self.anomaly_start,
                self.anomaly_start + self.anomaly_frames,
                self.frames_per_video
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        Ok(())
    }
}

/// An injected anomaly: a square of `size` starting at `(y, x)` moving `vx` pixels per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectedAnomaly {
    pub kind: AnomalyKind,
    pub size: usize,
    pub y: usize,
    pub x: i64,
    pub vx: i64,
    pub first_frame: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub name: String,
    pub frames: Vec<Frame>,
    /// One mask per frame; all empty for normal videos.
    pub ground_truth: Vec<DetectionMask>,
    pub anomaly: Option<InjectedAnomaly>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub seed: u64,
    pub spec: FixtureSpec,
    pub train: Vec<Video>,
    pub heldout: Vec<Video>,
    pub test: Vec<Video>,
}

#[derive(Serialize)]
struct FixtureManifest<'a> {
    seed: u64,
    spec: &'a FixtureSpec,
    test: Vec<TestEntry<'a>>,
}

#[derive(Serialize)]
struct TestEntry<'a> {
    name: &'a str,
    anomaly: &'a Option<InjectedAnomaly>,
}

/// Left edge after wrapping a square of `size` around a `width`-pixel frame,
/// so that it re-enters from the opposite side.
fn wrap(x: i64, size: usize, width: usize) -> i64 {
    (x + size as i64).rem_euclid((width + size) as i64) - size as i64
}

struct Square {
    y: usize,
    x: i64,
    vx: i64,
    size: usize,
}

impl Square {
    fn left(&self, t: i64, width: usize) -> i64 {
        wrap(self.x + self.vx * t, self.size, width)
    }

    fn paint(&self, t: i64, width: usize, mut f: impl FnMut(usize, usize)) {
        let x0 = self.left(t, width);
        for y in self.y..self.y + self.size {
            for x in x0.max(0)..(x0 + self.size as i64).min(width as i64) {
                f(y, x as usize);
            }
        }
    }
}

/// Top row of a square of `size` on a random lane, or on a random row without lanes.
fn pick_row(spec: &FixtureSpec, size: usize, rng: &mut ChaCha8Rng) -> usize {
    let free = spec.height - size;
    if spec.lanes == 0 {
        return rng.random_range(0..=free);
    }
    // Lane centres for normal squares, evenly spread over the frame.
    let span = spec.height - spec.object_size;
    let lane = rng.random_range(0..spec.lanes);
    let centre = (2 * lane + 1) * span / (2 * spec.lanes) + spec.object_size / 2;
    centre.saturating_sub(size / 2).min(free)
}

fn render_video(
    name: String,
    spec: &FixtureSpec,
    rng: &mut ChaCha8Rng,
    kind: Option<AnomalyKind>,
) -> Result<Video> {
    let (h, w) = (spec.height, spec.width);
    let normals: Vec<Square> = (0..spec.objects)
        .map(|_| Square {
            y: pick_row(spec, spec.object_size, rng),
            x: rng.random_range(0..(w + spec.object_size) as i64) - spec.object_size as i64,
            vx: spec.speed as i64,
            size: spec.object_size,
        })
        .collect();
    let anomaly = kind.map(|kind| {
        let (size, vx) = match kind {
            AnomalyKind::Large => (spec.anomaly_size, spec.speed as i64),
            AnomalyKind::Fast => (spec.object_size, (spec.speed * spec.fast_factor) as i64),
            AnomalyKind::Reverse => (spec.object_size, -(spec.speed as i64)),
        };
        let path = vx.unsigned_abs() as usize * spec.anomaly_frames.saturating_sub(1);
        // Keep the whole path inside the frame when it fits, so the
        // ground-truth area stays size * size.
        let x = if path + size <= w {
            let slack = (w - size - path) as i64;
            let start = rng.random_range(0..=slack);
            if vx < 0 { start + path as i64 } else { start }
        } else {
            rng.random_range(0..=(w - size) as i64)
        };
        InjectedAnomaly {
            kind,
            size,
            y: pick_row(spec, size, rng),
            x,
            vx,
            first_frame: spec.anomaly_start,
            frames: spec.anomaly_frames,
        }
    });
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite noise");
    let mut frames = Vec::with_capacity(spec.frames_per_video);
    let mut ground_truth = Vec::with_capacity(spec.frames_per_video);
    for t in 0..spec.frames_per_video {
        let mut level = vec![spec.background; h * w];
        for sq in &normals {
            sq.paint(t as i64, w, |y, x| level[y * w + x] = spec.foreground);
        }
        let mut gt = DetectionMask::empty(h, w, t);
        if let Some(a) = &anomaly {
            if (a.first_frame..a.first_frame + a.frames).contains(&t) {
                let sq = Square { y: a.y, x: a.x, vx: a.vx, size: a.size };
                sq.paint((t - a.first_frame) as i64, w, |y, x| {
                    level[y * w + x] = spec.foreground;
                    gt.pixels[y * w + x] = true;
                });
            }
        }
        let bytes: Vec<u8> = level
            .iter()
            .map(|&v| {
                let n = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                (v as f64 + n).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        frames.push(Frame::from_u8(h, w, &bytes)?);
        ground_truth.push(gt);
    }
    Ok(Video {
        name,
        frames,
        ground_truth,
        anomaly,
    })
}

/// Streams of the generator: each video draws from its own ChaCha stream so
/// changing one split's size leaves the others untouched.
const TRAIN_STREAM: u64 = 0;
const HELDOUT_STREAM: u64 = 1 << 20;
const TEST_STREAM: u64 = 2 << 20;

pub fn make_fixture(seed: u64, spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let split = |count: usize, stream: u64, prefix: &str, test: bool| -> Result<Vec<Video>> {
        (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream + i as u64);
                let kind = if test && !spec.anomalies.is_empty() {
                    Some(spec.anomalies[i % spec.anomalies.len()])
                } else {
                    None
                };
                render_video(format!("{prefix}_{i:02}"), spec, &mut rng, kind)
            })
            .collect()
    };
    Ok(Fixture {
        seed,
        spec: spec.clone(),
        train: split(spec.train_videos, TRAIN_STREAM, "video", false)?,
        heldout: split(spec.heldout_videos, HELDOUT_STREAM, "video", false)?,
        test: split(spec.test_videos, TEST_STREAM, "video", true)?,
    })
}

impl Fixture {
    /// Writes `train/`, `heldout/` and `test/` video directories, `test/<name>_gt/`
    /// ground-truth masks (255 = anomalous) and `fixture.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (split, videos) in [("train", &self.train), ("heldout", &self.heldout), ("test", &self.test)] {
            for v in videos {
                let vdir = dir.join(split).join(&v.name);
                fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
                for (t, f) in v.frames.iter().enumerate() {
                    write_frame(&vdir.join(format!("frame_{t:05}.pgm")), f)?;
                }
                if split == "test" {
                    let gdir = dir.join(split).join(format!("{}_gt", v.name));
                    fs::create_dir_all(&gdir).map_err(|e| Error::io(&gdir, e))?;
                    for (t, m) in v.ground_truth.iter().enumerate() {
                        write_pgm(&gdir.join(format!("frame_{t:05}.pgm")), m.height, m.width, &m.to_gray())?;
                    }
                }
            }
        }
        let manifest = FixtureManifest {
            seed: self.seed,
            spec: &self.spec,
            test: self
                .test
                .iter()
                .map(|v| TestEntry {
                    name: &v.name,
                    anomaly: &v.anomaly,
                })
                .collect(),
        };
        write_json(&dir.join("fixture.json"), &manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FixtureSpec {
        FixtureSpec {
            train_videos: 1,
            heldout_videos: 1,
            test_videos: 3,
            frames_per_video: 40,
            anomaly_start: 10,
            anomaly_frames: 20,
            ..FixtureSpec::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = make_fixture(3, &small()).unwrap();
        assert_eq!(a, make_fixture(3, &small()).unwrap());
        assert_ne!(a.train[0].frames, make_fixture(4, &small()).unwrap().train[0].frames);
    }

    #[test]
    fn anomaly_free_spec_has_empty_ground_truth() {
        let spec = FixtureSpec { anomalies: vec![], ..small() };
        let f = make_fixture(1, &spec).unwrap();
        for v in f.train.iter().chain(&f.heldout).chain(&f.test) {
            assert!(v.anomaly.is_none());
            assert!(v.ground_truth.iter().all(|m| !m.any()));
        }
    }

    #[test]
    fn large_anomaly_covers_its_full_area() {
        let f = make_fixture(9, &small()).unwrap();
        let v = &f.test[0];
        assert_eq!(v.anomaly.as_ref().unwrap().kind, AnomalyKind::Large);
        for (t, m) in v.ground_truth.iter().enumerate() {
            let expected = if (10..30).contains(&t) { 400 } else { 0 };
            assert_eq!(m.count(), expected, "frame {t}");
        }
    }

    #[test]
    fn anomalies_move_as_specified() {
        let f = make_fixture(2, &small()).unwrap();
        let first_col = |m: &DetectionMask| (0..m.width).find(|&x| (0..m.height).any(|y| m.get(y, x))).unwrap();
        let kinds: Vec<(AnomalyKind, i64)> = f
            .test
            .iter()
            .map(|v| {
                let a = v.anomaly.as_ref().unwrap();
                let step = first_col(&v.ground_truth[11]) as i64 - first_col(&v.ground_truth[10]) as i64;
                (a.kind, step)
            })
            .collect();
        assert_eq!(kinds[0], (AnomalyKind::Large, 2));
        assert_eq!(kinds[2], (AnomalyKind::Reverse, -2));
        assert_eq!(kinds[1].0, AnomalyKind::Fast);
    }

    #[test]
    fn anomaly_pixels_are_bright() {
        let spec = FixtureSpec { noise_std: 0.0, ..small() };
        let f = make_fixture(5, &spec).unwrap();
        let v = &f.test[0];
        let m = &v.ground_truth[15];
        let frame = &v.frames[15];
        for y in 0..m.height {
            for x in 0..m.width {
                if m.get(y, x) {
                    assert_eq!(frame.get(y, x), spec.foreground as f32 / 255.0);
                }
            }
        }
    }

    #[test]
    fn squares_stay_on_lanes() {
        let spec = FixtureSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut rows: Vec<usize> = (0..500).map(|_| pick_row(&spec, spec.object_size, &mut rng)).collect();
        rows.sort_unstable();
        rows.dedup();
        assert_eq!(rows.len(), spec.lanes);
        assert!(rows.iter().all(|&y| y + spec.object_size <= spec.height));
        // A large square is centred on a lane.
        let y = pick_row(&spec, spec.anomaly_size, &mut rng);
        let centre = y + spec.anomaly_size / 2;
        assert!(rows.iter().any(|&r| r + spec.object_size / 2 == centre));
    }

    #[test]
    fn wrap_reenters_from_the_other_side() {
        assert_eq!(wrap(0, 8, 160), 0);
        assert_eq!(wrap(160, 8, 160), -8);
        assert_eq!(wrap(-9, 8, 160), 159);
    }

    #[test]
    fn write_lays_out_splits() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec { frames_per_video: 12, anomaly_start: 6, anomaly_frames: 3, train_videos: 1, heldout_videos: 0, test_videos: 1, ..FixtureSpec::default() };
        make_fixture(0, &spec).unwrap().write(dir.path()).unwrap();
        assert_eq!(crate::preproc::list_frames(&dir.path().join("train/video_00")).unwrap().len(), 12);
        assert_eq!(crate::preproc::list_frames(&dir.path().join("test/video_00_gt")).unwrap().len(), 12);
        assert!(dir.path().join("fixture.json").exists());
    }
}
