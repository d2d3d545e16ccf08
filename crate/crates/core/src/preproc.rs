//! Frame ingestion and the temporal input stack.
//!
//! Each network input is built from six consecutive grayscale frames: the
//! frames are averaged in adjacent pairs and the three averages at `t-4`,
//! `t-2` and `t` become the three input channels.

use std::collections::VecDeque;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageBuffer, ImageEncoder, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Number of raw frames needed to form one temporal input.
pub const HISTORY: usize = 6;

/// Single-channel luminance frame with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "frame {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::shape(format!("frame value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width {
            return Err(Error::shape(format!(
                "frame {height}x{width} needs {} bytes, got {}",
                height * width,
                bytes.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    /// Converts interleaved RGB bytes using Rec. 601 luma weights.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::shape(format!(
                "rgb frame {height}x{width} needs {} bytes, got {}",
                3 * height * width,
                rgb.len()
            )));
        }
        let data = rgb
            .chunks_exact(3)
            .map(|p| {
                let y = 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32;
                (y / 255.0).clamp(0.0, 1.0)
            })
            .collect();
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Quantizes to 8 bits (round to nearest).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Bilinear resize to `height x width`.
    pub fn resized(&self, height: usize, width: usize) -> Frame {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("frame buffer matches its dimensions");
        let out = image::imageops::resize(
            &buf,
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        Frame {
            height,
            width,
            data: out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }
}

/// Pixelwise mean of two frames.
pub fn temporal_average(a: &Frame, b: &Frame) -> Result<Frame> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "cannot average {}x{} with {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x + y) * 0.5)
        .collect();
    Ok(Frame {
        height: a.height,
        width: a.width,
        data,
    })
}

/// Three-channel network input for frame `frame_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalInput {
    pub tensor: Tensor3,
    pub frame_index: usize,
}

/// Builds the input for the last frame of `frames` from its six most recent entries.
///
/// Channel 0 averages `t-5, t-4`, channel 1 averages `t-3, t-2` and channel 2
/// averages `t-1, t`.
pub fn build_input(frames: &[Frame], frame_index: usize) -> Result<TemporalInput> {
    if frames.len() < HISTORY {
        return Err(Error::InsufficientHistory {
            needed: HISTORY,
            have: frames.len(),
        });
    }
    let window = &frames[frames.len() - HISTORY..];
    let (h, w) = window[0].dims();
    let mut data = Vec::with_capacity(3 * h * w);
    for pair in window.chunks_exact(2) {
        data.extend(temporal_average(&pair[0], &pair[1])?.data);
    }
    Ok(TemporalInput {
        tensor: Tensor3::from_vec(3, h, w, data)?,
        frame_index,
    })
}

/// Input normalization applied between decoding and the network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocOptions {
    /// Resize every frame to `[width, height]` before stacking.
    pub resize: Option<[usize; 2]>,
    /// Per-channel mean subtracted from the stacked input (for imported weights).
    pub channel_mean: Option<[f32; 3]>,
}

impl PreprocOptions {
    pub fn prepare_frame(&self, frame: Frame) -> Frame {
        match self.resize {
            Some([w, h]) => frame.resized(h, w),
            None => frame,
        }
    }

    pub fn finish_input(&self, input: &mut TemporalInput) {
        if let Some(mean) = self.channel_mean {
            for (c, m) in mean.iter().enumerate() {
                input.tensor.channel_mut(c).iter_mut().for_each(|v| *v -= m);
            }
        }
    }
}

/// Sliding window over the last six frames of one stream.
#[derive(Debug, Default)]
pub struct TemporalBuffer {
    frames: VecDeque<Frame>,
}

impl TemporalBuffer {
    pub fn new() -> Self {
        Self {
            frames: VecDeque::with_capacity(HISTORY),
        }
    }

    pub fn push(&mut self, frame: Frame) -> Result<()> {
        if let Some(last) = self.frames.back() {
            if last.dims() != frame.dims() {
                return Err(Error::shape(format!(
                    "frame {}x{} does not match stream size {}x{}",
                    frame.height,
                    frame.width,
                    last.height,
                    last.width
                )));
            }
        }
        if self.frames.len() == HISTORY {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_ready(&self) -> bool {
        self.frames.len() == HISTORY
    }

    pub fn input(&mut self, frame_index: usize) -> Result<TemporalInput> {
        build_input(self.frames.make_contiguous(), frame_index)
    }
}

/// Decodes an 8-bit PGM (or PPM, converted with Rec. 601 weights).
pub fn decode_frame(bytes: &[u8], name: &Path) -> Result<Frame> {
    let decode_err = |reason: String| Error::Decode {
        path: name.to_path_buf(),
        reason,
    };
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Pnm)
        .map_err(|e| decode_err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => Frame::from_u8(h, w, buf.as_raw()),
        DynamicImage::ImageRgb8(buf) => Frame::from_rgb8(h, w, buf.as_raw()),
        other => Err(decode_err(format!(
            "unsupported pixel format {:?}; expected 8-bit grayscale",
            other.color()
        ))),
    }
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frame(&bytes, path)
}

/// Encodes 8-bit pixels as binary PGM (P5).
pub fn encode_pgm(height: usize, width: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(pixels.len() + 32);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::shape(format!("pgm encode: {e}")))?;
    Ok(out)
}

pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    let bytes = encode_pgm(height, width, pixels)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    write_pgm(path, frame.height, frame.width, &frame.to_u8())
}

/// Lexicographically ordered PGM/PPM files in `dir`.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "pnm" | "ppm"))
            .unwrap_or(false);
        if is_image && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn read_frames_dir(dir: &Path) -> Result<Vec<Frame>> {
    list_frames(dir)?.iter().map(|p| read_frame(p)).collect()
}

/// Streams fixed-size frames out of a file of concatenated `height * width` bytes.
pub struct RawFrameReader<R> {
    reader: R,
    height: usize,
    width: usize,
    buf: Vec<u8>,
    name: PathBuf,
}

impl<R: Read> RawFrameReader<R> {
    pub fn new(reader: R, height: usize, width: usize, name: impl Into<PathBuf>) -> Self {
        Self {
            reader,
            height,
            width,
            buf: vec![0; height * width],
            name: name.into(),
        }
    }
}

impl<R: Read> Iterator for RawFrameReader<R> {
    type Item = Result<Frame>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut filled = 0;
        while filled < self.buf.len() {
            match self.reader.read(&mut self.buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => return Some(Err(Error::io(&self.name, e))),
            }
        }
        match filled {
            0 => None,
            n if n < self.buf.len() => Some(Err(Error::Decode {
                path: self.name.clone(),
                reason: format!("trailing partial frame of {n} bytes"),
            })),
            _ => Some(Frame::from_u8(self.height, self.width, &self.buf)),
        }
    }
}

/// Parses a `WxH` size string.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("expected WxH, got `{s}`")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("invalid size component `{v}` in `{s}`")))
    };
    Ok((parse(w)?, parse(h)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant(v: f32) -> Frame {
        Frame::filled(4, 5, v)
    }

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Frame {
        Frame::new(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn average_examples() {
        assert_eq!(temporal_average(&constant(0.4), &constant(0.6)).unwrap().get(0, 0), 0.5);
        assert_eq!(temporal_average(&constant(1.0), &constant(0.0)).unwrap().get(3, 4), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_frame(&mut rng, 7, 9);
        assert_eq!(temporal_average(&f, &f).unwrap(), f);
    }

    #[test]
    fn average_shape_mismatch() {
        let err = temporal_average(&Frame::filled(2, 3, 0.0), &Frame::filled(3, 2, 0.0)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn build_input_examples() {
        let same: Vec<_> = (0..6).map(|_| constant(0.3)).collect();
        let inp = build_input(&same, 5).unwrap();
        assert_eq!(inp.tensor.shape(), (3, 4, 5));
        assert!(inp.tensor.data().iter().all(|&v| v == 0.3));

        let steps: Vec<_> = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0].iter().map(|&v| constant(v)).collect();
        let inp = build_input(&steps, 5).unwrap();
        assert_eq!(inp.tensor.get(0, 1, 1), 0.0);
        assert_eq!(inp.tensor.get(1, 1, 1), 0.0);
        assert_eq!(inp.tensor.get(2, 1, 1), 0.5);
    }

    #[test]
    fn build_input_needs_six_frames() {
        let frames: Vec<_> = (0..5).map(|_| constant(0.1)).collect();
        assert!(matches!(
            build_input(&frames, 4),
            Err(Error::InsufficientHistory { needed: 6, have: 5 })
        ));
    }

    #[test]
    fn build_input_matches_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frames: Vec<_> = (0..6).map(|_| random_frame(&mut rng, 6, 8)).collect();
        let inp = build_input(&frames, 5).unwrap();
        // I'_s(p) = (I_s(p) + I_{s-1}(p)) / 2 evaluated at s = t-4, t-2, t with t = 5.
        for (c, s) in [1usize, 3, 5].into_iter().enumerate() {
            for y in 0..6 {
                for x in 0..8 {
                    let expect = (frames[s].get(y, x) + frames[s - 1].get(y, x)) / 2.0;
                    assert_eq!(inp.tensor.get(c, y, x), expect);
                }
            }
        }
    }

    #[test]
    fn sliding_window_shares_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<_> = (0..8).map(|_| random_frame(&mut rng, 3, 3)).collect();
        let a = build_input(&frames[..6], 5).unwrap();
        let b = build_input(&frames[..8], 7).unwrap();
        // D_7 channel k pairs are D_5 channel k+1 pairs.
        assert_eq!(a.tensor.channel(1), b.tensor.channel(0));
        assert_eq!(a.tensor.channel(2), b.tensor.channel(1));

        let mut buf = TemporalBuffer::new();
        for f in &frames {
            buf.push(f.clone()).unwrap();
        }
        assert_eq!(buf.len(), HISTORY);
        assert_eq!(buf.input(7).unwrap(), b);
    }

    #[test]
    fn decode_scaling() {
        let pgm = encode_pgm(1, 3, &[255, 0, 128]).unwrap();
        let f = decode_frame(&pgm, Path::new("x.pgm")).unwrap();
        assert_eq!(f.data(), &[1.0, 0.0, 128.0 / 255.0]);
    }

    #[test]
    fn decode_reports_filename() {
        let err = decode_frame(b"P5\n3 3\n255\n\x00", Path::new("broken.pgm")).unwrap_err();
        assert!(err.to_string().contains("broken.pgm"), "{err}");
    }

    #[test]
    fn raw_reader_frames() {
        let bytes: Vec<u8> = (0..24).collect();
        let frames: Vec<_> = RawFrameReader::new(&bytes[..], 2, 3, "raw")
            .collect::<Result<Vec<_>>>()
            .unwrap();
        assert_eq!(frames.len(), 4);
        assert_eq!(frames[1].get(0, 0), 6.0 / 255.0);
        let mut partial = RawFrameReader::new(&bytes[..8], 2, 3, "raw");
        assert!(partial.next().unwrap().is_ok());
        assert!(partial.next().unwrap().is_err());
    }

    #[test]
    fn rgb_uses_rec601() {
        let f = Frame::from_rgb8(1, 1, &[255, 0, 0]).unwrap();
        assert!((f.get(0, 0) - 0.299).abs() < 1e-6);
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("320x240").unwrap(), (320, 240));
        assert!(parse_size("320").is_err());
        assert!(parse_size("0x3").is_err());
    }

    proptest! {
        #[test]
        fn average_within_bounds(a in proptest::collection::vec(0.0f32..=1.0, 12), b in proptest::collection::vec(0.0f32..=1.0, 12)) {
            let fa = Frame::new(3, 4, a.clone()).unwrap();
            let fb = Frame::new(3, 4, b.clone()).unwrap();
            let avg = temporal_average(&fa, &fb).unwrap();
            for ((&x, &y), &m) in a.iter().zip(&b).zip(avg.data()) {
                prop_assert!(x.min(y) <= m && m <= x.max(y));
            }
        }

        #[test]
        fn pgm_round_trip_within_quantization(v in proptest::collection::vec(0.0f32..=1.0, 20)) {
            let f = Frame::new(4, 5, v).unwrap();
            let back = decode_frame(&encode_pgm(4, 5, &f.to_u8()).unwrap(), Path::new("t.pgm")).unwrap();
            for (a, b) in f.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }
}
