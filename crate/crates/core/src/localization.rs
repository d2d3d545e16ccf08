//! Pixel masks from abnormal cells.
//!
//! Every abnormal cell adds one vote to each pixel of its (clipped) receptive
//! field; a pixel is flagged when it collects more than `zeta` votes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rfgeom::RfGeometry;

pub const DEFAULT_ZETA: u32 = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoteMap {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

impl VoteMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            counts: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.counts[y * self.width + x]
    }

    pub fn max(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Counts scaled so the maximum maps to 255 (all zero when there are no votes).
    pub fn heat_map(&self) -> Vec<u8> {
        let max = self.max();
        if max == 0 {
            return vec![0; self.counts.len()];
        }
        self.counts
            .iter()
            .map(|&c| ((c as u64 * 255 + max as u64 / 2) / max as u64) as u8)
            .collect()
    }
}

/// Adds one vote per cell over its receptive field.
///
/// Uses a 2-D difference array, so cost is `O(cells + pixels)`.
pub fn accumulate(
    cells: &[(usize, usize)],
    geometry: &RfGeometry,
    grid: (usize, usize),
    frame: (usize, usize),
) -> Result<VoteMap> {
    let (h, w) = frame;
    let mut diff = vec![0i64; (h + 1) * (w + 1)];
    for &(row, col) in cells {
        let rf = geometry.invert(row, col, grid, frame)?;
        diff[rf.y0 * (w + 1) + rf.x0] += 1;
        diff[rf.y0 * (w + 1) + rf.x1 + 1] -= 1;
        diff[(rf.y1 + 1) * (w + 1) + rf.x0] -= 1;
        diff[(rf.y1 + 1) * (w + 1) + rf.x1 + 1] += 1;
    }
    let mut votes = VoteMap::zeros(h, w);
    let mut above = vec![0i64; w];
    for y in 0..h {
        let mut run = 0i64;
        for x in 0..w {
            run += diff[y * (w + 1) + x];
            above[x] += run;
            votes.counts[y * w + x] = above[x] as u32;
        }
    }
    Ok(votes)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DetectionMask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<bool>,
    pub frame_index: usize,
}

impl DetectionMask {
    pub fn empty(height: usize, width: usize, frame_index: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![false; height * width],
            frame_index,
        }
    }

    /// Mask from 8-bit ground truth: bytes above 127 are anomalous.
    pub fn from_gray(height: usize, width: usize, bytes: &[u8], frame_index: usize) -> Result<Self> {
        if bytes.len() != height * width {
            return Err(Error::Dimension {
                expected: height * width,
                got: bytes.len(),
            });
        }
        Ok(Self {
            height,
            width,
            pixels: bytes.iter().map(|&b| b > 127).collect(),
            frame_index,
        })
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn any(&self) -> bool {
        self.pixels.iter().any(|&p| p)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x]
    }

    /// 0/255 bytes for PGM output.
    pub fn to_gray(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| if p { 255 } else { 0 }).collect()
    }

    pub fn to_rle(&self) -> RleMask {
        let mut runs = Vec::new();
        let mut k = 0;
        while k < self.pixels.len() {
            if self.pixels[k] {
                let start = k;
                while k < self.pixels.len() && self.pixels[k] {
                    k += 1;
                }
                runs.push([start, k - start]);
            } else {
                k += 1;
            }
        }
        RleMask {
            frame_index: self.frame_index,
            height: self.height,
            width: self.width,
            runs,
        }
    }
}

/// Row-major run-length encoding of the set pixels: `[start, length]` pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub frame_index: usize,
    pub height: usize,
    pub width: usize,
    pub runs: Vec<[usize; 2]>,
}

impl RleMask {
    pub fn to_mask(&self) -> Result<DetectionMask> {
        let mut m = DetectionMask::empty(self.height, self.width, self.frame_index);
        for &[start, len] in &self.runs {
            if start + len > m.pixels.len() {
                return Err(Error::Shape(format!("run {start}+{len} outside mask")));
            }
            m.pixels[start..start + len].iter_mut().for_each(|p| *p = true);
        }
        Ok(m)
    }
}

/// `votes > zeta`, pixelwise.
pub fn threshold_votes(votes: &VoteMap, zeta: u32, frame_index: usize) -> DetectionMask {
    DetectionMask {
        height: votes.height,
        width: votes.width,
        pixels: votes.counts.iter().map(|&c| c > zeta).collect(),
        frame_index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{NetworkSpec, ReferenceDepth};
    use crate::rfgeom::geometry_of;
    use proptest::prelude::*;

    fn c2() -> (RfGeometry, (usize, usize), (usize, usize)) {
        let net = NetworkSpec::reference(ReferenceDepth::C2, 0);
        let frame = (120, 160);
        let (_, r, c) = net.output_shape(3, 3, frame.0, frame.1).unwrap();
        (geometry_of(&net, 3).unwrap(), (r, c), frame)
    }

    fn naive(cells: &[(usize, usize)], g: &RfGeometry, grid: (usize, usize), frame: (usize, usize)) -> VoteMap {
        let mut v = VoteMap::zeros(frame.0, frame.1);
        for &(r, c) in cells {
            let rf = g.invert(r, c, grid, frame).unwrap();
            for y in rf.y0..=rf.y1 {
                for x in rf.x0..=rf.x1 {
                    v.counts[y * frame.1 + x] += 1;
                }
            }
        }
        v
    }

    #[test]
    fn empty_and_single() {
        let (g, grid, frame) = c2();
        let v = accumulate(&[], &g, grid, frame).unwrap();
        assert_eq!(v.total(), 0);
        assert!(!threshold_votes(&v, 0, 0).any());

        let v = accumulate(&[(4, 6)], &g, grid, frame).unwrap();
        let rf = g.invert(4, 6, grid, frame).unwrap();
        for y in 0..frame.0 {
            for x in 0..frame.1 {
                assert_eq!(v.get(y, x), u32::from(rf.contains(y, x)));
            }
        }
        assert_eq!(v.total(), rf.area() as u64);
    }

    #[test]
    fn adjacent_cells_overlap_band() {
        let (g, grid, frame) = c2();
        let v = accumulate(&[(5, 5), (5, 6)], &g, grid, frame).unwrap();
        let row = 5 * 8 - 16 + 20;
        let twos: Vec<usize> = (0..frame.1).filter(|&x| v.get(row, x) == 2).collect();
        // Fields are 51 wide and 8 apart.
        assert_eq!(twos.len(), 51 - 8);
        assert_eq!(twos[0], 6 * 8 - 16);
    }

    #[test]
    fn strict_threshold() {
        let v = VoteMap {
            height: 1,
            width: 3,
            counts: vec![3, 4, 0],
        };
        assert_eq!(threshold_votes(&v, 3, 0).pixels, vec![false, true, false]);
        assert_eq!(threshold_votes(&v, 0, 0).pixels, vec![true, true, false]);
    }

    #[test]
    fn out_of_grid_cell() {
        let (g, grid, frame) = c2();
        assert!(matches!(accumulate(&[(grid.0, 0)], &g, grid, frame), Err(Error::OutOfGrid { .. })));
    }

    #[test]
    fn rle_round_trip() {
        let m = DetectionMask { height: 2, width: 3, pixels: vec![true, true, false, false, true, true], frame_index: 7 };
        let rle = m.to_rle();
        assert_eq!(rle.runs, vec![[0, 2], [4, 2]]);
        assert_eq!(rle.to_mask().unwrap(), m);
    }

    #[test]
    fn heat_map_scaling() {
        let v = VoteMap { height: 1, width: 3, counts: vec![0, 2, 4] };
        assert_eq!(v.heat_map(), vec![0, 128, 255]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn matches_naive_and_is_order_free(cells in proptest::collection::vec((0usize..13, 0usize..18), 0..30), zeta in 0u32..6) {
            let (g, grid, frame) = c2();
            let v = accumulate(&cells, &g, grid, frame).unwrap();
            prop_assert_eq!(&v, &naive(&cells, &g, grid, frame));
            let mut rev = cells.clone();
            rev.reverse();
            prop_assert_eq!(&v, &accumulate(&rev, &g, grid, frame).unwrap());
            prop_assert!(v.max() as usize <= cells.len());
            let a = threshold_votes(&v, zeta, 0);
            let b = threshold_votes(&v, zeta + 1, 0);
            for (p, q) in a.pixels.iter().zip(&b.pixels) {
                prop_assert!(*p || !*q);
            }
        }
    }
}
