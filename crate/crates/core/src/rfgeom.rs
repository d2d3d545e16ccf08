//! Receptive-field algebra.
//!
//! For a prefix of `k` layers each axis carries three numbers:
//!
//! * `size`: extent of one cell's field in input pixels,
//!   `size_k = size_{k-1} + (kernel_k - 1) * jump_{k-1}`
//! * `jump`: input distance between adjacent cells, `jump_k = jump_{k-1} * stride_k`
//! * `start`: input coordinate of the first pixel of cell 0's field,
//!   `start_k = start_{k-1} - pad_k * jump_{k-1}`
//!
//! with `size_0 = jump_0 = 1` and `start_0 = 0`. Pooling enters the recurrence
//! like a convolution whose kernel is the pooling window.
//!
//! Fields are clipped to the frame and to the pixels the layers actually read:
//! when `(n + 2 pad - kernel)` is not a multiple of the stride, the trailing rows
//! or columns of a layer's input feed no output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::NetworkSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisGeometry {
    pub size: usize,
    pub jump: usize,
    pub start: i64,
}

impl AxisGeometry {
    pub const IDENTITY: AxisGeometry = AxisGeometry {
        size: 1,
        jump: 1,
        start: 0,
    };

    fn then(self, kernel: usize, stride: usize, pad: usize) -> Self {
        AxisGeometry {
            size: self.size + (kernel - 1) * self.jump,
            jump: self.jump * stride,
            start: self.start - (pad * self.jump) as i64,
        }
    }

    /// Input coordinate of the centre of cell 0's field (may be a half pixel).
    pub fn center(&self) -> f64 {
        self.start as f64 + (self.size as f64 - 1.0) / 2.0
    }

    /// Unclipped inclusive span `[first, last]` of cell `index`.
    pub fn span(&self, index: usize) -> (i64, i64) {
        let first = index as i64 * self.jump as i64 + self.start;
        (first, first + self.size as i64 - 1)
    }
}

/// Kernel, stride and padding of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerWindow {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Receptive-field geometry after the first `layers` layers of a network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfGeometry {
    pub layers: usize,
    pub rows: AxisGeometry,
    pub cols: AxisGeometry,
    pub windows: Vec<LayerWindow>,
}

/// Inclusive pixel rectangle in frame coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl ReceptiveField {
    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..=self.y1).contains(&y) && (self.x0..=self.x1).contains(&x)
    }
}

pub fn geometry_of(net: &NetworkSpec, k: usize) -> Result<RfGeometry> {
    if k > net.layers.len() {
        return Err(Error::Config(format!(
            "layer index {k} beyond {} layers",
            net.layers.len()
        )));
    }
    let (mut rows, mut cols) = (AxisGeometry::IDENTITY, AxisGeometry::IDENTITY);
    let mut windows = Vec::with_capacity(k);
    for layer in &net.layers[..k] {
        let (kernel_h, kernel_w, stride, pad) = layer.window();
        rows = rows.then(kernel_h, stride, pad);
        cols = cols.then(kernel_w, stride, pad);
        windows.push(LayerWindow { kernel_h, kernel_w, stride, pad });
    }
    Ok(RfGeometry { layers: k, rows, cols, windows })
}

/// Geometry after every prefix of the network, paired with the last layer's name.
pub fn geometry_table(net: &NetworkSpec) -> Vec<(String, RfGeometry)> {
    (0..=net.layers.len())
        .map(|k| {
            let name = if k == 0 { "input".to_string() } else { net.layers[k - 1].name.clone() };
            (name, geometry_of(net, k).expect("k within layer count"))
        })
        .collect()
}

fn clip(span: (i64, i64), len: usize) -> Option<(usize, usize)> {
    let lo = span.0.max(0);
    let hi = span.1.min(len as i64 - 1);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

/// Last input coordinate read by any cell along one axis of length `len`.
///
/// Intervals map monotonically through every layer, so clipping each layer's
/// output to its last index composes into one bound: the smallest upper end
/// over the composed fields of those last indices.
fn reach(windows: &[LayerWindow], kernel: impl Fn(&LayerWindow) -> usize, len: usize) -> i64 {
    let mut geo = AxisGeometry::IDENTITY;
    let mut n = len;
    let mut bound = len as i64 - 1;
    for w in windows {
        let k = kernel(w);
        let padded = n + 2 * w.pad;
        if padded < k {
            return -1;
        }
        n = (padded - k) / w.stride + 1;
        geo = geo.then(k, w.stride, w.pad);
        bound = bound.min(geo.span(n - 1).1);
    }
    bound
}

impl RfGeometry {
    /// Clipped field of cell `(row, col)` in a `grid_rows x grid_cols` grid
    /// computed from a `frame_h x frame_w` frame.
    pub fn invert(
        &self,
        row: usize,
        col: usize,
        grid: (usize, usize),
        frame: (usize, usize),
    ) -> Result<ReceptiveField> {
        if row >= grid.0 || col >= grid.1 {
            return Err(Error::OutOfGrid {
                row,
                col,
                rows: grid.0,
                cols: grid.1,
            });
        }
        let last_row = reach(&self.windows, |w| w.kernel_h, frame.0);
        let last_col = reach(&self.windows, |w| w.kernel_w, frame.1);
        let rows = clip(self.rows.span(row), (last_row + 1).max(0) as usize);
        let cols = clip(self.cols.span(col), (last_col + 1).max(0) as usize);
        match (rows, cols) {
            (Some((y0, y1)), Some((x0, x1))) => Ok(ReceptiveField { y0, x0, y1, x1 }),
            _ => Err(Error::Shape(format!(
                "field of cell ({row}, {col}) lies outside the {}x{} frame",
                frame.0, frame.1
            ))),
        }
    }
}

/// Field in frame coordinates of cell `(row, col)` after `k` layers.
pub fn invert_cell(
    net: &NetworkSpec,
    k: usize,
    row: usize,
    col: usize,
    frame: (usize, usize),
) -> Result<ReceptiveField> {
    let geo = geometry_of(net, k)?;
    let in_ch = net.input_channels().unwrap_or(1);
    let (_, rows, cols) = net.output_shape(k, in_ch, frame.0, frame.1)?;
    geo.invert(row, col, (rows, cols), frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, ConvLayerSpec, Layer, ReferenceDepth};

    #[test]
    fn reference_sizes() {
        let net = NetworkSpec::reference(ReferenceDepth::C3, 0);
        let sizes: Vec<_> = geometry_table(&net).iter().map(|(_, g)| g.rows.size).collect();
        assert_eq!(sizes, vec![1, 11, 19, 51, 67, 99]);
        let c2 = geometry_of(&net, net.tap_after("C2").unwrap()).unwrap();
        assert_eq!(c2.cols.size, 51);
        assert_eq!(c2.cols.jump, 8);
        assert_eq!(c2.cols.start, -16);
    }

    #[test]
    fn single_conv() {
        let c = ConvLayerSpec::zeros(1, 1, 3, 3, 1, 0, 1, Activation::None).unwrap();
        let net = NetworkSpec::new(vec![Layer::conv("c", c)]).unwrap();
        let g = geometry_of(&net, 1).unwrap();
        assert_eq!((g.rows.size, g.rows.jump), (3, 1));
        let rf = invert_cell(&net, 1, 2, 5, (10, 10)).unwrap();
        assert_eq!(rf, ReceptiveField { y0: 2, x0: 5, y1: 4, x1: 7 });
        assert!(matches!(invert_cell(&net, 1, 8, 0, (10, 10)), Err(Error::OutOfGrid { .. })));
    }

    #[test]
    fn reference_corner_is_clipped() {
        let net = NetworkSpec::reference(ReferenceDepth::C2, 0);
        let rf = invert_cell(&net, 3, 0, 0, (240, 320)).unwrap();
        assert_eq!((rf.y0, rf.x0), (0, 0));
        // Unclipped span is [-16, 34].
        assert_eq!((rf.y1, rf.x1), (34, 34));
        let rf = invert_cell(&net, 3, 10, 10, (240, 320)).unwrap();
        assert_eq!((rf.y0, rf.y1), (64, 114));
        assert_eq!(rf.width(), 51);
    }

    #[test]
    fn unread_tail_is_excluded() {
        let a = ConvLayerSpec::zeros(1, 1, 5, 5, 5, 0, 1, Activation::None).unwrap();
        let b = ConvLayerSpec::zeros(1, 1, 4, 4, 1, 1, 1, Activation::None).unwrap();
        let net = NetworkSpec::new(vec![Layer::conv("a", a), Layer::conv("b", b)]).unwrap();
        // 17 rows: the first conv reads rows 0..=14 only; its 3 outputs then
        // feed 2 cells whose last one pads past row 2.
        let rf = invert_cell(&net, 2, 1, 0, (17, 17)).unwrap();
        assert_eq!((rf.y0, rf.y1), (0, 14));
    }

    #[test]
    fn monotone_interior_steps() {
        let net = NetworkSpec::reference(ReferenceDepth::C2, 0);
        for i in 2..20 {
            let a = invert_cell(&net, 3, i, 5, (240, 320)).unwrap();
            let b = invert_cell(&net, 3, i + 1, 5, (240, 320)).unwrap();
            assert_eq!(b.y0 - a.y0, 8);
        }
    }
}
