use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layer::{Activation, ConvLayerSpec, Layer, LayerKind, PoolLayerSpec, PoolMode};
use super::ops::{conv_forward, pool_forward};
use crate::error::{Error, Result};
use crate::preproc::TemporalInput;
use crate::tensor::Tensor3;

/// An ordered stack of conv/pool layers evaluated up to a tap point.
///
/// `tap` counts layers: `tap = 0` is the raw input and `tap = layers.len()`
/// runs the whole stack.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<Layer>,
    pub tap: usize,
}

/// Regional feature vectors of one frame: one `dim`-vector per grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub values: Tensor3,
    pub tap: usize,
    pub frame_index: usize,
}

impl FeatureGrid {
    pub fn rows(&self) -> usize {
        self.values.height()
    }

    pub fn cols(&self) -> usize {
        self.values.width()
    }

    /// Length of each regional feature vector.
    pub fn dim(&self) -> usize {
        self.values.channels()
    }

    pub fn cells(&self) -> usize {
        self.rows() * self.cols()
    }
}

/// Depth of the reference architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceDepth {
    /// C1, S1, C2
    C2,
    /// C1, S1, C2, S2, C3
    C3,
}

impl NetworkSpec {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let tap = layers.len();
        let net = Self { layers, tap };
        net.validate()?;
        Ok(net)
    }

    /// The Caffe-reference (AlexNet) shapes with mean pooling and seeded
    /// He-normal weights.
    pub fn reference(depth: ReferenceDepth, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = |cin, cout, k, stride, pad, groups| {
            let mut c = ConvLayerSpec::zeros(cin, cout, k, k, stride, pad, groups, Activation::Relu)
                .expect("reference layer shapes are valid");
            let std = (2.0 / c.fan_in() as f32).sqrt();
            let normal = Normal::new(0.0f32, std).expect("finite std");
            c.weights.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
            c
        };
        let pool = || PoolLayerSpec::new(3, 3, 2, PoolMode::Mean).expect("valid pool");
        let mut layers = vec![
            Layer::conv("C1", conv(3, 96, 11, 4, 0, 1)),
            Layer::pool("S1", pool()),
            Layer::conv("C2", conv(96, 256, 5, 1, 2, 2)),
        ];
        if depth == ReferenceDepth::C3 {
            layers.push(Layer::pool("S2", pool()));
            layers.push(Layer::conv("C3", conv(256, 384, 3, 1, 1, 1)));
        }
        Self::new(layers).expect("reference network is consistent")
    }

    pub fn validate(&self) -> Result<()> {
        if self.tap > self.layers.len() {
            return Err(Error::Config(format!(
                "tap {} beyond {} layers",
                self.tap,
                self.layers.len()
            )));
        }
        let mut channels: Option<usize> = None;
        for layer in &self.layers {
            match &layer.kind {
                LayerKind::Conv(c) => {
                    c.validate().map_err(|e| e.in_layer(&layer.name))?;
                    if let Some(ch) = channels {
                        if ch != c.in_channels {
                            return Err(Error::Config(format!(
                                "layer `{}` expects {} channels but receives {ch}",
                                layer.name, c.in_channels
                            )));
                        }
                    }
                    channels = Some(c.out_channels);
                }
                LayerKind::Pool(p) => p.validate().map_err(|e| e.in_layer(&layer.name))?,
                LayerKind::Noop => {}
            }
        }
        Ok(())
    }

    /// Input channel count expected by the first conv layer, if any.
    pub fn input_channels(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match &l.kind {
            LayerKind::Conv(c) => Some(c.in_channels),
            _ => None,
        })
    }

    /// Tap index just after the layer called `name`.
    pub fn tap_after(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .map(|i| i + 1)
            .ok_or_else(|| Error::Config(format!("no layer named `{name}`")))
    }

    pub fn with_tap(mut self, tap: usize) -> Result<Self> {
        self.tap = tap;
        self.validate()?;
        Ok(self)
    }

    /// Drops the layers past the tap point.
    pub fn truncated(&self) -> Self {
        Self {
            layers: self.layers[..self.tap].to_vec(),
            tap: self.tap,
        }
    }

    /// `(channels, rows, cols)` after the first `k` layers for an input of the given size.
    pub fn output_shape(&self, k: usize, channels: usize, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let mut shape = (channels, height, width);
        for layer in &self.layers[..k.min(self.layers.len())] {
            let (h, w) = layer
                .output_dims(shape.1, shape.2)
                .map_err(|e| e.in_layer(&layer.name))?;
            shape = (layer.output_channels(shape.0), h, w);
        }
        Ok(shape)
    }

    /// Runs the first `k` layers on `input`.
    pub fn forward_layers(&self, input: &Tensor3, k: usize) -> Result<Tensor3> {
        if k > self.layers.len() {
            return Err(Error::Config(format!("cannot run {k} of {} layers", self.layers.len())));
        }
        let mut x = input.clone();
        for layer in &self.layers[..k] {
            x = match &layer.kind {
                LayerKind::Conv(c) => conv_forward(&x, c),
                LayerKind::Pool(p) => pool_forward(&x, p),
                LayerKind::Noop => Ok(x),
            }
            .map_err(|e| e.in_layer(&layer.name))?;
        }
        Ok(x)
    }

    pub fn forward_to_tap(&self, input: &TemporalInput) -> Result<FeatureGrid> {
        Ok(FeatureGrid {
            values: self.forward_layers(&input.tensor, self.tap)?,
            tap: self.tap,
            frame_index: input.frame_index,
        })
    }
}
