use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::None),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Activation::None => v,
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        }
    }
}

/// `floor((input + 2 * padding - kernel) / stride) + 1`, or `None` when the
/// padded input is smaller than the kernel.
pub fn output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Grouped 2-D convolution with optional activation.
///
/// Weights are laid out `[out][in / groups][kernel_h][kernel_w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub activation: Activation,
    pub weights: Vec<f32>,
    pub biases: Vec<f32>,
}

impl ConvLayerSpec {
    /// A layer with zero weights and biases.
    #[allow(clippy::too_many_arguments)]
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        activation: Activation,
    ) -> Result<Self> {
        if groups == 0 {
            return Err(Error::Config("groups must be at least 1".into()));
        }
        let layer = Self {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            groups,
            activation,
            weights: vec![0.0; out_channels * (in_channels / groups) * kernel_h * kernel_w],
            biases: vec![0.0; out_channels],
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Kernel volume per output channel: `(in / groups) * kh * kw`.
    pub fn fan_in(&self) -> usize {
        (self.in_channels / self.groups.max(1)) * self.kernel_h * self.kernel_w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.groups == 0 || self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return bad(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("conv layer needs at least one input and output channel".into());
        }
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return bad("kernel and stride must be at least 1".into());
        }
        let expected = self.out_channels * self.fan_in();
        if self.weights.len() != expected {
            return bad(format!("expected {expected} weights, got {}", self.weights.len()));
        }
        if self.biases.len() != self.out_channels {
            return bad(format!(
                "expected {} biases, got {}",
                self.out_channels,
                self.biases.len()
            ));
        }
        Ok(())
    }

    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        match (
            output_len(height, self.kernel_h, self.stride, self.padding),
            output_len(width, self.kernel_w, self.stride, self.padding),
        ) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::shape(format!(
                "input {height}x{width} (padding {}) smaller than kernel {}x{}",
                self.padding, self.kernel_h, self.kernel_w
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Mean,
    Max,
}

impl PoolMode {
    pub fn code(self) -> u32 {
        match self {
            PoolMode::Mean => 0,
            PoolMode::Max => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(PoolMode::Mean),
            1 => Some(PoolMode::Max),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolLayerSpec {
    pub window_h: usize,
    pub window_w: usize,
    pub stride: usize,
    pub mode: PoolMode,
}

impl PoolLayerSpec {
    pub fn new(window_h: usize, window_w: usize, stride: usize, mode: PoolMode) -> Result<Self> {
        let spec = Self {
            window_h,
            window_w,
            stride,
            mode,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_h == 0 || self.window_w == 0 || self.stride == 0 {
            return Err(Error::Config("pool window and stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        match (
            output_len(height, self.window_h, self.stride, 0),
            output_len(width, self.window_w, self.stride, 0),
        ) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::shape(format!(
                "input {height}x{width} smaller than pool window {}x{}",
                self.window_h, self.window_w
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv(ConvLayerSpec),
    Pool(PoolLayerSpec),
    /// Placeholder (e.g. for a dropped normalization layer) that keeps indices aligned.
    Noop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn conv(name: impl Into<String>, spec: ConvLayerSpec) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv(spec),
        }
    }

    pub fn pool(name: impl Into<String>, spec: PoolLayerSpec) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Pool(spec),
        }
    }

    pub fn noop(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Noop,
        }
    }

    /// `(kernel_h, kernel_w, stride, padding)` as seen by receptive-field algebra.
    pub fn window(&self) -> (usize, usize, usize, usize) {
        match &self.kind {
            LayerKind::Conv(c) => (c.kernel_h, c.kernel_w, c.stride, c.padding),
            LayerKind::Pool(p) => (p.window_h, p.window_w, p.stride, 0),
            LayerKind::Noop => (1, 1, 1, 0),
        }
    }

    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        match &self.kind {
            LayerKind::Conv(c) => c.output_dims(height, width),
            LayerKind::Pool(p) => p.output_dims(height, width),
            LayerKind::Noop => Ok((height, width)),
        }
    }

    /// Output channels given the input channel count.
    pub fn output_channels(&self, input: usize) -> usize {
        match &self.kind {
            LayerKind::Conv(c) => c.out_channels,
            _ => input,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_len_formula() {
        assert_eq!(output_len(5, 3, 1, 0), Some(3));
        assert_eq!(output_len(240, 11, 4, 0), Some(58));
        assert_eq!(output_len(2, 3, 1, 0), None);
        assert_eq!(output_len(2, 3, 1, 1), Some(2));
    }

    #[test]
    fn conv_validation() {
        assert!(ConvLayerSpec::zeros(3, 4, 3, 3, 1, 0, 2, Activation::None).is_err());
        assert!(ConvLayerSpec::zeros(4, 4, 3, 3, 0, 0, 2, Activation::None).is_err());
        let mut c = ConvLayerSpec::zeros(4, 6, 3, 3, 1, 0, 2, Activation::Relu).unwrap();
        assert_eq!(c.weights.len(), 6 * 2 * 9);
        c.weights.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn activation_codes() {
        for a in [Activation::None, Activation::Relu, Activation::Sigmoid] {
            assert_eq!(Activation::from_code(a.code()), Some(a));
        }
        assert_eq!(Activation::from_code(9), None);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
    }
}
