//! Convolution and pooling kernels.
//!
//! Convolution lowers each group's input windows into a `K x P` column matrix
//! (`K = in/groups * kh * kw`, `P = out_h * out_w`) and multiplies it with the
//! group's weight rows. Work is split over blocks of output channels; every
//! output element is accumulated in the same fixed order regardless of thread
//! count, so results are bit-reproducible.

use std::borrow::Cow;

use rayon::prelude::*;

use super::layer::{ConvLayerSpec, PoolLayerSpec, PoolMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

#[cfg(feature = "f64-accum")]
type Acc = f64;
#[cfg(not(feature = "f64-accum"))]
type Acc = f32;

const CHANNEL_BLOCK: usize = 8;
const COLUMN_TILE: usize = 512;

/// Lowers the channels `[c0, c0 + cin)` of `input` into a column matrix.
fn im2col(
    input: &Tensor3,
    c0: usize,
    cin: usize,
    layer: &ConvLayerSpec,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let (kh, kw, s, pad) = (layer.kernel_h, layer.kernel_w, layer.stride, layer.padding as isize);
    let (h, w) = (input.height() as isize, input.width() as isize);
    let p = out_h * out_w;
    let mut cols = vec![0.0f32; cin * kh * kw * p];
    cols.par_chunks_mut(p).enumerate().for_each(|(row, dst)| {
        let c = row / (kh * kw);
        let ky = (row / kw) % kh;
        let kx = row % kw;
        let plane = input.channel(c0 + c);
        for oy in 0..out_h {
            let iy = (oy * s) as isize - pad + ky as isize;
            if iy < 0 || iy >= h {
                continue;
            }
            let src_row = &plane[iy as usize * w as usize..(iy as usize + 1) * w as usize];
            let dst_row = &mut dst[oy * out_w..(oy + 1) * out_w];
            for (ox, d) in dst_row.iter_mut().enumerate() {
                let ix = (ox * s) as isize - pad + kx as isize;
                if ix >= 0 && ix < w {
                    *d = src_row[ix as usize];
                }
            }
        }
    });
    cols
}

pub fn conv_forward(input: &Tensor3, layer: &ConvLayerSpec) -> Result<Tensor3> {
    layer.validate()?;
    if input.channels() != layer.in_channels {
        return Err(Error::shape(format!(
            "expected {} input channels, got {}",
            layer.in_channels,
            input.channels()
        )));
    }
    let (out_h, out_w) = layer.output_dims(input.height(), input.width())?;
    let p = out_h * out_w;
    let cin_g = layer.in_channels / layer.groups;
    let cout_g = layer.out_channels / layer.groups;
    let k = layer.fan_in();
    let pointwise =
        layer.kernel_h == 1 && layer.kernel_w == 1 && layer.stride == 1 && layer.padding == 0;

    let mut out = vec![0.0f32; layer.out_channels * p];
    for g in 0..layer.groups {
        let cols: Cow<[f32]> = if pointwise {
            Cow::Borrowed(&input.data()[g * cin_g * p..(g + 1) * cin_g * p])
        } else {
            Cow::Owned(im2col(input, g * cin_g, cin_g, layer, out_h, out_w))
        };
        let weights = &layer.weights[g * cout_g * k..(g + 1) * cout_g * k];
        let biases = &layer.biases[g * cout_g..(g + 1) * cout_g];
        out[g * cout_g * p..(g + 1) * cout_g * p]
            .par_chunks_mut(CHANNEL_BLOCK * p)
            .enumerate()
            .for_each(|(blk, dst)| {
                let o0 = blk * CHANNEL_BLOCK;
                let nb = dst.len() / p;
                gemm_block(&weights[o0 * k..(o0 + nb) * k], &cols, k, p, dst);
                for (r, row) in dst.chunks_mut(p).enumerate() {
                    let b = biases[o0 + r];
                    row.iter_mut().for_each(|v| *v = layer.activation.apply(*v + b));
                }
            });
    }
    Tensor3::from_vec(layer.out_channels, out_h, out_w, out)
}

/// `dst[r][x] = sum_kk w[r][kk] * cols[kk][x]` for the `nb` rows in `dst`.
fn gemm_block(w: &[f32], cols: &[f32], k: usize, p: usize, dst: &mut [f32]) {
    let nb = dst.len() / p;
    let mut acc = vec![0.0 as Acc; nb * COLUMN_TILE];
    let mut t0 = 0;
    while t0 < p {
        let tl = COLUMN_TILE.min(p - t0);
        acc.iter_mut().for_each(|a| *a = 0.0);
        for kk in 0..k {
            let col = &cols[kk * p + t0..kk * p + t0 + tl];
            for r in 0..nb {
                let wv = w[r * k + kk] as Acc;
                let a = &mut acc[r * COLUMN_TILE..r * COLUMN_TILE + tl];
                for (av, &cv) in a.iter_mut().zip(col) {
                    *av += wv * cv as Acc;
                }
            }
        }
        for r in 0..nb {
            for (d, &a) in dst[r * p + t0..r * p + t0 + tl]
                .iter_mut()
                .zip(&acc[r * COLUMN_TILE..r * COLUMN_TILE + tl])
            {
                *d = a as f32;
            }
        }
        t0 += tl;
    }
}

pub fn pool_forward(input: &Tensor3, layer: &PoolLayerSpec) -> Result<Tensor3> {
    layer.validate()?;
    let (out_h, out_w) = layer.output_dims(input.height(), input.width())?;
    let (wh, ww, s) = (layer.window_h, layer.window_w, layer.stride);
    let area = (wh * ww) as Acc;
    let in_w = input.width();
    let mut out = vec![0.0f32; input.channels() * out_h * out_w];
    out.par_chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(c, dst)| {
            let plane = input.channel(c);
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let rows = (oy * s..oy * s + wh).map(|y| &plane[y * in_w + ox * s..y * in_w + ox * s + ww]);
                    dst[oy * out_w + ox] = match layer.mode {
                        PoolMode::Mean => {
                            let mut sum: Acc = 0.0;
                            for row in rows {
                                for &v in row {
                                    sum += v as Acc;
                                }
                            }
                            (sum / area) as f32
                        }
                        PoolMode::Max => rows
                            .flat_map(|r| r.iter().copied())
                            .fold(f32::NEG_INFINITY, f32::max),
                    };
                }
            }
        });
    Tensor3::from_vec(input.channels(), out_h, out_w, out)
}
