//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use fcnad::net::{Activation, ConvLayerSpec, Layer, NetworkSpec, PoolLayerSpec, PoolMode};
use fcnad::pipeline::{FixtureSpec, RunConfig};
use fcnad::Tensor3;
use rand::Rng;

/// Direct six-loop convolution in f64, activation applied.
pub fn naive_conv(x: &Tensor3, c: &ConvLayerSpec) -> (usize, usize, Vec<f64>) {
    let (h, w) = (x.height(), x.width());
    let oh = (h + 2 * c.padding - c.kernel_h) / c.stride + 1;
    let ow = (w + 2 * c.padding - c.kernel_w) / c.stride + 1;
    let cin_g = c.in_channels / c.groups;
    let cout_g = c.out_channels / c.groups;
    let mut out = vec![0.0f64; c.out_channels * oh * ow];
    for o in 0..c.out_channels {
        let g = o / cout_g;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = c.biases[o] as f64;
                for ci in 0..cin_g {
                    for ky in 0..c.kernel_h {
                        for kx in 0..c.kernel_w {
                            let iy = (oy * c.stride + ky) as i64 - c.padding as i64;
                            let ix = (ox * c.stride + kx) as i64 - c.padding as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            let wi = ((o * cin_g + ci) * c.kernel_h + ky) * c.kernel_w + kx;
                            s += c.weights[wi] as f64 * x.get(g * cin_g + ci, iy as usize, ix as usize) as f64;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = match c.activation {
                    Activation::None => s,
                    Activation::Relu => s.max(0.0),
                    Activation::Sigmoid => 1.0 / (1.0 + (-s).exp()),
                };
            }
        }
    }
    (oh, ow, out)
}

/// Direct pooling in f64.
pub fn naive_pool(x: &Tensor3, p: &PoolLayerSpec) -> (usize, usize, Vec<f64>) {
    let oh = (x.height() - p.window_h) / p.stride + 1;
    let ow = (x.width() - p.window_w) / p.stride + 1;
    let mut out = Vec::with_capacity(x.channels() * oh * ow);
    for c in 0..x.channels() {
        for oy in 0..oh {
            for ox in 0..ow {
                let vals = (0..p.window_h)
                    .flat_map(|ky| (0..p.window_w).map(move |kx| (ky, kx)))
                    .map(|(ky, kx)| x.get(c, oy * p.stride + ky, ox * p.stride + kx) as f64);
                out.push(match p.mode {
                    PoolMode::Mean => vals.sum::<f64>() / (p.window_h * p.window_w) as f64,
                    PoolMode::Max => vals.fold(f64::NEG_INFINITY, f64::max),
                });
            }
        }
    }
    (oh, ow, out)
}

/// Random stack of conv and mean-pool layers with strictly positive weights,
/// stride never above the window, that maps an `h x w` input to a non-empty grid.
pub fn random_positive_net(rng: &mut impl Rng, h: usize, w: usize) -> NetworkSpec {
    loop {
        let depth = rng.random_range(1..=4);
        let mut layers = Vec::new();
        let mut ch = rng.random_range(1..=2);
        for i in 0..depth {
            if rng.random_bool(0.35) && i > 0 {
                let k = rng.random_range(2..=3);
                let s = rng.random_range(1..=k);
                layers.push(Layer::pool(format!("P{i}"), PoolLayerSpec::new(k, k, s, PoolMode::Mean).unwrap()));
            } else {
                let k: usize = rng.random_range(1..=5);
                let s = rng.random_range(1..=k);
                let pad = rng.random_range(0..k.div_ceil(2).max(1));
                let groups = if ch % 2 == 0 && rng.random_bool(0.5) { 2 } else { 1 };
                let cout = groups * rng.random_range(1..=2);
                let mut c =
                    ConvLayerSpec::zeros(ch, cout, k, k, s, pad, groups, Activation::Relu).unwrap();
                c.weights.iter_mut().for_each(|v| *v = rng.random_range(0.1..1.0));
                c.biases.iter_mut().for_each(|v| *v = 0.0);
                layers.push(Layer::conv(format!("C{i}"), c));
                ch = cout;
            }
        }
        if layers.iter().all(|l| matches!(l.kind, fcnad::net::LayerKind::Pool(_))) {
            continue;
        }
        let Ok(net) = NetworkSpec::new(layers) else { continue };
        let in_ch = net.input_channels().unwrap();
        if let Ok((_, r, c)) = net.output_shape(net.layers.len(), in_ch, h, w) {
            if r > 0 && c > 0 {
                return net;
            }
        }
    }
}

/// For every output cell, the set of input pixels whose perturbation changes it.
///
/// Returns `influence[cell][pixel]` for a network evaluated on an `h x w`
/// all-zero input with one pixel raised at a time (all channels).
pub fn perturbation_fields(net: &NetworkSpec, h: usize, w: usize) -> (usize, usize, Vec<Vec<bool>>) {
    let ch = net.input_channels().unwrap();
    let k = net.layers.len();
    let (oc, rows, cols) = net.output_shape(k, ch, h, w).unwrap();
    let mut influence = vec![vec![false; h * w]; rows * cols];
    let base = net.forward_layers(&Tensor3::zeros(ch, h, w), k).unwrap();
    for y in 0..h {
        for x in 0..w {
            let mut input = Tensor3::zeros(ch, h, w);
            for c in 0..ch {
                input.set(c, y, x, 1.0);
            }
            let out = net.forward_layers(&input, k).unwrap();
            for cell in 0..rows * cols {
                let changed = (0..oc).any(|o| out.data()[o * rows * cols + cell] != base.data()[o * rows * cols + cell]);
                if changed {
                    influence[cell][y * w + x] = true;
                }
            }
        }
    }
    (rows, cols, influence)
}

/// `sqrt((x - mu)^T A^{-1} (x - mu))` by Gaussian elimination with partial pivoting.
pub fn solve_mahalanobis(a: &[f64], mu: &[f64], x: &[f64]) -> f64 {
    let n = mu.len();
    let mut m: Vec<f64> = a.to_vec();
    let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    let mut b = diff.clone();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        for j in 0..n {
            m.swap(col * n + j, piv * n + j);
        }
        b.swap(col, piv);
        for r in col + 1..n {
            let f = m[r * n + col] / m[col * n + col];
            for j in col..n {
                m[r * n + j] -= f * m[col * n + j];
            }
            b[r] -= f * b[col];
        }
    }
    let mut sol = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|j| m[r * n + j] * sol[j]).sum();
        sol[r] = (b[r] - s) / m[r * n + r];
    }
    diff.iter().zip(&sol).map(|(d, s)| d * s).sum::<f64>().sqrt()
}

/// AUC as the probability a random positive outscores a random negative (ties count half).
pub fn pairwise_auc(scores: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let mut acc = 0.0;
    for p in &pos {
        for n in &neg {
            acc += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    acc / (pos.len() * neg.len()) as f64
}

/// ROC vertices by brute force: one point per distinct threshold, plus the corners.
pub fn brute_roc(scores: &[(f64, bool)]) -> Vec<(f64, f64)> {
    let pos = scores.iter().filter(|s| s.1).count() as f64;
    let neg = scores.len() as f64 - pos;
    let mut ts: Vec<f64> = scores.iter().map(|s| s.0).collect();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in ts {
        let tp = scores.iter().filter(|s| s.1 && s.0 >= t).count() as f64;
        let fp = scores.iter().filter(|s| !s.1 && s.0 >= t).count() as f64;
        pts.push((fp / neg, tp / pos));
    }
    pts.push((1.0, 1.0));
    pts
}

/// EER on the piecewise-linear ROC: the false-positive rate where the miss rate
/// equals it, located by bisection on the first segment that crosses.
pub fn dense_eer(points: &[(f64, f64)]) -> f64 {
    let gap = |p: (f64, f64)| p.0 + p.1 - 1.0;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        if gap(a) <= 0.0 && gap(b) >= 0.0 {
            let at = |s: f64| (a.0 + s * (b.0 - a.0), a.1 + s * (b.1 - a.1));
            if gap(a) == 0.0 {
                return a.0;
            }
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if gap(at(mid)) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return at(0.5 * (lo + hi)).0;
        }
    }
    1.0
}

/// Fixture at the default desk scale.
pub fn desk_fixture_spec() -> FixtureSpec {
    FixtureSpec::default()
}

/// Training settings sized for the desk fixture. With untrained reference
/// weights the S1 features keep the motion detail that C2 mixes away.
pub fn desk_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.tap = "S1".into();
    cfg.autoencoder.hidden = 64;
    cfg.autoencoder.epochs = 15;
    cfg.autoencoder.batch_size = 128;
    cfg
}
