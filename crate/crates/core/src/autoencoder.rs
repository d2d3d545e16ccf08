//! Single-hidden-layer sparse autoencoder.
//!
//! Objective over a batch of `N` vectors:
//!
//! ```text
//! J = 1/(2N) sum ||x - x_hat||^2 + lambda/2 (||W||^2 + ||W'||^2) + beta * sum_j KL(rho || rho_hat_j)
//! a = sigmoid(W x + b), x_hat = sigmoid(W' a + b')
//! ```
//!
//! where `rho_hat_j` is the batch-mean activation of hidden unit `j`. The trained
//! encoder becomes a 1x1 convolution with sigmoid activation.
//!
//! All parameters live in one flat vector laid out as `[W | b | W' | b']`
//! (`W'` is empty when the decoder is tied to `W^T`).

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Activation, ConvLayerSpec};

/// Samples per parallel work unit; fixed so reductions happen in a fixed order.
const CHUNK: usize = 32;
const RHO_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeHyper {
    pub hidden: usize,
    pub sparsity_target: f64,
    pub sparsity_weight: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub holdout_fraction: f64,
    pub tied: bool,
    pub seed: u64,
}

impl Default for AeHyper {
    fn default() -> Self {
        Self {
            hidden: 500,
            sparsity_target: 0.05,
            sparsity_weight: 3.0,
            weight_decay: 3e-3,
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 256,
            epochs: 50,
            holdout_fraction: 0.1,
            tied: false,
            seed: 0,
        }
    }
}

impl AeHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("autoencoder: {m}")));
        if self.hidden == 0 {
            return bad("hidden size must be at least 1");
        }
        if self.sparsity_weight > 0.0 && !(self.sparsity_target > 0.0 && self.sparsity_target < 1.0) {
            return bad("sparsity target must lie in (0, 1)");
        }
        if self.sparsity_weight < 0.0 || self.weight_decay < 0.0 || self.learning_rate <= 0.0 {
            return bad("weights and learning rate must be non-negative (learning rate positive)");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `p ln(p/q) + (1-p) ln((1-p)/(1-q))` with `0 ln 0 = 0`.
fn kl_bernoulli(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseAutoencoder {
    input_dim: usize,
    hidden: usize,
    tied: bool,
    params: Vec<f64>,
}

/// Loss and gradient in the same flat layout as the parameters.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub reconstruction: f64,
    pub grad: Vec<f64>,
    /// Hidden units whose mean activation had to be clamped away from 0 or 1.
    pub clamped: usize,
}

impl SparseAutoencoder {
    /// All-zero parameters.
    pub fn zeros(input_dim: usize, hidden: usize, tied: bool) -> Self {
        let n = Self::param_len(input_dim, hidden, tied);
        Self {
            input_dim,
            hidden,
            tied,
            params: vec![0.0; n],
        }
    }

    /// Uniform `(-r, r)` weights with `r = sqrt(6 / (m + h))`, zero biases.
    pub fn random(input_dim: usize, hidden: usize, tied: bool, seed: u64) -> Self {
        let mut ae = Self::zeros(input_dim, hidden, tied);
        let r = (6.0 / (input_dim + hidden) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, h) = (input_dim, hidden);
        ae.params[..h * m].iter_mut().for_each(|w| *w = rng.random_range(-r..r));
        if !tied {
            let off = h * m + h;
            ae.params[off..off + m * h].iter_mut().for_each(|w| *w = rng.random_range(-r..r));
        }
        ae
    }

    fn param_len(m: usize, h: usize, tied: bool) -> usize {
        h * m + h + if tied { 0 } else { m * h } + m
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn is_tied(&self) -> bool {
        self.tied
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Encoder weights, `hidden x input_dim` row-major.
    pub fn encoder_weights(&self) -> &[f64] {
        &self.params[..self.hidden * self.input_dim]
    }

    pub fn encoder_bias(&self) -> &[f64] {
        let o = self.hidden * self.input_dim;
        &self.params[o..o + self.hidden]
    }

    fn dec_w_offset(&self) -> usize {
        self.hidden * self.input_dim + self.hidden
    }

    fn dec_b_offset(&self) -> usize {
        self.dec_w_offset() + if self.tied { 0 } else { self.input_dim * self.hidden }
    }

    pub fn decoder_bias(&self) -> &[f64] {
        &self.params[self.dec_b_offset()..]
    }

    /// Decoder weight from hidden unit `j` to output `i`.
    #[inline]
    fn dec_w(&self, i: usize, j: usize) -> f64 {
        if self.tied {
            self.params[j * self.input_dim + i]
        } else {
            self.params[self.dec_w_offset() + i * self.hidden + j]
        }
    }

    pub fn set_encoder(&mut self, weights: &[f64], bias: &[f64]) -> Result<()> {
        let (m, h) = (self.input_dim, self.hidden);
        if weights.len() != h * m || bias.len() != h {
            return Err(Error::Dimension { expected: h * m + h, got: weights.len() + bias.len() });
        }
        self.params[..h * m].copy_from_slice(weights);
        self.params[h * m..h * m + h].copy_from_slice(bias);
        Ok(())
    }

    /// Sets `W'` (`input_dim x hidden`, row-major). Not available in tied mode.
    pub fn set_decoder(&mut self, weights: &[f64], bias: &[f64]) -> Result<()> {
        let (m, h) = (self.input_dim, self.hidden);
        if self.tied {
            return Err(Error::Config("tied decoder weights follow the encoder".into()));
        }
        if weights.len() != m * h || bias.len() != m {
            return Err(Error::Dimension { expected: m * h + m, got: weights.len() + bias.len() });
        }
        let o = self.dec_w_offset();
        self.params[o..o + m * h].copy_from_slice(weights);
        self.params[o + m * h..].copy_from_slice(bias);
        Ok(())
    }

    fn encode_into(&self, x: &[f64], out: &mut [f64]) {
        let m = self.input_dim;
        let w = self.encoder_weights();
        for ((o, row), b) in out.iter_mut().zip(w.chunks_exact(m)).zip(self.encoder_bias()) {
            let z: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b;
            *o = sigmoid(z);
        }
    }

    fn decode_into(&self, a: &[f64], out: &mut [f64]) {
        let bias = self.decoder_bias();
        for (i, o) in out.iter_mut().enumerate() {
            let mut z = bias[i];
            for (j, &aj) in a.iter().enumerate() {
                z += self.dec_w(i, j) * aj;
            }
            *o = sigmoid(z);
        }
    }

    /// `sigmoid(W x + b)`
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension { expected: self.input_dim, got: x.len() });
        }
        let mut out = vec![0.0; self.hidden];
        self.encode_into(x, &mut out);
        Ok(out)
    }

    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        let a = self.encode(x)?;
        let mut out = vec![0.0; self.input_dim];
        self.decode_into(&a, &mut out);
        Ok(out)
    }

    fn check_batch(&self, batch: &[f64]) -> Result<usize> {
        let m = self.input_dim;
        if batch.is_empty() || batch.len() % m != 0 {
            return Err(Error::Dimension { expected: m, got: batch.len() });
        }
        Ok(batch.len() / m)
    }

    fn hidden_activations(&self, batch: &[f64]) -> Vec<f64> {
        let (m, h) = (self.input_dim, self.hidden);
        let mut acts = vec![0.0; batch.len() / m * h];
        acts.par_chunks_mut(CHUNK * h)
            .zip(batch.par_chunks(CHUNK * m))
            .for_each(|(a, x)| {
                for (ar, xr) in a.chunks_exact_mut(h).zip(x.chunks_exact(m)) {
                    self.encode_into(xr, ar);
                }
            });
        acts
    }

    fn mean_activation(&self, acts: &[f64], n: usize) -> Vec<f64> {
        let mut rho = vec![0.0; self.hidden];
        for row in acts.chunks_exact(self.hidden) {
            rho.iter_mut().zip(row).for_each(|(r, a)| *r += a);
        }
        rho.iter_mut().for_each(|r| *r /= n as f64);
        rho
    }

    fn decay_term(&self, lambda: f64) -> f64 {
        if lambda == 0.0 {
            return 0.0;
        }
        let sq = |s: &[f64]| s.iter().map(|w| w * w).sum::<f64>();
        let w2 = sq(self.encoder_weights());
        let d2 = if self.tied {
            w2
        } else {
            let o = self.dec_w_offset();
            sq(&self.params[o..o + self.input_dim * self.hidden])
        };
        0.5 * lambda * (w2 + d2)
    }

    fn sparsity(&self, hyper: &AeHyper, rho_hat: &mut [f64]) -> (f64, usize) {
        if hyper.sparsity_weight == 0.0 {
            return (0.0, 0);
        }
        let mut clamped = 0;
        let mut kl = 0.0;
        for r in rho_hat.iter_mut() {
            if *r < RHO_CLAMP || *r > 1.0 - RHO_CLAMP {
                clamped += 1;
                *r = r.clamp(RHO_CLAMP, 1.0 - RHO_CLAMP);
            }
            kl += kl_bernoulli(hyper.sparsity_target, *r);
        }
        (hyper.sparsity_weight * kl, clamped)
    }

    /// Mean half squared reconstruction error `1/(2N) sum ||x - x_hat||^2`.
    pub fn reconstruction_loss(&self, batch: &[f64]) -> Result<f64> {
        let n = self.check_batch(batch)?;
        let m = self.input_dim;
        let parts: Vec<f64> = batch
            .par_chunks(CHUNK * m)
            .map(|chunk| {
                let mut a = vec![0.0; self.hidden];
                let mut y = vec![0.0; m];
                chunk
                    .chunks_exact(m)
                    .map(|x| {
                        self.encode_into(x, &mut a);
                        self.decode_into(&a, &mut y);
                        x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
                    })
                    .sum()
            })
            .collect();
        Ok(parts.iter().sum::<f64>() / (2.0 * n as f64))
    }

    /// Full objective without gradients.
    pub fn loss(&self, batch: &[f64], hyper: &AeHyper) -> Result<f64> {
        let n = self.check_batch(batch)?;
        let recon = self.reconstruction_loss(batch)?;
        let mut rho = if hyper.sparsity_weight == 0.0 {
            Vec::new()
        } else {
            self.mean_activation(&self.hidden_activations(batch), n)
        };
        let (sparse, _) = self.sparsity(hyper, &mut rho);
        Ok(recon + self.decay_term(hyper.weight_decay) + sparse)
    }

    pub fn loss_and_grad(&self, batch: &[f64], hyper: &AeHyper) -> Result<LossGrad> {
        let n = self.check_batch(batch)?;
        let (m, h) = (self.input_dim, self.hidden);
        let acts = self.hidden_activations(batch);
        let mut rho = self.mean_activation(&acts, n);
        let (sparse_loss, clamped) = self.sparsity(hyper, &mut rho);
        let sparse_grad: Vec<f64> = if hyper.sparsity_weight == 0.0 {
            vec![0.0; h]
        } else {
            let p = hyper.sparsity_target;
            rho.iter()
                .map(|&q| hyper.sparsity_weight * (-p / q + (1.0 - p) / (1.0 - q)) / n as f64)
                .collect()
        };
        let inv_n = 1.0 / n as f64;
        let dec_w_off = self.dec_w_offset();
        let dec_b_off = self.dec_b_offset();
        let plen = self.params.len();

        let partials: Vec<(Vec<f64>, f64)> = batch
            .par_chunks(CHUNK * m)
            .zip(acts.par_chunks(CHUNK * h))
            .map(|(xs, as_)| {
                let mut g = vec![0.0; plen];
                let mut sq = 0.0;
                let mut y = vec![0.0; m];
                let mut d3 = vec![0.0; m];
                let mut d2 = vec![0.0; h];
                for (x, a) in xs.chunks_exact(m).zip(as_.chunks_exact(h)) {
                    self.decode_into(a, &mut y);
                    for i in 0..m {
                        let e = y[i] - x[i];
                        sq += e * e;
                        d3[i] = e * y[i] * (1.0 - y[i]) * inv_n;
                    }
                    for j in 0..h {
                        let mut back = sparse_grad[j];
                        for i in 0..m {
                            back += self.dec_w(i, j) * d3[i];
                        }
                        d2[j] = back * a[j] * (1.0 - a[j]);
                    }
                    // decoder
                    for i in 0..m {
                        for j in 0..h {
                            let idx = if self.tied { j * m + i } else { dec_w_off + i * h + j };
                            g[idx] += d3[i] * a[j];
                        }
                        g[dec_b_off + i] += d3[i];
                    }
                    // encoder
                    for j in 0..h {
                        let row = &mut g[j * m..(j + 1) * m];
                        for (gk, xk) in row.iter_mut().zip(x) {
                            *gk += d2[j] * xk;
                        }
                        g[h * m + j] += d2[j];
                    }
                }
                (g, sq)
            })
            .collect();

        let mut grad = vec![0.0; plen];
        let mut sq = 0.0;
        for (g, s) in &partials {
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            sq += s;
        }
        let lambda = hyper.weight_decay;
        if lambda != 0.0 {
            let scale = if self.tied { 2.0 * lambda } else { lambda };
            for k in 0..h * m {
                grad[k] += scale * self.params[k];
            }
            if !self.tied {
                for k in dec_w_off..dec_b_off {
                    grad[k] += lambda * self.params[k];
                }
            }
        }
        let reconstruction = sq / (2.0 * n as f64);
        Ok(LossGrad {
            loss: reconstruction + self.decay_term(lambda) + sparse_loss,
            reconstruction,
            grad,
            clamped,
        })
    }

    /// The encoder as a 1x1 sigmoid convolution (`input_dim -> hidden`).
    pub fn as_conv_layer(&self) -> ConvLayerSpec {
        ConvLayerSpec {
            in_channels: self.input_dim,
            out_channels: self.hidden,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
            groups: 1,
            activation: Activation::Sigmoid,
            weights: self.encoder_weights().iter().map(|&w| w as f32).collect(),
            biases: self.encoder_bias().iter().map(|&b| b as f32).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Full objective on the training split with end-of-epoch parameters.
    pub train_loss: f64,
    pub validation_reconstruction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Entry 0 holds the initial parameters.
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub clamped_units: usize,
}

/// Trains from a seeded random initialization.
pub fn train(vectors: &[f64], dim: usize, hyper: &AeHyper) -> Result<(SparseAutoencoder, TrainingHistory)> {
    hyper.validate()?;
    let init = SparseAutoencoder::random(dim, hyper.hidden, hyper.tied, hyper.seed);
    train_from(init, vectors, hyper)
}

/// Mini-batch gradient descent with momentum, returning the parameters with the
/// lowest reconstruction loss on a held-out split.
pub fn train_from(
    init: SparseAutoencoder,
    vectors: &[f64],
    hyper: &AeHyper,
) -> Result<(SparseAutoencoder, TrainingHistory)> {
    hyper.validate()?;
    let m = init.input_dim;
    let n = init.check_batch(vectors)?;
    if n < init.hidden {
        log::warn!("training autoencoder with {n} vectors for {} hidden units", init.hidden);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed_ae);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = if n >= 2 {
        ((n as f64 * hyper.holdout_fraction).round() as usize).clamp(usize::from(hyper.holdout_fraction > 0.0), n - 1)
    } else {
        0
    };
    let gather = |idx: &[usize]| -> Vec<f64> {
        idx.iter().flat_map(|&i| vectors[i * m..(i + 1) * m].iter().copied()).collect()
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_set = gather(train_idx);
    let val_set = if n_val == 0 { train_set.clone() } else { gather(val_idx) };
    let mut train_order: Vec<usize> = (0..train_idx.len()).collect();

    let mut ae = init;
    let mut best = ae.clone();
    let mut history = TrainingHistory::default();
    let evaluate = |ae: &SparseAutoencoder, epoch: usize| -> Result<EpochStats> {
        let stats = EpochStats {
            epoch,
            train_loss: ae.loss(&train_set, hyper)?,
            validation_reconstruction: ae.reconstruction_loss(&val_set)?,
        };
        if !stats.train_loss.is_finite() || !stats.validation_reconstruction.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: 0,
                detail: format!("{stats:?}"),
            });
        }
        Ok(stats)
    };
    let initial = evaluate(&ae, 0)?;
    let mut best_val = initial.validation_reconstruction;
    history.epochs.push(initial);
    let mut velocity = vec![0.0; ae.params.len()];
    let mut batch = Vec::with_capacity(hyper.batch_size * m);

    for epoch in 1..=hyper.epochs {
        train_order.shuffle(&mut rng);
        for (b, idx) in train_order.chunks(hyper.batch_size).enumerate() {
            batch.clear();
            for &i in idx {
                batch.extend_from_slice(&train_set[i * m..(i + 1) * m]);
            }
            let lg = ae.loss_and_grad(&batch, hyper)?;
            if !lg.loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!(
                        "loss {} (reconstruction {}), {} clamped units",
                        lg.loss, lg.reconstruction, lg.clamped
                    ),
                });
            }
            history.clamped_units += lg.clamped;
            for ((v, p), g) in velocity.iter_mut().zip(ae.params.iter_mut()).zip(&lg.grad) {
                *v = hyper.momentum * *v - hyper.learning_rate * g;
                *p += *v;
            }
        }
        let stats = evaluate(&ae, epoch)?;
        log::debug!(
            "autoencoder epoch {epoch}: loss {:.6}, validation reconstruction {:.6}",
            stats.train_loss,
            stats.validation_reconstruction
        );
        if stats.validation_reconstruction < best_val {
            best_val = stats.validation_reconstruction;
            best = ae.clone();
            history.best_epoch = epoch;
        }
        history.epochs.push(stats);
    }
    Ok((best, history))
}
