//! The Wav2Small network.
//!
//! LogMel frontend → VGG7 (13 channels throughout, one max pool after the
//! third block, 1×1 projection at the end) → token vectorization → softmax
//! attention pooling over tokens → linear arousal/dominance/valence head.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, Frontend, Waveform, N_BINS, N_FFT, N_MELS};
use crate::error::{Error, Result};
use crate::nn::{
    self, attention_pool, fuse_conv_bn_relu, maxpool2d, maxpool_out_dim, to_tokens, BatchNorm2d, BatchStats,
    Conv2d, FusedConv, GradTape, Linear, Mode, Param,
};
use crate::scalar::Float;
use crate::tensor::{Matrix, Tensor4};

pub const CHANNELS: usize = 13;
pub const POOLED_MELS: usize = 13;
pub const TOKEN_DIM: usize = CHANNELS * POOLED_MELS;
pub const OUTPUTS: usize = 3;
pub const VGG_BLOCKS: usize = 7;
/// Blocks that run at full resolution, before the max pool.
pub const BLOCKS_BEFORE_POOL: usize = 3;

/// Arousal, dominance, valence; nominally in `[0, 1]`, never clamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvTriple {
    pub arousal: f64,
    pub dominance: f64,
    pub valence: f64,
}

impl AdvTriple {
    pub fn new(arousal: f64, dominance: f64, valence: f64) -> Self {
        Self {
            arousal,
            dominance,
            valence,
        }
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.arousal, self.dominance, self.valence]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Elementwise arithmetic mean.
    pub fn mean(items: &[AdvTriple]) -> Option<AdvTriple> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let mut acc = [0.0; 3];
        for t in items {
            for (a, v) in acc.iter_mut().zip(t.to_array()) {
                *a += v;
            }
        }
        Some(AdvTriple::from_array(acc.map(|a| a / n)))
    }
}

/// Anything that maps a waveform to an A/D/V prediction.
pub trait AdvPredictor: Send + Sync {
    fn predict(&self, w: &Waveform) -> Result<AdvTriple>;
}

/// Pre-pooling representation: one 169-dimensional vector per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix<T> {
    values: Matrix<T>,
}

impl<T: Float> TokenMatrix<T> {
    pub fn tokens(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn token(&self, t: usize) -> &[T] {
        self.values.row(t)
    }
}

/// Token count produced for a waveform of `num_samples`.
pub fn token_count(num_samples: usize) -> usize {
    maxpool_out_dim(dsp::frame_count(num_samples))
}

/// Per-module parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub frontend: usize,
    pub vgg: usize,
    pub lin: usize,
    pub sof: usize,
    pub adv: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.frontend + self.vgg + self.lin + self.sof + self.adv
    }
}

/// Multiply-accumulate counts for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCount {
    pub frontend: u64,
    pub vgg: u64,
    pub pool_and_head: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.frontend + self.vgg + self.pool_and_head
    }
}

/// MACs of the fused network on `num_samples` of audio.
///
/// Counts the DFT and filterbank products, every convolution tap, and the
/// three linear layers; elementwise ops, pooling and softmax are excluded.
pub fn count_macs(num_samples: usize) -> MacCount {
    let frames = dsp::frame_count(num_samples) as u64;
    let tokens = token_count(num_samples) as u64;
    let (c, k2) = (CHANNELS as u64, 9u64);
    let full = frames * N_MELS as u64;
    let half = tokens * POOLED_MELS as u64;
    let frontend = frames * (2 * N_BINS * N_FFT + N_BINS * N_MELS) as u64;
    let vgg = full * c * k2 + (BLOCKS_BEFORE_POOL as u64 - 1) * full * c * c * k2
        + (VGG_BLOCKS - BLOCKS_BEFORE_POOL) as u64 * half * c * c * k2
        + half * c * c;
    let d = TOKEN_DIM as u64;
    let pool_and_head = 2 * tokens * d * d + tokens * d + d * OUTPUTS as u64;
    MacCount {
        frontend,
        vgg,
        pool_and_head,
    }
}

/// Conv 3×3 (no bias) + BatchNorm; ReLU follows in the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct VggBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

/// Trainable (unfused) model.
#[derive(Debug, Clone, PartialEq)]
pub struct Wav2Small<T> {
    frontend: Frontend<T>,
    blocks: Vec<VggBlock<T>>,
    proj: Conv2d<T>,
    lin: Linear<T>,
    sof: Linear<T>,
    adv: Linear<T>,
    mode: Mode,
}

impl<T: Float> Default for Wav2Small<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Wav2Small<T> {
    /// Architecture with zero weights and identity batch norms, in train mode.
    pub fn new() -> Self {
        let blocks = (0..VGG_BLOCKS)
            .map(|i| {
                let cin = if i == 0 { 1 } else { CHANNELS };
                VggBlock {
                    conv: Conv2d::new(&format!("vgg.{i}.conv"), cin, CHANNELS, 3, false),
                    bn: BatchNorm2d::new(&format!("vgg.{i}.bn"), CHANNELS),
                }
            })
            .collect();
        Self {
            frontend: Frontend::new(),
            blocks,
            proj: Conv2d::new(&format!("vgg.{VGG_BLOCKS}"), CHANNELS, CHANNELS, 1, true),
            lin: Linear::new("lin", TOKEN_DIM, TOKEN_DIM),
            sof: Linear::new("sof", TOKEN_DIM, TOKEN_DIM),
            adv: Linear::new("adv", TOKEN_DIM, OUTPUTS),
            mode: Mode::Train,
        }
    }

    /// Freshly initialized model; deterministic in `seed`.
    pub fn init(seed: u64) -> Self {
        let mut m = Self::new();
        m.init_params(seed);
        m
    }

    /// Fan-in scaled uniform weights (`±√(6/fan_in)`, std `√(2/fan_in)`),
    /// zero biases, `γ = 1`, `β = 0`, running statistics reset.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kaiming = |p: &mut Param<T>, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            p.data_mut()
                .iter_mut()
                .for_each(|v| *v = T::lit(rng.random_range(-bound..bound)));
        };
        for block in &mut self.blocks {
            let fan_in = block.conv.in_channels() * 9;
            kaiming(&mut block.conv.weight, fan_in);
            block.bn = BatchNorm2d::new(&block.bn.gamma.name().replace(".gamma", ""), CHANNELS);
        }
        kaiming(&mut self.proj.weight, CHANNELS);
        for l in [&mut self.lin, &mut self.sof, &mut self.adv] {
            kaiming(&mut l.weight, TOKEN_DIM);
            l.bias.data_mut().fill(T::zero());
        }
        if let Some(b) = self.proj.bias.as_mut() {
            b.data_mut().fill(T::zero());
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn frontend(&self) -> &Frontend<T> {
        &self.frontend
    }

    pub fn blocks(&self) -> &[VggBlock<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [VggBlock<T>] {
        &mut self.blocks
    }

    pub fn proj(&self) -> &Conv2d<T> {
        &self.proj
    }

    pub fn lin(&self) -> &Linear<T> {
        &self.lin
    }

    pub fn sof(&self) -> &Linear<T> {
        &self.sof
    }

    pub fn adv(&self) -> &Linear<T> {
        &self.adv
    }

    pub fn adv_mut(&mut self) -> &mut Linear<T> {
        &mut self.adv
    }

    pub fn cast<U: Float>(&self) -> Wav2Small<U> {
        Wav2Small {
            frontend: self.frontend.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| VggBlock {
                    conv: b.conv.cast(),
                    bn: b.bn.cast(),
                })
                .collect(),
            proj: self.proj.cast(),
            lin: self.lin.cast(),
            sof: self.sof.cast(),
            adv: self.adv.cast(),
            mode: self.mode,
        }
    }

    /// Parameters updated by SGD, in a fixed order.
    pub fn trainable_params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend([&b.conv.weight, &b.bn.gamma, &b.bn.beta]);
        }
        v.push(&self.proj.weight);
        v.extend(self.proj.bias.as_ref());
        for l in [&self.lin, &self.sof, &self.adv] {
            v.extend([&l.weight, &l.bias]);
        }
        v
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.extend([&mut b.conv.weight, &mut b.bn.gamma, &mut b.bn.beta]);
        }
        v.push(&mut self.proj.weight);
        v.extend(self.proj.bias.as_mut());
        for l in [&mut self.lin, &mut self.sof, &mut self.adv] {
            v.extend([&mut l.weight, &mut l.bias]);
        }
        v
    }

    /// Everything that is serialized: frontend operators, trainable
    /// parameters and batch-norm running statistics.
    pub fn state(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.frontend.params().into_iter().collect();
        v.extend(self.trainable_params());
        for b in &self.blocks {
            v.extend([&b.bn.running_mean, &b.bn.running_var]);
        }
        v
    }

    pub fn state_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.frontend.params_mut().into_iter().collect();
        for b in &mut self.blocks {
            v.extend([
                &mut b.conv.weight,
                &mut b.bn.gamma,
                &mut b.bn.beta,
                &mut b.bn.running_mean,
                &mut b.bn.running_var,
            ]);
        }
        v.push(&mut self.proj.weight);
        v.extend(self.proj.bias.as_mut());
        for l in [&mut self.lin, &mut self.sof, &mut self.adv] {
            v.extend([&mut l.weight, &mut l.bias]);
        }
        v
    }

    /// Trainable parameter breakdown; with `fused`, counts the network after
    /// folding each batch norm into its convolution.
    pub fn param_breakdown(&self, fused: bool) -> ParamBreakdown {
        let vgg = if fused {
            self.blocks.iter().map(|b| b.conv.param_count() + CHANNELS).sum::<usize>() + self.proj.param_count()
        } else {
            self.blocks
                .iter()
                .map(|b| b.conv.param_count() + b.bn.param_count())
                .sum::<usize>()
                + self.proj.param_count()
        };
        ParamBreakdown {
            frontend: self.frontend.param_count(),
            vgg,
            lin: self.lin.param_count(),
            sof: self.sof.param_count(),
            adv: self.adv.param_count(),
        }
    }

    pub fn count_params(&self, fused: bool, include_frontend: bool) -> usize {
        let b = self.param_breakdown(fused);
        b.total() - if include_frontend { 0 } else { b.frontend }
    }

    /// Stacks equal-length waveforms into a `(batch, 1, frames, 26)` log-mel tensor.
    pub fn log_mel_batch(&self, waves: &[Waveform]) -> Result<Tensor4<T>> {
        log_mel_batch(&self.frontend, waves)
    }

    fn vgg_eval(&self, mut x: Tensor4<T>) -> Result<Tensor4<T>> {
        for (i, block) in self.blocks.iter().enumerate() {
            if i == BLOCKS_BEFORE_POOL {
                x = maxpool2d(&x).0;
            }
            let y = block.conv.forward(&x)?;
            let mut y = match self.mode {
                Mode::Eval => block.bn.forward_eval(&y)?,
                Mode::Train => block.bn.forward_train(&y)?.0,
            };
            y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
            x = y;
        }
        self.proj.forward(&x)
    }

    /// Predictions for a batch of equal-length waveforms, `batch × 3`.
    ///
    /// Eval mode uses running statistics; train mode uses batch statistics
    /// without touching the running estimates.
    pub fn forward_batch(&self, waves: &[Waveform]) -> Result<Matrix<T>> {
        let x = self.log_mel_batch(waves)?;
        let x = self.vgg_eval(x)?;
        head(&to_tokens(&x), waves.len(), &self.sof, &self.lin, &self.adv)
    }

    pub fn forward(&self, w: &Waveform) -> Result<AdvTriple> {
        let out = self.forward_batch(std::slice::from_ref(w))?;
        Ok(row_to_triple(&out, 0))
    }

    /// Pipeline halted after token vectorization.
    pub fn forward_tokens(&self, w: &Waveform) -> Result<TokenMatrix<T>> {
        let x = self.log_mel_batch(std::slice::from_ref(w))?;
        Ok(TokenMatrix {
            values: to_tokens(&self.vgg_eval(x)?),
        })
    }

    /// Training forward pass recorded on `tape`. Batch statistics are
    /// returned rather than applied so a failed step leaves the model intact.
    pub fn forward_recorded(&self, waves: &[Waveform], tape: &mut GradTape<T>) -> Result<(Matrix<T>, Vec<BatchStats<T>>)> {
        let x = self.log_mel_batch(waves)?;
        let mut stats = Vec::with_capacity(VGG_BLOCKS);
        let mut x = Rc::new(x);
        for (i, block) in self.blocks.iter().enumerate() {
            if i == BLOCKS_BEFORE_POOL {
                x = Rc::new(tape.maxpool2d(&x));
            }
            let y = tape.conv2d(&block.conv, x, i > 0)?;
            let (y, s) = tape.batchnorm2d(&block.bn, &y)?;
            stats.push(s);
            x = tape.relu(y);
        }
        let y = tape.conv2d(&self.proj, x, true)?;
        let tokens = tape.tokens(&y);
        let pooled = tape.attention_pool(&self.sof, &self.lin, tokens, waves.len())?;
        let out = tape.linear(&self.adv, pooled)?;
        Ok((out, stats))
    }

    /// Folds batch statistics from [`Self::forward_recorded`] into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        if stats.len() != self.blocks.len() {
            return Err(Error::invalid(format!(
                "expected {} batch-stat sets, got {}",
                self.blocks.len(),
                stats.len()
            )));
        }
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            b.bn.update_running(s);
        }
        Ok(())
    }

    /// Sets every batch norm's running statistics to the exact statistics of
    /// `waves` (equal lengths), layer by layer, and switches to eval mode.
    /// Afterwards eval-mode output on `waves` equals train-mode output on the
    /// whole set as one batch. Processes `chunk` waveforms at a time.
    pub fn calibrate_batch_norm(&mut self, waves: &[Waveform], chunk: usize) -> Result<()> {
        let inputs: Vec<Tensor4<T>> = waves
            .chunks(chunk.max(1))
            .map(|c| self.log_mel_batch(c))
            .collect::<Result<_>>()?;
        self.mode = Mode::Eval;
        for i in 0..self.blocks.len() {
            let mut sum = vec![0.0f64; CHANNELS];
            let mut sq = vec![0.0f64; CHANNELS];
            let mut count = 0usize;
            let mut pre = Vec::with_capacity(inputs.len());
            for x in &inputs {
                let mut h = x.clone();
                for (j, block) in self.blocks[..i].iter().enumerate() {
                    if j == BLOCKS_BEFORE_POOL {
                        h = maxpool2d(&h).0;
                    }
                    h = nn::relu(&block.bn.forward_eval(&block.conv.forward(&h)?)?);
                }
                if i == BLOCKS_BEFORE_POOL {
                    h = maxpool2d(&h).0;
                }
                let y = self.blocks[i].conv.forward(&h)?;
                count += y.batch() * y.height() * y.width();
                for b in 0..y.batch() {
                    for (c, s) in sum.iter_mut().enumerate() {
                        *s += y.plane(b, c).iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                }
                pre.push(y);
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            for y in &pre {
                for b in 0..y.batch() {
                    for (c, q) in sq.iter_mut().enumerate() {
                        *q += y.plane(b, c).iter().map(|v| (v.as_f64() - mean[c]).powi(2)).sum::<f64>();
                    }
                }
            }
            let bn = &mut self.blocks[i].bn;
            for c in 0..CHANNELS {
                bn.running_mean.data_mut()[c] = T::lit(mean[c]);
                bn.running_var.data_mut()[c] = T::lit(sq[c] / count as f64);
            }
        }
        Ok(())
    }

    /// Inference network with batch norm folded into the convolutions.
    pub fn fused(&self) -> Result<FusedWav2Small<T>> {
        if self.mode != Mode::Eval {
            return Err(Error::State("fusion requires eval-mode batch-norm statistics".into()));
        }
        let mut convs = Vec::with_capacity(VGG_BLOCKS + 1);
        for (i, b) in self.blocks.iter().enumerate() {
            convs.push(fuse_conv_bn_relu(&format!("vgg.{i}"), &b.conv, &b.bn)?);
        }
        convs.push(FusedConv {
            conv: self.proj.clone(),
            relu: false,
        });
        FusedWav2Small::from_parts(self.frontend.clone(), convs, self.lin.clone(), self.sof.clone(), self.adv.clone())
    }
}

impl<T: Float> AdvPredictor for Wav2Small<T> {
    fn predict(&self, w: &Waveform) -> Result<AdvTriple> {
        self.forward(w)
    }
}

fn log_mel_batch<T: Float>(frontend: &Frontend<T>, waves: &[Waveform]) -> Result<Tensor4<T>> {
    let first = waves.first().ok_or_else(|| Error::invalid("empty batch"))?;
    if let Some(w) = waves.iter().find(|w| w.len() != first.len()) {
        return Err(Error::invalid(format!(
            "batch waveforms must share a length ({} vs {})",
            first.len(),
            w.len()
        )));
    }
    let frames = dsp::frame_count(first.len());
    let mut data = Vec::with_capacity(waves.len() * frames * N_MELS);
    for w in waves {
        data.extend_from_slice(frontend.log_mel(w)?.values().data());
    }
    Tensor4::new([waves.len(), 1, frames, N_MELS], data)
}

fn head<T: Float>(tokens: &Matrix<T>, batch: usize, sof: &Linear<T>, lin: &Linear<T>, adv: &Linear<T>) -> Result<Matrix<T>> {
    let (pooled, _) = attention_pool(tokens, batch, sof, lin)?;
    adv.forward(&pooled)
}

fn row_to_triple<T: Float>(m: &Matrix<T>, r: usize) -> AdvTriple {
    let row = m.row(r);
    AdvTriple::new(row[0].as_f64(), row[1].as_f64(), row[2].as_f64())
}

/// Inference network: every conv+bn+relu collapsed into one biased conv.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedWav2Small<T> {
    frontend: Frontend<T>,
    convs: Vec<FusedConv<T>>,
    lin: Linear<T>,
    sof: Linear<T>,
    adv: Linear<T>,
}

impl<T: Float> FusedWav2Small<T> {
    pub fn from_parts(
        frontend: Frontend<T>,
        convs: Vec<FusedConv<T>>,
        lin: Linear<T>,
        sof: Linear<T>,
        adv: Linear<T>,
    ) -> Result<Self> {
        if convs.len() != VGG_BLOCKS + 1 {
            return Err(Error::invalid(format!("expected {} fused convs, got {}", VGG_BLOCKS + 1, convs.len())));
        }
        for (i, c) in convs.iter().enumerate() {
            let (cin, kernel) = match i {
                0 => (1, 3),
                VGG_BLOCKS => (CHANNELS, 1),
                _ => (CHANNELS, 3),
            };
            if c.conv.in_channels() != cin || c.conv.out_channels() != CHANNELS || c.conv.kernel() != kernel {
                return Err(Error::invalid(format!("fused conv {i} has weight shape {:?}", c.conv.weight.shape())));
            }
        }
        for (l, i, o) in [(&lin, TOKEN_DIM, TOKEN_DIM), (&sof, TOKEN_DIM, TOKEN_DIM), (&adv, TOKEN_DIM, OUTPUTS)] {
            if l.in_features() != i || l.out_features() != o {
                return Err(Error::invalid(format!("{} has shape {:?}", l.weight.name(), l.weight.shape())));
            }
        }
        Ok(Self {
            frontend,
            convs,
            lin,
            sof,
            adv,
        })
    }

    pub fn frontend(&self) -> &Frontend<T> {
        &self.frontend
    }

    pub fn convs(&self) -> &[FusedConv<T>] {
        &self.convs
    }

    pub fn adv(&self) -> &Linear<T> {
        &self.adv
    }

    pub fn cast<U: Float>(&self) -> FusedWav2Small<U> {
        FusedWav2Small {
            frontend: self.frontend.cast(),
            convs: self.convs.iter().map(FusedConv::cast).collect(),
            lin: self.lin.cast(),
            sof: self.sof.cast(),
            adv: self.adv.cast(),
        }
    }

    pub fn state(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.frontend.params().into_iter().collect();
        for c in &self.convs {
            v.push(&c.conv.weight);
            v.extend(c.conv.bias.as_ref());
        }
        for l in [&self.lin, &self.sof, &self.adv] {
            v.extend([&l.weight, &l.bias]);
        }
        v
    }

    pub fn state_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.frontend.params_mut().into_iter().collect();
        for c in &mut self.convs {
            v.push(&mut c.conv.weight);
            v.extend(c.conv.bias.as_mut());
        }
        for l in [&mut self.lin, &mut self.sof, &mut self.adv] {
            v.extend([&mut l.weight, &mut l.bias]);
        }
        v
    }

    /// Correctly named and shaped network with placeholder values.
    pub fn template() -> Self {
        let mut m = Wav2Small::<T>::new();
        m.set_mode(Mode::Eval);
        m.fused().expect("eval-mode template fuses")
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        ParamBreakdown {
            frontend: self.frontend.param_count(),
            vgg: self.convs.iter().map(FusedConv::param_count).sum(),
            lin: self.lin.param_count(),
            sof: self.sof.param_count(),
            adv: self.adv.param_count(),
        }
    }

    pub fn count_params(&self, include_frontend: bool) -> usize {
        let b = self.param_breakdown();
        b.total() - if include_frontend { 0 } else { b.frontend }
    }

    fn vgg(&self, mut x: Tensor4<T>) -> Result<Tensor4<T>> {
        for (i, c) in self.convs.iter().enumerate() {
            if i == BLOCKS_BEFORE_POOL {
                x = nn::maxpool2d(&x).0;
            }
            x = c.forward(&x)?;
        }
        Ok(x)
    }

    pub fn forward_batch(&self, waves: &[Waveform]) -> Result<Matrix<T>> {
        let x = self.vgg(log_mel_batch(&self.frontend, waves)?)?;
        head(&to_tokens(&x), waves.len(), &self.sof, &self.lin, &self.adv)
    }

    pub fn forward(&self, w: &Waveform) -> Result<AdvTriple> {
        Ok(row_to_triple(&self.forward_batch(std::slice::from_ref(w))?, 0))
    }

    pub fn forward_tokens(&self, w: &Waveform) -> Result<TokenMatrix<T>> {
        let x = self.vgg(log_mel_batch(&self.frontend, std::slice::from_ref(w))?)?;
        Ok(TokenMatrix {
            values: to_tokens(&x),
        })
    }
}

impl<T: Float> AdvPredictor for FusedWav2Small<T> {
    fn predict(&self, w: &Waveform) -> Result<AdvTriple> {
        self.forward(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-0.5f32..0.5)).collect()).unwrap()
    }

    fn eval_model(seed: u64) -> Wav2Small<f32> {
        let mut m = Wav2Small::init(seed);
        m.set_mode(Mode::Eval);
        m
    }

    #[test]
    fn parameter_counts() {
        let m = Wav2Small::<f32>::init(0);
        let fused = m.param_breakdown(true);
        assert_eq!(
            fused,
            ParamBreakdown {
                frontend: 5082,
                vgg: 9516,
                lin: 28_730,
                sof: 28_730,
                adv: 510
            }
        );
        assert_eq!(m.count_params(true, true), 72_568);
        assert_eq!(m.count_params(false, false), 67_577);
        assert_eq!(m.count_params(false, true), 67_577 + 5082);
        assert_eq!(m.adv().param_count(), 510);
        assert_eq!(eval_model(0).fused().unwrap().count_params(true), 72_568);
    }

    #[test]
    fn token_counts() {
        assert_eq!(token_count(16_000), 251);
        assert_eq!(token_count(80_000), 1251);
        assert_eq!(token_count(6400), 101);
        let t = eval_model(1).forward_tokens(&noise(6400, 1)).unwrap();
        assert_eq!((t.tokens(), t.dim()), (101, 169));
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        assert_eq!(Wav2Small::<f32>::init(5), Wav2Small::<f32>::init(5));
        assert_ne!(Wav2Small::<f32>::init(5), Wav2Small::<f32>::init(6));
    }

    #[test]
    fn init_weight_scale_tracks_fan_in() {
        for seed in 0..10 {
            let m = Wav2Small::<f64>::init(seed);
            let mut layers: Vec<(&Param<f64>, usize)> = m.blocks().iter().map(|b| (&b.conv.weight, b.conv.in_channels() * 9)).collect();
            layers.push((&m.proj().weight, CHANNELS));
            layers.extend([(&m.lin().weight, TOKEN_DIM), (&m.sof().weight, TOKEN_DIM), (&m.adv().weight, TOKEN_DIM)]);
            for (p, fan_in) in layers {
                let n = p.len() as f64;
                let mean = p.data().iter().sum::<f64>() / n;
                let std = (p.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                let target = (2.0 / fan_in as f64).sqrt();
                assert!(std >= 0.5 * target && std <= 2.0 * target, "{}: {std} vs {target}", p.name());
            }
        }
    }

    #[test]
    fn zero_head_outputs_bias() {
        let mut m = eval_model(2);
        m.adv_mut().weight.data_mut().fill(0.0);
        m.adv_mut().bias.data_mut().copy_from_slice(&[0.25, 0.5, 0.75]);
        for seed in 0..3 {
            assert_eq!(m.forward(&noise(8000, seed)).unwrap(), AdvTriple::new(0.25, 0.5, 0.75));
        }
    }

    #[test]
    fn channel_ablation_zeroes_its_token_slice() {
        let mut m = eval_model(3);
        let c = 4;
        // zero the projection's output channel c
        let proj = &mut m.state_mut().into_iter().find(|p| p.name() == "vgg.7.weight").unwrap();
        proj.data_mut()[c * CHANNELS..(c + 1) * CHANNELS].fill(0.0);
        let t = m.forward_tokens(&noise(16_000, 4)).unwrap();
        assert_eq!(t.tokens(), 251);
        for i in 0..t.tokens() {
            let row = t.token(i);
            assert!(row[c * 13..c * 13 + 13].iter().all(|&v| v == 0.0));
        }
        let nonzero = (0..t.tokens()).any(|i| t.token(i)[..c * 13].iter().any(|&v| v != 0.0));
        assert!(nonzero);
    }

    #[test]
    fn fused_matches_unfused() {
        let mut m = Wav2Small::<f32>::init(7);
        // non-trivial running statistics
        let waves: Vec<Waveform> = (0..4).map(|s| noise(4000, 100 + s)).collect();
        let mut tape = GradTape::new();
        let (_, stats) = m.forward_recorded(&waves, &mut tape).unwrap();
        m.apply_batch_stats(&stats).unwrap();
        m.set_mode(Mode::Eval);
        let f = m.fused().unwrap();
        for seed in 0..3 {
            let w = noise(6000 + 1000 * seed as usize, seed);
            let (a, b) = (m.forward(&w).unwrap(), f.forward(&w).unwrap());
            for (x, y) in a.to_array().iter().zip(b.to_array()) {
                assert!((x - y).abs() < 1e-5, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn fusion_requires_eval_mode() {
        assert!(matches!(Wav2Small::<f32>::init(0).fused(), Err(Error::State(_))));
    }

    #[test]
    fn forward_is_deterministic_and_length_robust() {
        let m = eval_model(9).fused().unwrap();
        for len in [64, 6400, 16_000] {
            let w = noise(len, len as u64);
            let a = m.forward(&w).unwrap();
            assert!(a.is_finite());
            assert_eq!(a, m.forward(&w).unwrap());
        }
        assert!(m.forward(&noise(63, 0)).is_err());
    }

    #[test]
    fn mixed_length_batch_is_rejected() {
        let m = eval_model(0);
        assert!(m.forward_batch(&[noise(1000, 0), noise(1200, 1)]).is_err());
    }

    #[test]
    fn mac_count_five_seconds() {
        let macs = count_macs(80_000);
        assert!(macs.total() > 300_000_000 && macs.total() < 500_000_000, "{macs:?}");
    }
}
