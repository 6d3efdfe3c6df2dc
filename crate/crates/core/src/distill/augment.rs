//! Training-time audio augmentation: mixup, cyclic rotation, band drop and
//! a shout proxy, chained into a deterministic sample stream.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::distill::corpus::CorpusBuckets;
use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub mix_coeff_primary: f64,
    pub mix_coeff_secondary: f64,
    pub min_excerpt_secs: f64,
    pub max_excerpt_secs: f64,
    /// Relative weights of the general-sound, speech and ambient buckets.
    pub bucket_weights: [f64; 3],
    pub p_rotate: f64,
    pub p_band_drop: f64,
    pub p_shout: f64,
    pub band_drop_min: usize,
    pub band_drop_max: usize,
    pub shout_max_intensity: f64,
    #[serde(rename = "augmentation_seed")]
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            mix_coeff_primary: 0.64,
            mix_coeff_secondary: 0.41,
            min_excerpt_secs: 0.4,
            max_excerpt_secs: 12.0,
            bucket_weights: [1.0; 3],
            p_rotate: 0.5,
            p_band_drop: 0.5,
            p_shout: 0.5,
            band_drop_min: 1,
            band_drop_max: 8,
            shout_max_intensity: 1.0,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.min_excerpt_secs > 0.0 && self.min_excerpt_secs <= self.max_excerpt_secs) {
            return bad("excerpt range must satisfy 0 < min <= max");
        }
        if self.excerpt_range().0 < crate::dsp::MIN_SAMPLES {
            return bad("minimum excerpt is shorter than one analysis frame");
        }
        if self.bucket_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.bucket_weights.iter().sum::<f64>() <= 0.0 {
            return bad("bucket weights must be non-negative with a positive sum");
        }
        for p in [self.p_rotate, self.p_band_drop, self.p_shout] {
            if !(0.0..=1.0).contains(&p) {
                return bad("transform probabilities must lie in [0, 1]");
            }
        }
        if self.band_drop_min == 0 || self.band_drop_min > self.band_drop_max || self.band_drop_max >= BANDS {
            return bad("band drop count range must satisfy 1 <= min <= max < 32");
        }
        if !(0.0..=1.0).contains(&self.shout_max_intensity) {
            return bad("shout intensity must lie in [0, 1]");
        }
        Ok(())
    }

    /// Excerpt length bounds in samples, inclusive.
    pub fn excerpt_range(&self) -> (usize, usize) {
        let sr = SAMPLE_RATE as f64;
        ((self.min_excerpt_secs * sr).round() as usize, (self.max_excerpt_secs * sr).round() as usize)
    }
}

/// `primary·a1 + secondary·a2`, with `a2` looped or cropped (at a random
/// offset) to `a1`'s length. No clipping.
pub fn mixup(a1: &Waveform, a2: &Waveform, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Result<Waveform> {
    let a2 = fit_length(a2, a1.len(), rng);
    let (p, s) = (cfg.mix_coeff_primary as f32, cfg.mix_coeff_secondary as f32);
    Waveform::new(a1.samples().iter().zip(&a2).map(|(x, y)| p * x + s * y).collect())
}

/// Loops `w` if shorter than `len`, else crops a random window.
pub fn fit_length(w: &Waveform, len: usize, rng: &mut impl Rng) -> Vec<f32> {
    let s = w.samples();
    if s.len() >= len {
        let start = rng.random_range(0..=s.len() - len);
        s[start..start + len].to_vec()
    } else {
        s.iter().copied().cycle().take(len).collect()
    }
}

/// Circular shift to the right by `shift` samples (modulo the length).
pub fn cyclic_rotate(w: &Waveform, shift: usize) -> Waveform {
    let mut v = w.samples().to_vec();
    let n = v.len();
    v.rotate_right(shift % n);
    Waveform::new(v).expect("rotation preserves length")
}

pub const BAND_DROP_FFT: usize = 1024;
pub const BAND_DROP_HOP: usize = 256;
/// 250 Hz bands over 0–8 kHz.
pub const BANDS: usize = 32;
pub const BAND_HZ: f64 = 250.0;

/// FFT bin range of band `b` (the Nyquist bin belongs to the last band).
pub fn band_bins(b: usize) -> std::ops::Range<usize> {
    let per = BAND_DROP_FFT / 2 / BANDS;
    let end = if b + 1 == BANDS { BAND_DROP_FFT / 2 + 1 } else { (b + 1) * per };
    b * per..end
}

/// Removes the listed 250 Hz bands in the STFT domain.
///
/// Each frame's remaining bins are scaled up to the frame's original energy;
/// after overlap-add a single gain restores the input's total energy.
pub fn band_drop(w: &Waveform, bands: &[usize]) -> Result<Waveform> {
    let mut drop = [false; BANDS];
    for &b in bands {
        if b >= BANDS {
            return Err(Error::invalid(format!("band {b} out of range (0..{BANDS})")));
        }
        drop[b] = true;
    }
    if drop.iter().all(|&d| d) {
        return Err(Error::invalid("cannot drop every band"));
    }
    let (n, hop) = (BAND_DROP_FFT, BAND_DROP_HOP);
    let x: Vec<f64> = w.samples().iter().map(|&v| v as f64).collect();
    let len = x.len();
    let pad = n - hop;
    let frames = (len + pad).div_ceil(hop);
    let window: Vec<f64> = (0..n)
        .map(|i| (0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos()).sqrt())
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut out = vec![0.0; len];
    let mut envelope = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let dropped_bin = |k: usize| drop[(0..BANDS).find(|&b| band_bins(b).contains(&k)).expect("bin in a band")];
    let mask: Vec<bool> = (0..=n / 2).map(dropped_bin).collect();
    // one-sided energy weight
    let weight = |k: usize| if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
    for f in 0..frames {
        let start = (f * hop) as isize - pad as isize;
        for (i, b) in buf.iter_mut().enumerate() {
            let t = start + i as isize;
            let v = if t >= 0 && (t as usize) < len { x[t as usize] } else { 0.0 };
            *b = Complex64::new(v * window[i], 0.0);
        }
        fwd.process(&mut buf);
        let total: f64 = (0..=n / 2).map(|k| weight(k) * buf[k].norm_sqr()).sum();
        let kept: f64 = (0..=n / 2).filter(|&k| !mask[k]).map(|k| weight(k) * buf[k].norm_sqr()).sum();
        let gain = if kept > 0.0 { (total / kept).sqrt() } else { 0.0 };
        for k in 0..=n / 2 {
            let v = if mask[k] { Complex64::new(0.0, 0.0) } else { buf[k] * gain };
            buf[k] = v;
            if k > 0 && k < n / 2 {
                buf[n - k] = v.conj();
            }
        }
        inv.process(&mut buf);
        for (i, b) in buf.iter().enumerate() {
            let t = start + i as isize;
            if t >= 0 && (t as usize) < len {
                out[t as usize] += b.re / n as f64 * window[i];
                envelope[t as usize] += window[i] * window[i];
            }
        }
    }
    for (o, e) in out.iter_mut().zip(&envelope) {
        if *e > 1e-12 {
            *o /= e;
        }
    }
    let e_in: f64 = x.iter().map(|v| v * v).sum();
    let e_out: f64 = out.iter().map(|v| v * v).sum();
    let g = if e_out > 0.0 { (e_in / e_out).sqrt() } else { 0.0 };
    Waveform::new(out.iter().map(|v| (v * g) as f32).collect())
}

/// Stand-in for a shouted-speech transform: a high-frequency tilt
/// `x + a·(x − x_prev)` with `a = 0.5·I`, a gain of `12·I` dB and a
/// soft-knee compressor above 0.5 with ratio `(g + 1) / 2`.
///
/// Intensity 0 returns the input unchanged; output RMS never falls below
/// the input's.
pub fn shout_proxy(w: &Waveform, intensity: f64) -> Waveform {
    let i = intensity.clamp(0.0, 1.0);
    if i == 0.0 {
        return w.clone();
    }
    let a = 0.5 * i;
    let g = 10f64.powf(12.0 * i / 20.0);
    let ratio = (g + 1.0) / 2.0;
    const THRESHOLD: f64 = 0.5;
    let mut prev = 0.0;
    let out = w
        .samples()
        .iter()
        .map(|&s| {
            let x = s as f64;
            let tilted = x + a * (x - prev);
            prev = x;
            let u = g * tilted.abs();
            let c = if u <= THRESHOLD { u } else { THRESHOLD + (u - THRESHOLD) / ratio };
            (c * tilted.signum()) as f32
        })
        .collect();
    Waveform::new(out).expect("length preserved")
}

/// Which secondary bucket supplied `audio₂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SecondaryBucket {
    General,
    Speech,
    Ambient,
}

/// What was applied to one training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub bucket: SecondaryBucket,
    pub rotate: Option<usize>,
    pub dropped_bands: Vec<usize>,
    pub shout: Option<f64>,
}

/// Excerpt → mixup → optional rotation, band drop and shout.
pub fn make_training_sample(buckets: &CorpusBuckets, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Result<Waveform> {
    let (lo, hi) = cfg.excerpt_range();
    let len = rng.random_range(lo..=hi);
    Ok(make_sample_with_length(buckets, cfg, len, rng)?.0)
}

pub fn make_sample_with_length(
    buckets: &CorpusBuckets,
    cfg: &AugmentationConfig,
    len: usize,
    rng: &mut impl Rng,
) -> Result<(Waveform, SampleTrace)> {
    buckets.validate()?;
    let src = &buckets.primary[rng.random_range(0..buckets.primary.len())];
    let a1 = Waveform::new(fit_length(src, len, rng))?;
    let total: f64 = cfg.bucket_weights.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut which = 2;
    for (k, w) in cfg.bucket_weights.iter().enumerate() {
        if pick < *w {
            which = k;
            break;
        }
        pick -= w;
    }
    let (bucket, pool) = match which {
        0 => (SecondaryBucket::General, &buckets.general),
        1 => (SecondaryBucket::Speech, &buckets.speech),
        _ => (SecondaryBucket::Ambient, &buckets.ambient),
    };
    let a2 = &pool[rng.random_range(0..pool.len())];
    let mut w = mixup(&a1, a2, cfg, rng)?;
    let mut trace = SampleTrace {
        bucket,
        rotate: None,
        dropped_bands: Vec::new(),
        shout: None,
    };
    if rng.random_bool(cfg.p_rotate) {
        let shift = rng.random_range(0..len);
        w = cyclic_rotate(&w, shift);
        trace.rotate = Some(shift);
    }
    if rng.random_bool(cfg.p_band_drop) {
        let count = rng.random_range(cfg.band_drop_min..=cfg.band_drop_max);
        let mut bands = rand::seq::index::sample(rng, BANDS, count).into_vec();
        bands.sort_unstable();
        w = band_drop(&w, &bands)?;
        trace.dropped_bands = bands;
    }
    if rng.random_bool(cfg.p_shout) && cfg.shout_max_intensity > 0.0 {
        let i = rng.random_range(0.0..cfg.shout_max_intensity);
        w = shout_proxy(&w, i);
        trace.shout = Some(i);
    }
    Ok((w, trace))
}

const LENGTH_STREAM_SALT: u64 = 0x6c65_6e67_7468;

/// Per-sample rng: depends only on the seed and the sample's global index.
pub fn sample_rng(seed: u64, counter: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(counter);
    r
}

/// Batch number `index`: one excerpt length for the whole batch, then one
/// independent rng stream per sample.
pub fn make_batch(buckets: &CorpusBuckets, cfg: &AugmentationConfig, index: u64, batch_size: usize) -> Result<Vec<Waveform>> {
    let (lo, hi) = cfg.excerpt_range();
    let mut lr = sample_rng(cfg.seed ^ LENGTH_STREAM_SALT, index);
    let len = lr.random_range(lo..=hi);
    (0..batch_size as u64)
        .map(|i| {
            let mut rng = sample_rng(cfg.seed, index * batch_size as u64 + i);
            make_sample_with_length(buckets, cfg, len, &mut rng).map(|s| s.0)
        })
        .collect()
}

/// Background producer of augmented batches over a bounded queue.
///
/// Batch `i` is always `make_batch(.., i, ..)`, so the stream does not depend
/// on scheduling.
pub struct BatchProducer {
    rx: std::sync::mpsc::Receiver<Result<Vec<Waveform>>>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl BatchProducer {
    pub fn spawn(
        buckets: Arc<CorpusBuckets>,
        cfg: AugmentationConfig,
        batch_size: usize,
        first_batch: u64,
        count: u64,
        capacity: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        buckets.validate()?;
        let (tx, rx) = std::sync::mpsc::sync_channel(capacity.max(1));
        let handle = std::thread::Builder::new()
            .name("batch-producer".into())
            .spawn(move || {
                for i in first_batch..first_batch + count {
                    if tx.send(make_batch(&buckets, &cfg, i, batch_size)).is_err() {
                        break;
                    }
                }
            })?;
        Ok(Self { rx, handle: Some(handle) })
    }
}

impl Iterator for BatchProducer {
    type Item = Result<Vec<Waveform>>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

impl Drop for BatchProducer {
    fn drop(&mut self) {
        // unblock a producer waiting on a full queue
        let (_tx, rx) = std::sync::mpsc::sync_channel(0);
        drop(std::mem::replace(&mut self.rx, rx));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
