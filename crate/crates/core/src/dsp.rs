//! LogMel frontend.
//!
//! Waveform normalization, centered STFT power spectrum and mel filterbank.
//! The STFT and filterbank are fixed linear operators (two `33 × 64` DFT
//! matrices with the analysis window folded in, and a `33 × 26` filterbank)
//! so they can be serialized and quantized together with the network.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::scalar::Float;
use crate::tensor::Matrix;

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 64;
pub const HOP: usize = 32;
pub const N_BINS: usize = N_FFT / 2 + 1;
pub const N_MELS: usize = 26;
/// Shortest accepted waveform; anything below one full frame is out of contract.
pub const MIN_SAMPLES: usize = N_FFT;
pub const VARIANCE_GUARD: f64 = 1e-7;
/// Clamp floor applied before `10·log10`.
pub const AMIN: f64 = 1e-10;

/// Mono 16 kHz audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform is empty"));
        }
        Ok(Self { samples })
    }

    /// Builds a waveform after checking the declared sample rate.
    pub fn with_rate(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::invalid(format!(
                "expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz"
            )));
        }
        Self::new(samples)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum()
    }

    pub fn rms(&self) -> f64 {
        (self.energy() / self.samples.len() as f64).sqrt()
    }
}

/// Number of STFT frames under centered framing.
pub fn frame_count(num_samples: usize) -> usize {
    num_samples / HOP + 1
}

/// Removes the mean, then divides by `sqrt(mean(x²) + 1e-7)` of the centered signal.
pub fn normalize_waveform(w: &Waveform) -> Waveform {
    let n = w.len() as f64;
    let mean = w.samples.iter().map(|&s| s as f64).sum::<f64>() / n;
    let centered: Vec<f64> = w.samples.iter().map(|&s| s as f64 - mean).collect();
    let variance = centered.iter().map(|v| v * v).sum::<f64>() / n + VARIANCE_GUARD;
    let inv = 1.0 / variance.sqrt();
    Waveform {
        samples: centered.into_iter().map(|v| (v * inv) as f32).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// Periodic Hann, the frontend default.
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filterbank mapping the 33 one-sided bins to 26 bands.
///
/// Each weight is the mean of the band's unit-peak triangle over the
/// frequency interval covered by the FFT bin (bin center ± half a bin).
/// With only 250 Hz of resolution per bin, point-sampling the triangles at bin
/// centers would leave the two lowest bands empty.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank<T> {
    /// `N_BINS × N_MELS`, row-major.
    weights: Param<T>,
}

impl<T: Float> MelFilterbank<T> {
    pub fn htk() -> Self {
        let weights = htk_weights(N_FFT, SAMPLE_RATE as f64, N_MELS)
            .into_iter()
            .map(T::lit)
            .collect();
        Self::from_weights(weights).expect("filterbank shape")
    }

    pub fn from_weights(weights: Vec<T>) -> Result<Self> {
        if weights.len() != N_BINS * N_MELS {
            return Err(Error::invalid(format!(
                "filterbank needs {} weights, got {}",
                N_BINS * N_MELS,
                weights.len()
            )));
        }
        Ok(Self {
            weights: Param::from_data(FILTERBANK_NAME, &[N_BINS, N_MELS], weights)?,
        })
    }

    pub fn weights(&self) -> &[T] {
        self.weights.data()
    }

    pub fn weight(&self, bin: usize, mel: usize) -> T {
        self.weights.data()[bin * N_MELS + mel]
    }

    pub fn param(&self) -> &Param<T> {
        &self.weights
    }

    pub fn param_mut(&mut self) -> &mut Param<T> {
        &mut self.weights
    }

    pub fn cast<U: Float>(&self) -> MelFilterbank<U> {
        MelFilterbank {
            weights: self.weights.cast(),
        }
    }
}

fn htk_weights(n_fft: usize, sample_rate: f64, n_mels: usize) -> Vec<f64> {
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate / n_fft as f64;
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut weights = vec![0.0; n_bins * n_mels];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        // antiderivative of the unit-peak triangle
        let area = |f: f64| -> f64 {
            if f <= lo {
                0.0
            } else if f <= center {
                (f - lo).powi(2) / (2.0 * (center - lo))
            } else if f <= hi {
                (center - lo) / 2.0 + ((hi - center).powi(2) - (hi - f).powi(2)) / (2.0 * (hi - center))
            } else {
                (hi - lo) / 2.0
            }
        };
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = (area(f + bin_hz / 2.0) - area(f - bin_hz / 2.0)) / bin_hz;
            weights[k * n_mels + m] = w.max(0.0);
        }
    }
    weights
}

/// Log-mel energies, `frames × 26`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram<T> {
    values: Matrix<T>,
}

impl<T: Float> LogMelSpectrogram<T> {
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.values
    }
}

/// Fixed-operator frontend: DFT matrices (window folded in) plus filterbank.
#[derive(Debug, Clone, PartialEq)]
pub struct Frontend<T> {
    /// `N_BINS × N_FFT`, row-major.
    dft_real: Param<T>,
    dft_imag: Param<T>,
    filterbank: MelFilterbank<T>,
}

pub const DFT_REAL_NAME: &str = "frontend.dft_real";
pub const DFT_IMAG_NAME: &str = "frontend.dft_imag";
pub const FILTERBANK_NAME: &str = "frontend.mel_filterbank";

impl<T: Float> Default for Frontend<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Frontend<T> {
    pub fn new() -> Self {
        Self::with_window(Window::Hann)
    }

    pub fn with_window(window: Window) -> Self {
        let w = window.coefficients(N_FFT);
        let mut dft_real = Vec::with_capacity(N_BINS * N_FFT);
        let mut dft_imag = Vec::with_capacity(N_BINS * N_FFT);
        for k in 0..N_BINS {
            for (n, wn) in w.iter().enumerate() {
                // reduce k·n mod N before the trig call for exact symmetry
                let phase = 2.0 * std::f64::consts::PI * ((k * n) % N_FFT) as f64 / N_FFT as f64;
                dft_real.push(T::lit(wn * phase.cos()));
                dft_imag.push(T::lit(-wn * phase.sin()));
            }
        }
        Self::from_parts(dft_real, dft_imag, MelFilterbank::htk()).expect("dft shape")
    }

    pub fn from_parts(dft_real: Vec<T>, dft_imag: Vec<T>, filterbank: MelFilterbank<T>) -> Result<Self> {
        let n = N_BINS * N_FFT;
        if dft_real.len() != n || dft_imag.len() != n {
            return Err(Error::invalid(format!("dft matrices need {n} values each")));
        }
        Ok(Self {
            dft_real: Param::from_data(DFT_REAL_NAME, &[N_BINS, N_FFT], dft_real)?,
            dft_imag: Param::from_data(DFT_IMAG_NAME, &[N_BINS, N_FFT], dft_imag)?,
            filterbank,
        })
    }

    pub fn dft_real(&self) -> &[T] {
        self.dft_real.data()
    }

    pub fn dft_imag(&self) -> &[T] {
        self.dft_imag.data()
    }

    /// The three fixed operators as named parameters.
    pub fn params(&self) -> [&Param<T>; 3] {
        [&self.dft_real, &self.dft_imag, &self.filterbank.weights]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 3] {
        [&mut self.dft_real, &mut self.dft_imag, &mut self.filterbank.weights]
    }

    pub fn filterbank(&self) -> &MelFilterbank<T> {
        &self.filterbank
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> Frontend<U> {
        Frontend {
            dft_real: self.dft_real.cast(),
            dft_imag: self.dft_imag.cast(),
            filterbank: self.filterbank.cast(),
        }
    }

    /// One-sided power spectrum of each centered, reflect-padded frame: `frames × 33`.
    pub fn stft_power(&self, w: &Waveform) -> Result<Matrix<T>> {
        let len = w.len();
        if len < MIN_SAMPLES {
            return Err(Error::invalid(format!(
                "waveform has {len} samples, at least {MIN_SAMPLES} required"
            )));
        }
        let frames = frame_count(len);
        let pad = (N_FFT / 2) as isize;
        let last = len as isize - 1;
        let s = w.samples();
        let mut framed = vec![T::zero(); frames * N_FFT];
        for f in 0..frames {
            let row = &mut framed[f * N_FFT..(f + 1) * N_FFT];
            for (n, slot) in row.iter_mut().enumerate() {
                let mut j = (f * HOP + n) as isize - pad;
                if j < 0 {
                    j = -j;
                } else if j > last {
                    j = 2 * last - j;
                }
                *slot = T::lit(s[j as usize] as f64);
            }
        }
        let mut re = vec![T::zero(); frames * N_BINS];
        let mut im = vec![T::zero(); frames * N_BINS];
        // frames × 64 times (33 × 64)ᵀ
        T::gemm(frames, N_FFT, N_BINS, &framed, (N_FFT, 1), self.dft_real.data(), (1, N_FFT), T::zero(), &mut re, (N_BINS, 1));
        T::gemm(frames, N_FFT, N_BINS, &framed, (N_FFT, 1), self.dft_imag.data(), (1, N_FFT), T::zero(), &mut im, (N_BINS, 1));
        let power = re.iter().zip(&im).map(|(&r, &i)| r * r + i * i).collect();
        Matrix::new(frames, N_BINS, power)
    }

    /// `10·log10(max(power · filterbank, 1e-10))`.
    pub fn apply_mel_log(&self, power: &Matrix<T>) -> Result<LogMelSpectrogram<T>> {
        apply_mel_log_with(power, &self.filterbank)
    }

    /// Normalize, STFT, mel, log: the model's input representation.
    pub fn log_mel(&self, w: &Waveform) -> Result<LogMelSpectrogram<T>> {
        let normalized = normalize_waveform(w);
        let power = self.stft_power(&normalized)?;
        self.apply_mel_log(&power)
    }
}

fn apply_mel_log_with<T: Float>(power: &Matrix<T>, fb: &MelFilterbank<T>) -> Result<LogMelSpectrogram<T>> {
    if power.cols() != N_BINS {
        return Err(Error::invalid(format!(
            "power spectrum has {} bins, expected {N_BINS}",
            power.cols()
        )));
    }
    let frames = power.rows();
    let mut mel = vec![T::zero(); frames * N_MELS];
    T::gemm(frames, N_BINS, N_MELS, power.data(), (N_BINS, 1), fb.weights(), (N_MELS, 1), T::zero(), &mut mel, (N_MELS, 1));
    let amin = T::lit(AMIN);
    let ten = T::lit(10.0);
    for v in mel.iter_mut() {
        *v = ten * v.max(amin).log10();
    }
    Ok(LogMelSpectrogram {
        values: Matrix::new(frames, N_MELS, mel)?,
    })
}

fn default_frontend() -> &'static Frontend<f32> {
    static FRONTEND: OnceLock<Frontend<f32>> = OnceLock::new();
    FRONTEND.get_or_init(Frontend::new)
}

/// Power spectrogram with the default Hann frontend.
pub fn stft_power(w: &Waveform) -> Result<Matrix<f32>> {
    default_frontend().stft_power(w)
}

pub fn apply_mel_log(power: &Matrix<f32>, fb: &MelFilterbank<f32>) -> Result<LogMelSpectrogram<f32>> {
    apply_mel_log_with(power, fb)
}

/// Full frontend with default operators.
pub fn frontend(w: &Waveform) -> Result<LogMelSpectrogram<f32>> {
    default_frontend().log_mel(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(v: &[f32]) -> Waveform {
        Waveform::new(v.to_vec()).unwrap()
    }

    fn random_wave(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        wave(&(0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>())
    }

    /// Independent O(n²) DFT power of one frame, f64.
    fn naive_power(frame: &[f64], window: &[f64]) -> Vec<f64> {
        let n = frame.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, (&x, &w)) in frame.iter().zip(window).enumerate() {
                    let a = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                    re += x * w * a.cos();
                    im += x * w * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn rejects_empty_and_wrong_rate() {
        assert!(Waveform::new(vec![]).is_err());
        assert!(Waveform::with_rate(vec![0.0; 10], 44_100).is_err());
        assert!(Waveform::with_rate(vec![0.0; 10], 16_000).is_ok());
    }

    #[test]
    fn normalize_constant_signal_is_zero() {
        let out = normalize_waveform(&wave(&[0.3, 0.3, 0.3, 0.3]));
        assert!(out.samples().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn normalize_unit_signal_is_nearly_unchanged() {
        let out = normalize_waveform(&wave(&[1.0, -1.0, 1.0, -1.0]));
        let s = (1.0f64 / (1.0 + 1e-7f64).sqrt()) as f32;
        assert_eq!(out.samples(), &[s, -s, s, -s]);
    }

    #[test]
    fn normalize_random_has_zero_mean_unit_variance() {
        let out = normalize_waveform(&random_wave(5000, 3));
        let n = out.len() as f64;
        let mean = out.samples().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = out.samples().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }

    #[test]
    fn stft_frame_counts() {
        for (len, frames) in [(16_000, 501), (80_000, 2501), (64, 3), (6400, 201)] {
            let p = stft_power(&random_wave(len, 1)).unwrap();
            assert_eq!((p.rows(), p.cols()), (frames, N_BINS));
        }
    }

    #[test]
    fn stft_rejects_short_input() {
        assert!(stft_power(&wave(&[0.1; 63])).is_err());
    }

    #[test]
    fn stft_of_silence_is_zero() {
        let p = stft_power(&wave(&[0.0; 1000])).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cosine_at_bin_eight_matches_naive_dft() {
        let len = 1024;
        let x: Vec<f32> = (0..len)
            .map(|t| (2.0 * std::f64::consts::PI * 2000.0 * t as f64 / 16_000.0).cos() as f32)
            .collect();
        let p = stft_power(&wave(&x)).unwrap();
        let hann = Window::Hann.coefficients(N_FFT);
        // interior frame, no padding involved
        let f = 10;
        let frame: Vec<f64> = (0..N_FFT).map(|n| x[f * HOP + n - N_FFT / 2] as f64).collect();
        let want = naive_power(&frame, &hann);
        let peak = want.iter().cloned().fold(0.0, f64::max);
        for (k, w) in want.iter().enumerate() {
            assert!((p.at(f, k) as f64 - w).abs() <= 1e-4 * peak, "bin {k}");
        }
        let argmax = (0..N_BINS).max_by(|&a, &b| p.at(f, a).total_cmp(&p.at(f, b))).unwrap();
        assert_eq!(argmax, 8);
    }

    #[test]
    fn stft_agrees_with_naive_dft_on_random_frames() {
        let x = random_wave(64 * 120, 11);
        let p = stft_power(&x).unwrap();
        let hann = Window::Hann.coefficients(N_FFT);
        for f in 1..=100 {
            let frame: Vec<f64> = (0..N_FFT)
                .map(|n| x.samples()[f * HOP + n - N_FFT / 2] as f64)
                .collect();
            let want = naive_power(&frame, &hann);
            let scale = want.iter().cloned().fold(0.0, f64::max);
            for (k, w) in want.iter().enumerate() {
                assert!((p.at(f, k) as f64 - w).abs() <= 1e-4 * scale, "frame {f} bin {k}");
            }
        }
    }

    #[test]
    fn parseval_with_rectangular_window() {
        let fe = Frontend::<f64>::with_window(Window::Rectangular);
        let x = random_wave(640, 5);
        let p = fe.stft_power(&x).unwrap();
        for f in 1..p.rows() - 1 {
            let frame = &x.samples()[f * HOP - N_FFT / 2..f * HOP + N_FFT / 2];
            let energy: f64 = frame.iter().map(|&v| (v as f64).powi(2)).sum();
            let row = p.row(f);
            let full = row[0] + row[N_BINS - 1] + 2.0 * row[1..N_BINS - 1].iter().sum::<f64>();
            assert!((full / N_FFT as f64 - energy).abs() <= 1e-6 * energy);
        }
    }

    #[test]
    fn filterbank_invariants() {
        let fb = MelFilterbank::<f64>::htk();
        assert!(fb.weights().iter().all(|&w| w >= 0.0));
        for m in 0..N_MELS {
            assert!((0..N_BINS).any(|k| fb.weight(k, m) > 0.0), "empty band {m}");
        }
        for k in 1..N_BINS {
            assert!((0..N_MELS).any(|m| fb.weight(k, m) > 0.0), "uncovered bin {k}");
        }
        assert_eq!(MelFilterbank::<f64>::htk(), fb);
    }

    #[test]
    fn filterbank_matches_quadrature() {
        let fb = MelFilterbank::<f64>::htk();
        let top = hz_to_mel(8000.0);
        let edges: Vec<f64> = (0..N_MELS + 2).map(|i| mel_to_hz(top * i as f64 / 27.0)).collect();
        let steps = 20_000;
        for m in 0..N_MELS {
            let tri = |f: f64| {
                let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                if f > lo && f <= c {
                    (f - lo) / (c - lo)
                } else if f > c && f < hi {
                    (hi - f) / (hi - c)
                } else {
                    0.0
                }
            };
            for k in 0..N_BINS {
                let a = k as f64 * 250.0 - 125.0;
                let h = 250.0 / steps as f64;
                let mean = (0..steps).map(|i| tri(a + (i as f64 + 0.5) * h)).sum::<f64>() / steps as f64;
                assert!((fb.weight(k, m) - mean).abs() < 1e-6, "bin {k} band {m}");
            }
        }
    }

    #[test]
    fn mel_log_of_zero_power_is_floor() {
        let p = Matrix::<f32>::zeros(4, N_BINS);
        let out = apply_mel_log(&p, &MelFilterbank::htk()).unwrap();
        assert!(out.values().data().iter().all(|&v| (v - (-100.0)).abs() < 1e-4));
    }

    #[test]
    fn mel_log_single_frame_matches_direct_product() {
        let fb = MelFilterbank::<f32>::htk();
        let p = Matrix::new(1, N_BINS, vec![1.0f32; N_BINS]).unwrap();
        let out = apply_mel_log(&p, &fb).unwrap();
        for m in 0..N_MELS {
            let e: f64 = (0..N_BINS).map(|k| fb.weight(k, m) as f64).sum();
            let want = 10.0 * e.max(AMIN).log10();
            assert!((out.values().at(0, m) as f64 - want).abs() < 1e-5 * want.abs().max(1.0));
        }
    }

    #[test]
    fn mel_log_scaling_by_100_adds_20_db() {
        let fb = MelFilterbank::<f64>::htk();
        let x = random_wave(3200, 9);
        let p = Frontend::<f64>::new().stft_power(&x).unwrap();
        let scaled = Matrix::new(p.rows(), p.cols(), p.data().iter().map(|v| v * 100.0).collect()).unwrap();
        let a = apply_mel_log_with(&p, &fb).unwrap();
        let b = apply_mel_log_with(&scaled, &fb).unwrap();
        for (x, y) in a.values().data().iter().zip(b.values().data()) {
            if *x > -99.0 {
                assert!((y - x - 20.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mel_log_rejects_wrong_bins() {
        assert!(apply_mel_log(&Matrix::zeros(2, 32), &MelFilterbank::htk()).is_err());
    }

    #[test]
    fn frontend_shapes_and_determinism() {
        let one = random_wave(16_000, 2);
        let a = frontend(&one).unwrap();
        assert_eq!((a.frames(), a.n_mels()), (501, 26));
        let b = frontend(&one).unwrap();
        assert_eq!(a, b);
        assert_eq!(frontend(&random_wave(80_000, 2)).unwrap().frames(), 2501);
    }

    #[test]
    fn frontend_parameter_count() {
        assert_eq!(Frontend::<f32>::new().param_count(), 2 * 33 * 64 + 33 * 26);
    }
}
