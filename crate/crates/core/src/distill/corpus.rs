//! Audio buckets for the sample generator, either read from folders of
//! WAV files or synthesized from tones, chirps and noise.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::io::wav::read_wav;

/// `primary` feeds audio₁; one of the other three feeds audio₂.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusBuckets {
    pub primary: Vec<Waveform>,
    pub general: Vec<Waveform>,
    pub speech: Vec<Waveform>,
    pub ambient: Vec<Waveform>,
}

impl CorpusBuckets {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in self.named() {
            if b.is_empty() {
                return Err(Error::invalid(format!("corpus bucket {name:?} is empty")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, &Vec<Waveform>); 4] {
        [
            ("primary", &self.primary),
            ("general", &self.general),
            ("speech", &self.speech),
            ("ambient", &self.ambient),
        ]
    }

    pub fn total_samples(&self) -> usize {
        self.named().iter().flat_map(|(_, b)| b.iter()).map(Waveform::len).sum()
    }

    /// Appends every `.wav` directly inside `dir` (sorted by name) to a bucket.
    pub fn extend_from_dir(bucket: &mut Vec<Waveform>, dir: &Path) -> Result<usize> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        paths.sort();
        for p in &paths {
            bucket.push(read_wav(p)?);
        }
        Ok(paths.len())
    }

    pub fn synthetic(cfg: &SyntheticCorpusConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let secs = |s: f64| (s * SAMPLE_RATE as f64) as usize;
        let mut c = CorpusBuckets::default();
        for _ in 0..cfg.primary_tracks {
            c.primary.push(babble(secs(cfg.primary_secs), &mut rng));
        }
        for i in 0..cfg.secondary_items {
            let n = secs(cfg.secondary_secs);
            c.general.push(if i % 2 == 0 { tone_mix(n, &mut rng) } else { chirp(n, &mut rng) });
            c.speech.push(babble(n, &mut rng));
            c.ambient.push(colored_noise(n, &mut rng));
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusConfig {
    pub primary_tracks: usize,
    pub primary_secs: f64,
    pub secondary_items: usize,
    pub secondary_secs: f64,
    #[serde(rename = "corpus_seed")]
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            primary_tracks: 8,
            primary_secs: 15.0,
            secondary_items: 6,
            secondary_secs: 4.0,
            seed: 0,
        }
    }
}

fn finish(v: Vec<f64>) -> Waveform {
    Waveform::new(v.into_iter().map(|x| x as f32).collect()).expect("non-empty synthetic audio")
}

/// Voiced syllables: harmonic stacks with a gliding pitch, formant-like
/// emphasis and a smooth envelope, separated by short pauses or hiss.
fn babble(n: usize, rng: &mut ChaCha8Rng) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let white = Normal::new(0.0, 1.0).expect("valid normal");
    let mut out = vec![0.0; n];
    let mut t = 0;
    let loudness: f64 = rng.random_range(0.1..0.6);
    while t < n {
        let syl = (rng.random_range(0.08..0.3) * sr) as usize;
        let f0_start: f64 = rng.random_range(80.0..260.0);
        let f0_end = f0_start * rng.random_range(0.8..1.25);
        let formants = [rng.random_range(300.0..900.0), rng.random_range(900.0..2500.0), rng.random_range(2400.0..3500.0)];
        let amp = loudness * rng.random_range(0.3..1.0);
        let mut phase = 0.0;
        for i in 0..syl.min(n - t) {
            let u = i as f64 / syl as f64;
            let f0 = f0_start + (f0_end - f0_start) * u;
            phase += TAU * f0 / sr;
            let env = (std::f64::consts::PI * u).sin().powi(2);
            let mut s = 0.0;
            let mut h = 1;
            while h as f64 * f0 < 7000.0 {
                let f = h as f64 * f0;
                let emph: f64 = formants.iter().map(|&fm| (-((f - fm) / 200.0).powi(2)).exp()).sum::<f64>() + 0.05;
                s += emph * (h as f64 * phase).sin() / h as f64;
                h += 1;
            }
            out[t + i] = amp * env * s;
        }
        t += syl;
        let gap = (rng.random_range(0.02..0.15) * sr) as usize;
        let hiss = rng.random_bool(0.3);
        for i in 0..gap.min(n.saturating_sub(t)) {
            out[t + i] = if hiss { 0.05 * loudness * white.sample(rng) } else { 0.0 };
        }
        t += gap;
    }
    finish(out)
}

fn tone_mix(n: usize, rng: &mut ChaCha8Rng) -> Waveform {
    let k = rng.random_range(1..=4);
    let parts: Vec<(f64, f64, f64)> = (0..k)
        .map(|_| (rng.random_range(60.0..7000.0), rng.random_range(0.05..0.4), rng.random_range(0.0..TAU)))
        .collect();
    finish(
        (0..n)
            .map(|i| {
                let t = i as f64 / SAMPLE_RATE as f64;
                parts.iter().map(|(f, a, p)| a * (TAU * f * t + p).sin()).sum()
            })
            .collect(),
    )
}

fn chirp(n: usize, rng: &mut ChaCha8Rng) -> Waveform {
    let (f0, f1): (f64, f64) = (rng.random_range(50.0..2000.0), rng.random_range(500.0..7500.0));
    let amp: f64 = rng.random_range(0.05..0.5);
    let dur = n as f64 / SAMPLE_RATE as f64;
    finish(
        (0..n)
            .map(|i| {
                let t = i as f64 / SAMPLE_RATE as f64;
                amp * (TAU * (f0 * t + (f1 - f0) * t * t / (2.0 * dur))).sin()
            })
            .collect(),
    )
}

/// White noise through a one-pole lowpass of random strength.
fn colored_noise(n: usize, rng: &mut ChaCha8Rng) -> Waveform {
    let white = Normal::new(0.0, 1.0).expect("valid normal");
    let pole: f64 = rng.random_range(0.0..0.98);
    let amp: f64 = rng.random_range(0.02..0.3);
    let mut y = 0.0;
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            y = pole * y + (1.0 - pole) * white.sample(rng);
            y
        })
        .collect();
    let rms = (raw.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    finish(raw.into_iter().map(|v| amp * v / rms).collect())
}
