//! Teachers: label lookup, frozen networks, and ensembles of either.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::distill::augment::{make_sample_with_length, sample_rng, AugmentationConfig};
use crate::distill::corpus::CorpusBuckets;
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::io::manifest::Manifest;
use crate::io::wav::read_wav;
use crate::model::{AdvPredictor, AdvTriple, FusedWav2Small, Wav2Small, OUTPUTS, TOKEN_DIM};
use crate::nn::Mode;

/// Content hash of a waveform's samples (f32 little-endian bytes).
pub fn waveform_digest(w: &Waveform) -> [u8; 32] {
    let mut h = Sha256::new();
    for s in w.samples() {
        h.update(s.to_le_bytes());
    }
    h.finalize().into()
}

/// A/D/V labels keyed by waveform content.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelTable {
    labels: HashMap<[u8; 32], AdvTriple>,
}

impl LabelTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, w: &Waveform, label: AdvTriple) {
        self.labels.insert(waveform_digest(w), label);
    }

    pub fn get(&self, w: &Waveform) -> Option<AdvTriple> {
        self.labels.get(&waveform_digest(w)).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Reads every row's audio; any unreadable row is an error.
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        if let Some(i) = manifest.issues().first() {
            return Err(Error::Manifest {
                line: i.line,
                message: i.message.clone(),
            });
        }
        let mut t = Self::new();
        for e in manifest.entries() {
            t.insert(&read_wav(&manifest.resolve(e))?, e.target());
        }
        Ok(t)
    }

    pub fn read(manifest_path: &Path) -> Result<Self> {
        Self::from_manifest(&Manifest::read(manifest_path)?)
    }
}

/// Deterministic waveform → A/D/V map used as the distillation target.
#[derive(Debug, Clone)]
pub enum TeacherOracle {
    Labels(Arc<LabelTable>),
    Model(Arc<FusedWav2Small<f32>>),
    /// Arithmetic mean of the members' outputs.
    Ensemble(Vec<TeacherOracle>),
}

impl TeacherOracle {
    pub fn model(m: FusedWav2Small<f32>) -> Self {
        TeacherOracle::Model(Arc::new(m))
    }

    pub fn labels(t: LabelTable) -> Self {
        TeacherOracle::Labels(Arc::new(t))
    }

    pub fn ensemble(members: Vec<TeacherOracle>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("ensemble needs at least one member"));
        }
        Ok(TeacherOracle::Ensemble(members))
    }

    /// Labels for a batch; equal-length batches run through a model in one pass.
    pub fn predict_batch(&self, waves: &[Waveform]) -> Result<Vec<AdvTriple>> {
        match self {
            TeacherOracle::Model(m) if waves.iter().all(|w| w.len() == waves[0].len()) && !waves.is_empty() => {
                let out = m.forward_batch(waves)?;
                Ok((0..out.rows())
                    .map(|r| {
                        let row = out.row(r);
                        AdvTriple::new(row[0] as f64, row[1] as f64, row[2] as f64)
                    })
                    .collect())
            }
            TeacherOracle::Ensemble(members) => {
                let per: Vec<Vec<AdvTriple>> = members.iter().map(|m| m.predict_batch(waves)).collect::<Result<_>>()?;
                Ok((0..waves.len())
                    .map(|i| AdvTriple::mean(&per.iter().map(|p| p[i]).collect::<Vec<_>>()).expect("non-empty ensemble"))
                    .collect())
            }
            _ => waves.iter().map(|w| self.predict(w)).collect(),
        }
    }
}

impl AdvPredictor for TeacherOracle {
    fn predict(&self, w: &Waveform) -> Result<AdvTriple> {
        match self {
            TeacherOracle::Labels(t) => t
                .get(w)
                .ok_or_else(|| Error::invalid("teacher label table has no entry for this waveform")),
            TeacherOracle::Model(m) => m.forward(w),
            TeacherOracle::Ensemble(members) => {
                let outs: Vec<AdvTriple> = members.iter().map(|m| m.predict(w)).collect::<Result<_>>()?;
                Ok(AdvTriple::mean(&outs).expect("non-empty ensemble"))
            }
        }
    }
}

/// `count` augmented samples of exactly `len` samples each, for calibrating
/// a synthetic teacher on the distribution it will label.
pub fn calibration_set(
    buckets: &CorpusBuckets,
    aug: &AugmentationConfig,
    count: usize,
    len: usize,
    seed: u64,
) -> Result<Vec<Waveform>> {
    (0..count as u64)
        .map(|i| make_sample_with_length(buckets, aug, len, &mut sample_rng(seed, i)).map(|s| s.0))
        .collect()
}

/// Spread of the synthetic teacher's outputs around the neutral point.
pub const SYNTHETIC_SPREAD: f64 = 0.1;
pub const SYNTHETIC_CENTER: f64 = 0.5;

/// A frozen random network used as a stand-in teacher.
///
/// Batch norms are calibrated on `calibration` (equal-length waveforms) and
/// the output head is rescaled so each dimension has mean 0.5 and standard
/// deviation 0.1 on that set, which keeps outputs inside `[0.2, 0.8]` for
/// typical inputs. Returned in eval mode; fuse it to build a
/// [`TeacherOracle::Model`], or clone it as a self-distillation student.
pub fn synthetic_teacher(seed: u64, calibration: &[Waveform]) -> Result<Wav2Small<f32>> {
    if calibration.len() < 2 {
        return Err(Error::invalid("synthetic teacher calibration needs at least 2 waveforms"));
    }
    let mut m = Wav2Small::<f32>::init(seed);
    m.calibrate_batch_norm(calibration, 16)?;
    let mut raw = Vec::with_capacity(calibration.len());
    for chunk in calibration.chunks(16) {
        let out = m.forward_batch(chunk)?;
        raw.extend((0..out.rows()).map(|r| out.row(r).iter().map(|&v| v as f64).collect::<Vec<_>>()));
    }
    let n = raw.len() as f64;
    let adv = m.adv_mut();
    for d in 0..OUTPUTS {
        let mean = raw.iter().map(|r| r[d]).sum::<f64>() / n;
        let sd = (raw.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(sd.is_finite() && sd > 0.0) {
            return Err(Error::State(format!("synthetic teacher output {d} is constant on the calibration set")));
        }
        let k = SYNTHETIC_SPREAD / sd;
        for w in &mut adv.weight.data_mut()[d * TOKEN_DIM..(d + 1) * TOKEN_DIM] {
            *w = (*w as f64 * k) as f32;
        }
        let b = &mut adv.bias.data_mut()[d];
        *b = (SYNTHETIC_CENTER + (*b as f64 - mean) * k) as f32;
    }
    m.set_mode(Mode::Eval);
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn waves(n: usize, len: usize, seed: u64) -> Vec<Waveform> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let f = 100.0 + 300.0 * i as f32;
                let amp: f32 = rng.random_range(0.05..0.5);
                let noise: f32 = rng.random_range(0.0..0.3);
                Waveform::new(
                    (0..len)
                        .map(|t| amp * (f * t as f32 / 16_000.0 * std::f32::consts::TAU).sin() + noise * rng.random_range(-1.0f32..1.0))
                        .collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn calibration_matches_train_mode() {
        let w = waves(6, 3200, 1);
        let mut m = Wav2Small::<f32>::init(3);
        let train_out = m.forward_batch(&w).unwrap();
        m.calibrate_batch_norm(&w, 4).unwrap();
        assert_eq!(m.mode(), Mode::Eval);
        let eval_out = m.forward_batch(&w).unwrap();
        for (a, b) in train_out.data().iter().zip(eval_out.data()) {
            assert!((a - b).abs() < 1e-3 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn synthetic_teacher_output_statistics() {
        let w = waves(24, 3200, 2);
        let t = synthetic_teacher(7, &w).unwrap();
        let outs: Vec<AdvTriple> = w.iter().map(|x| t.forward(x).unwrap()).collect();
        for d in 0..3 {
            let v: Vec<f64> = outs.iter().map(|o| o.to_array()[d]).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            assert!((mean - 0.5).abs() < 1e-3 && (sd - 0.1).abs() < 1e-3, "{mean} {sd}");
        }
    }

    #[test]
    fn ensemble_of_identical_members_is_identity() {
        let w = waves(4, 2000, 3);
        let t = TeacherOracle::model(synthetic_teacher(1, &w).unwrap().fused().unwrap());
        let e = TeacherOracle::ensemble(vec![t.clone(), t.clone()]).unwrap();
        for x in &w {
            assert_eq!(t.predict(x).unwrap(), e.predict(x).unwrap());
        }
        assert_eq!(t.predict_batch(&w).unwrap(), e.predict_batch(&w).unwrap());
    }

    #[test]
    fn ensemble_averages() {
        let w = waves(2, 1000, 4);
        let mut a = LabelTable::new();
        let mut b = LabelTable::new();
        a.insert(&w[0], AdvTriple::new(0.2, 0.4, 0.6));
        b.insert(&w[0], AdvTriple::new(0.4, 0.6, 0.8));
        let e = TeacherOracle::ensemble(vec![TeacherOracle::labels(a), TeacherOracle::labels(b)]).unwrap();
        let got = e.predict(&w[0]).unwrap().to_array();
        for (g, want) in got.iter().zip([0.3, 0.5, 0.7]) {
            assert!((g - want).abs() < 1e-12);
        }
        assert!(e.predict(&w[1]).is_err());
    }
}
