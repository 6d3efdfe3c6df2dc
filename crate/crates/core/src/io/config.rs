//! Flat TOML configuration for `train-distill`.
//!
//! Every training, augmentation, corpus and teacher key lives at the top
//! level; omitted keys take their defaults. Relative paths resolve against
//! the config file's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::distill::augment::AugmentationConfig;
use crate::distill::corpus::{CorpusBuckets, SyntheticCorpusConfig};
use crate::distill::teacher::{calibration_set, synthetic_teacher, LabelTable, TeacherOracle};
use crate::distill::train::TrainingConfig;
use crate::dsp::SAMPLE_RATE;
use crate::error::{Error, Result};
use crate::io::weights::load_weights;
use crate::model::Wav2Small;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub primary_dirs: Vec<PathBuf>,
    pub general_dirs: Vec<PathBuf>,
    pub speech_dirs: Vec<PathBuf>,
    pub ambient_dirs: Vec<PathBuf>,
    /// Fill buckets that have no folders with generated audio.
    pub synthetic_fill: bool,
    #[serde(flatten)]
    pub synthetic: SyntheticCorpusConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            primary_dirs: Vec::new(),
            general_dirs: Vec::new(),
            speech_dirs: Vec::new(),
            ambient_dirs: Vec::new(),
            synthetic_fill: true,
            synthetic: SyntheticCorpusConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    /// Members of the teacher ensemble: `"synthetic"`, a weight file, or a
    /// `.jsonl` label manifest.
    pub teacher: Vec<String>,
    pub teacher_seed: u64,
    pub teacher_calibration_items: usize,
    pub teacher_calibration_secs: f64,
    /// Initial student weights; a fresh init from `seed` when absent.
    pub student_weights: Option<PathBuf>,
    pub output: PathBuf,
    pub telemetry: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            teacher: vec!["synthetic".into()],
            teacher_seed: 1,
            teacher_calibration_items: 32,
            teacher_calibration_secs: 1.0,
            student_weights: None,
            output: PathBuf::from("student.w2s"),
            telemetry: None,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    #[serde(flatten)]
    pub training: TrainingConfig,
    #[serde(flatten)]
    pub augmentation: AugmentationConfig,
    #[serde(flatten)]
    pub corpus: CorpusConfig,
    #[serde(flatten)]
    pub run: TeacherConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

const OPTIONAL_KEYS: [&str; 3] = ["student_weights", "telemetry", "checkpoint_dir"];

impl DistillConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let known = Self::known_keys();
        if let Some(k) = table.keys().find(|k| !known.contains(k.as_str())) {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        let mut cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.training.validate()?;
        cfg.augmentation.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().map(Path::to_path_buf).unwrap_or_default())
    }

    pub fn known_keys() -> BTreeSet<String> {
        let v = toml::Table::try_from(Self::default()).expect("default config serializes");
        v.keys().cloned().chain(OPTIONAL_KEYS.iter().map(|s| s.to_string())).collect()
    }

    /// Default config as TOML, one key per line.
    pub fn default_toml() -> String {
        toml::to_string(&Self::default()).expect("default config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn build_corpus(&self) -> Result<CorpusBuckets> {
        let c = &self.corpus;
        let mut buckets = CorpusBuckets::default();
        for (dirs, bucket) in [
            (&c.primary_dirs, &mut buckets.primary),
            (&c.general_dirs, &mut buckets.general),
            (&c.speech_dirs, &mut buckets.speech),
            (&c.ambient_dirs, &mut buckets.ambient),
        ] {
            for d in dirs {
                CorpusBuckets::extend_from_dir(bucket, &self.resolve(d))?;
            }
        }
        if c.synthetic_fill {
            let synth = CorpusBuckets::synthetic(&c.synthetic);
            for (bucket, fill) in [
                (&mut buckets.primary, synth.primary),
                (&mut buckets.general, synth.general),
                (&mut buckets.speech, synth.speech),
                (&mut buckets.ambient, synth.ambient),
            ] {
                if bucket.is_empty() {
                    *bucket = fill;
                }
            }
        }
        buckets.validate()?;
        Ok(buckets)
    }

    /// Teacher ensemble; synthetic members are calibrated on `buckets`.
    pub fn build_teacher(&self, buckets: &Arc<CorpusBuckets>) -> Result<TeacherOracle> {
        let r = &self.run;
        let mut members = Vec::with_capacity(r.teacher.len());
        for (i, spec) in r.teacher.iter().enumerate() {
            let member = if spec == "synthetic" {
                let len = (r.teacher_calibration_secs * SAMPLE_RATE as f64).round() as usize;
                let seed = r.teacher_seed + i as u64;
                let cal = calibration_set(buckets, &self.augmentation, r.teacher_calibration_items, len, seed)?;
                TeacherOracle::model(synthetic_teacher(seed, &cal)?.fused()?)
            } else if spec.ends_with(".jsonl") {
                TeacherOracle::labels(LabelTable::read(&self.resolve(Path::new(spec)))?)
            } else {
                TeacherOracle::model(load_weights(&self.resolve(Path::new(spec)))?.into_fused()?)
            };
            members.push(member);
        }
        if members.len() == 1 {
            return Ok(members.pop().expect("one member"));
        }
        TeacherOracle::ensemble(members)
    }

    pub fn build_student(&self) -> Result<Wav2Small<f32>> {
        match &self.run.student_weights {
            Some(p) => match load_weights(&self.resolve(p))? {
                crate::io::weights::LoadedModel::Unfused(m) => Ok(m),
                crate::io::weights::LoadedModel::Fused(_) => {
                    Err(Error::Config("student weights must be an unfused (trainable) file".into()))
                }
            },
            None => Ok(Wav2Small::init(self.training.seed)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_training_recipe() {
        let c = DistillConfig::parse("", "/x").unwrap();
        assert_eq!(c.training.batch_size, 16);
        assert_eq!(c.training.learning_rate, 5e-5);
        assert_eq!((c.training.momentum, c.training.weight_decay), (0.0, 0.0));
        assert_eq!(c.augmentation.mix_coeff_primary, 0.64);
        assert_eq!(c.augmentation.mix_coeff_secondary, 0.41);
        assert_eq!(c.augmentation.excerpt_range(), (6400, 192_000));
        assert_eq!(c.resolve(Path::new("a")), PathBuf::from("/x/a"));
    }

    #[test]
    fn flat_keys_and_unknown_rejection() {
        let c = DistillConfig::parse(
            "steps = 10\naugmentation_seed = 4\ncorpus_seed = 9\nquadrant_mode = \"octant\"\nteacher = [\"synthetic\", \"t.w2s\"]\ntelemetry = \"log.jsonl\"",
            "",
        )
        .unwrap();
        assert_eq!(c.training.steps, 10);
        assert_eq!(c.augmentation.seed, 4);
        assert_eq!(c.corpus.synthetic.seed, 9);
        assert_eq!(c.training.quadrant_mode, crate::distill::QuadrantMode::Octant);
        assert_eq!(c.run.teacher.len(), 2);
        assert!(matches!(DistillConfig::parse("stepz = 1", ""), Err(Error::Config(_))));
        assert!(matches!(DistillConfig::parse("batch_size = 1", ""), Err(Error::Config(_))));
        let round = DistillConfig::parse(&DistillConfig::default_toml(), "").unwrap();
        assert_eq!(round, DistillConfig::default());
    }
}
