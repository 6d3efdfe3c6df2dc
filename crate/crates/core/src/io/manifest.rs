//! JSON-lines manifests: one `{"audio_path", "arousal", "dominance",
//! "valence", "split"?}` object per line, paths relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AdvTriple;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub audio_path: PathBuf,
    pub arousal: f64,
    pub dominance: f64,
    pub valence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl ManifestRecord {
    pub fn new(audio_path: impl Into<PathBuf>, target: AdvTriple, split: Option<String>) -> Self {
        Self {
            audio_path: audio_path.into(),
            arousal: target.arousal,
            dominance: target.dominance,
            valence: target.valence,
            split,
        }
    }

    pub fn target(&self) -> AdvTriple {
        AdvTriple::new(self.arousal, self.dominance, self.valence)
    }
}

/// A record plus the 1-based line it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub line: usize,
    pub audio_path: PathBuf,
    pub target: AdvTriple,
    pub split: Option<String>,
}

impl ManifestEntry {
    pub fn target(&self) -> AdvTriple {
        self.target
    }

    pub fn to_record(&self) -> ManifestRecord {
        ManifestRecord::new(self.audio_path.clone(), self.target, self.split.clone())
    }
}

/// A line that could not be parsed.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestIssue {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    base_dir: PathBuf,
    entries: Vec<ManifestEntry>,
    issues: Vec<ManifestIssue>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self::parse(&text, base))
    }

    /// Malformed lines are collected in [`Self::issues`], not dropped silently.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Self {
        let mut m = Manifest {
            base_dir: base_dir.into(),
            ..Default::default()
        };
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            match parse_line(line) {
                Ok(r) => m.entries.push(ManifestEntry {
                    line: line_no,
                    audio_path: r.audio_path,
                    target: AdvTriple::new(r.arousal, r.dominance, r.valence),
                    split: r.split,
                }),
                Err(message) => m.issues.push(ManifestIssue { line: line_no, message }),
            }
        }
        m
    }

    /// Like [`Self::read`] but the first malformed line is an error.
    pub fn read_strict(path: &Path) -> Result<Self> {
        let m = Self::read(path)?;
        if let Some(i) = m.issues.first() {
            return Err(Error::Manifest {
                line: i.line,
                message: i.message.clone(),
            });
        }
        Ok(m)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn issues(&self) -> &[ManifestIssue] {
        &self.issues
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.audio_path)
    }
}

fn parse_line(line: &str) -> std::result::Result<ManifestRecord, String> {
    let r: ManifestRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if !(r.arousal.is_finite() && r.dominance.is_finite() && r.valence.is_finite()) {
        return Err("non-finite A/D/V value".into());
    }
    Ok(r)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    fs::write(path, to_jsonl(records))?;
    Ok(())
}

pub fn to_jsonl(records: &[ManifestRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports_bad_lines() {
        let text = r#"{"audio_path":"a.wav","arousal":0.1,"dominance":0.2,"valence":0.3}

not json
{"audio_path":"b.wav","arousal":0.4,"dominance":0.5,"valence":0.6,"split":"test"}
{"audio_path":"c.wav","arousal":0.4}
"#;
        let m = Manifest::parse(text, "/data");
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries()[1].line, 4);
        assert_eq!(m.entries()[1].split.as_deref(), Some("test"));
        assert_eq!(m.resolve(&m.entries()[0]), PathBuf::from("/data/a.wav"));
        let lines: Vec<usize> = m.issues().iter().map(|i| i.line).collect();
        assert_eq!(lines, vec![3, 5]);
    }

    #[test]
    fn round_trip() {
        let recs = vec![
            ManifestRecord::new("x.wav", AdvTriple::new(0.1, 0.2, 0.3), None),
            ManifestRecord::new("sub/y.wav", AdvTriple::new(0.7, 0.5, 0.25), Some("train".into())),
        ];
        let m = Manifest::parse(&to_jsonl(&recs), "");
        let back: Vec<ManifestRecord> = m.entries().iter().map(ManifestEntry::to_record).collect();
        assert_eq!(back, recs);
    }
}
