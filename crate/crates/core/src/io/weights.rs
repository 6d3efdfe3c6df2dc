//! Binary weight files.
//!
//! Layout (little-endian): magic `W2S1`, version `u16`, record count `u32`,
//! flags `u8` (bit 0 fused, bit 1 quantized), then per record: name length
//! `u16`, UTF-8 name, dtype `u8` (0 f32, 1 i8), scale `f32` for i8 only,
//! ndim `u8`, dims `u32 × ndim`, payload. A CRC32 of everything before it
//! closes the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::dsp::Waveform;
use crate::error::{Result, WeightFileError};
use crate::model::{AdvPredictor, AdvTriple, FusedWav2Small, Wav2Small};
use crate::nn::{Mode, Param};

pub const MAGIC: [u8; 4] = *b"W2S1";
pub const VERSION: u16 = 1;
const FLAG_FUSED: u8 = 1;
const FLAG_QUANTIZED: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WeightFlags {
    pub fused: bool,
    pub quantized: bool,
}

impl WeightFlags {
    fn to_byte(self) -> u8 {
        (self.fused as u8 * FLAG_FUSED) | (self.quantized as u8 * FLAG_QUANTIZED)
    }

    fn from_byte(b: u8) -> std::result::Result<Self, WeightFileError> {
        if b & !(FLAG_FUSED | FLAG_QUANTIZED) != 0 {
            return Err(WeightFileError::Malformed(format!("unknown flag bits {b:#04x}")));
        }
        Ok(Self {
            fused: b & FLAG_FUSED != 0,
            quantized: b & FLAG_QUANTIZED != 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    I8 { scale: f32, values: Vec<i8> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

impl Record {
    pub fn from_param(p: &Param<f32>) -> Self {
        Self {
            name: p.name().to_string(),
            shape: p.shape().to_vec(),
            data: RecordData::F32(p.data().to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values as f32; int8 records are expanded as `q · scale`.
    pub fn values(&self) -> Vec<f32> {
        match &self.data {
            RecordData::F32(v) => v.clone(),
            RecordData::I8 { scale, values } => values.iter().map(|&q| q as f32 * scale).collect(),
        }
    }

    /// Symmetric per-record int8: `scale = max|w| / 127`, 1.0 for an all-zero record.
    pub fn quantized(&self) -> Self {
        let values = self.values();
        let max = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let scale = if max == 0.0 { 1.0 } else { max / 127.0 };
        let q = values
            .iter()
            .map(|v| (v / scale).round().clamp(-127.0, 127.0) as i8)
            .collect();
        Self {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: RecordData::I8 { scale, values: q },
        }
    }

    pub fn scale(&self) -> Option<f32> {
        match self.data {
            RecordData::I8 { scale, .. } => Some(scale),
            RecordData::F32(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightFile {
    pub flags: WeightFlags,
    pub records: Vec<Record>,
}

impl WeightFile {
    pub fn from_model(m: &Wav2Small<f32>) -> Self {
        Self {
            flags: WeightFlags::default(),
            records: m.state().into_iter().map(Record::from_param).collect(),
        }
    }

    pub fn from_fused(m: &FusedWav2Small<f32>) -> Self {
        Self {
            flags: WeightFlags {
                fused: true,
                quantized: false,
            },
            records: m.state().into_iter().map(Record::from_param).collect(),
        }
    }

    /// Int8 copy of every record, frontend operators included.
    pub fn quantized(&self) -> Self {
        Self {
            flags: WeightFlags {
                quantized: true,
                ..self.flags
            },
            records: self.records.iter().map(Record::quantized).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.records.iter().map(Record::len).sum()
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.push(self.flags.to_byte());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            match &r.data {
                RecordData::F32(_) => out.push(0),
                RecordData::I8 { scale, .. } => {
                    out.push(1);
                    out.extend_from_slice(&scale.to_le_bytes());
                }
            }
            out.push(r.shape.len() as u8);
            for &d in &r.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &r.data {
                RecordData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::I8 { values, .. } => out.extend(values.iter().map(|&q| q as u8)),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a file image; the checksum is verified before anything else.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, WeightFileError> {
        if bytes.len() < 4 {
            return Err(WeightFileError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(WeightFileError::CrcMismatch { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(WeightFileError::BadMagic(magic));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(WeightFileError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let flags = WeightFlags::from_byte(r.u8()?)?;
        let mut records = Vec::with_capacity(count.min(1024));
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| WeightFileError::Malformed("record name is not UTF-8".into()))?;
            if !seen.insert(name.clone()) {
                return Err(WeightFileError::DuplicateRecord(name));
            }
            let dtype = r.u8()?;
            let scale = match dtype {
                0 => None,
                1 => Some(f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"))),
                d => return Err(WeightFileError::Malformed(format!("{name}: unknown dtype {d}"))),
            };
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = match scale {
                None => RecordData::F32(
                    r.take(n * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                Some(scale) => RecordData::I8 {
                    scale,
                    values: r.take(n)?.iter().map(|&b| b as i8).collect(),
                },
            };
            records.push(Record { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(WeightFileError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { flags, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(Self::from_bytes(&fs::read(path)?)?)
    }

    /// Builds the model the file describes, validating names and shapes.
    pub fn to_model(&self) -> std::result::Result<LoadedModel, WeightFileError> {
        if self.flags.fused {
            let mut m = FusedWav2Small::<f32>::template();
            self.fill(m.state_mut())?;
            Ok(LoadedModel::Fused(m))
        } else {
            let mut m = Wav2Small::<f32>::new();
            self.fill(m.state_mut())?;
            m.set_mode(Mode::Eval);
            Ok(LoadedModel::Unfused(m))
        }
    }

    fn fill(&self, params: Vec<&mut Param<f32>>) -> std::result::Result<(), WeightFileError> {
        let mut by_name: BTreeMap<&str, &Record> = self.records.iter().map(|r| (r.name.as_str(), r)).collect();
        for p in params {
            let rec = by_name
                .remove(p.name())
                .ok_or_else(|| WeightFileError::MissingRecord(p.name().to_string()))?;
            if rec.shape != p.shape() {
                return Err(WeightFileError::ShapeMismatch {
                    name: rec.name.clone(),
                    expected: p.shape().to_vec(),
                    found: rec.shape.clone(),
                });
            }
            p.data_mut().copy_from_slice(&rec.values());
        }
        match by_name.into_keys().next() {
            Some(extra) => Err(WeightFileError::UnknownRecord(extra.to_string())),
            None => Ok(()),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], WeightFileError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(WeightFileError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, WeightFileError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, WeightFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, WeightFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Either network layout, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedModel {
    Unfused(Wav2Small<f32>),
    Fused(FusedWav2Small<f32>),
}

impl LoadedModel {
    /// Inference form: fuses an unfused model.
    pub fn into_fused(self) -> Result<FusedWav2Small<f32>> {
        match self {
            LoadedModel::Fused(m) => Ok(m),
            LoadedModel::Unfused(m) => m.fused(),
        }
    }
}

impl AdvPredictor for LoadedModel {
    fn predict(&self, w: &Waveform) -> Result<AdvTriple> {
        match self {
            LoadedModel::Unfused(m) => m.forward(w),
            LoadedModel::Fused(m) => m.forward(w),
        }
    }
}

pub fn save_model(m: &Wav2Small<f32>, path: &Path) -> Result<()> {
    WeightFile::from_model(m).write(path)
}

pub fn save_fused(m: &FusedWav2Small<f32>, path: &Path, quantize: bool) -> Result<()> {
    let f = WeightFile::from_fused(m);
    if quantize { f.quantized() } else { f }.write(path)
}

pub fn load_weights(path: &Path) -> Result<LoadedModel> {
    Ok(WeightFile::read(path)?.to_model()?)
}

/// Int8 weight file for an eval-mode fused model.
pub fn quantize_weights(m: &FusedWav2Small<f32>) -> WeightFile {
    WeightFile::from_fused(m).quantized()
}
