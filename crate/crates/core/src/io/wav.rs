use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Reads a mono 16 kHz PCM16 or float32 WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    decode(reader, path)
}

pub fn read_wav_bytes(bytes: &[u8]) -> Result<Waveform> {
    let reader = WavReader::new(std::io::Cursor::new(bytes)).map_err(|e| wav_err(Path::new("<memory>"), e))?;
    decode(reader, Path::new("<memory>"))
}

fn decode<R: std::io::Read>(reader: WavReader<R>, path: &Path) -> Result<Waveform> {
    let spec = reader.spec();
    let bad = |what: String| Error::Wav(format!("{}: {what}", path.display()));
    if spec.channels != 1 {
        return Err(bad(format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(bad(format!("expected sample rate {SAMPLE_RATE} Hz, found {}", spec.sample_rate)));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => return Err(bad(format!("unsupported codec {fmt:?} {bits}-bit; expected PCM16 or float32"))),
    };
    if samples.is_empty() {
        return Err(bad("no samples".into()));
    }
    Waveform::new(samples)
}

pub fn write_wav(path: &Path, w: &Waveform, encoding: WavEncoding) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in w.samples() {
        let r = match encoding {
            WavEncoding::Pcm16 => writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16),
            WavEncoding::Float32 => writer.write_sample(s),
        };
        r.map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Wav(format!("{}: {other}", path.display())),
    }
}
