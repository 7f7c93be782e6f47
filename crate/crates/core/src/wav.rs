//! Mono WAV input/output (16-bit PCM or 32-bit float).

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WavFormat {
    Pcm16,
    #[default]
    Float32,
}

/// Reads a mono file and rejects any sample rate other than `expected_rate`.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<Vec<f64>> {
    let mut reader = WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedWav(format!(
            "{}: {} channels, expected mono",
            path.as_ref().display(),
            spec.channels
        )));
    }
    if spec.sample_rate != expected_rate {
        return Err(Error::UnsupportedWav(format!(
            "{}: sample rate {} Hz, expected {} Hz (no resampling)",
            path.as_ref().display(),
            spec.sample_rate,
            expected_rate
        )));
    }
    match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from).map_err(Error::from))
            .collect(),
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0).map_err(Error::from))
            .collect(),
        (fmt, bits) => Err(Error::UnsupportedWav(format!(
            "{}: {bits}-bit {fmt:?}",
            path.as_ref().display()
        ))),
    }
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32, format: WavFormat) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    for &s in samples {
        match format {
            WavFormat::Pcm16 => {
                let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64);
                writer.write_sample(v as i16)?
            }
            WavFormat::Float32 => writer.write_sample(s as f32)?,
        }
    }
    writer.finalize()?;
    Ok(())
}
