use std::path::Path;

use crate::error::{Error, Result};

pub const PCM_SCALE: f64 = 32768.0;

/// `s / 32768`, giving values in `[-1, 1)`.
pub fn normalize_audio(pcm: &[i16]) -> Vec<f64> {
    pcm.iter().map(|&s| f64::from(s) / PCM_SCALE).collect()
}

/// Inverse of [`normalize_audio`], rounding and clamping to the 16-bit range.
pub fn denormalize_audio(y: &[f64]) -> Vec<i16> {
    y.iter()
        .map(|&v| {
            let s = (v * PCM_SCALE).round();
            if s.is_nan() {
                0
            } else {
                s.clamp(i16::MIN as f64, i16::MAX as f64) as i16
            }
        })
        .collect()
}

/// Decoded 16-bit audio, downmixed to mono.
#[derive(Clone, Debug, PartialEq)]
pub struct Pcm {
    pub samples: Vec<i16>,
    pub sample_rate: u32,
}

pub fn read_wav(path: &Path) -> Result<Pcm> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::input(format!(
            "{}: only 16-bit PCM is supported",
            path.display()
        )));
    }
    let raw: Vec<i16> = reader.samples::<i16>().collect::<std::result::Result<_, _>>()?;
    let ch = usize::from(spec.channels.max(1));
    let samples = if ch == 1 {
        raw
    } else {
        raw.chunks(ch)
            .map(|f| (f.iter().map(|&s| i32::from(s)).sum::<i32>() / f.len() as i32) as i16)
            .collect()
    };
    Ok(Pcm {
        samples,
        sample_rate: spec.sample_rate,
    })
}

pub fn write_wav(path: &Path, samples: &[i16], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        writer.write_sample(s)?;
    }
    writer.finalize()?;
    Ok(())
}
