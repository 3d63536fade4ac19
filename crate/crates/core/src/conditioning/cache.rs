//! `FVML` mel cache: magic, version, frame count, band count, then
//! little-endian `f32` values frame by frame.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::RealArray;

use super::mel::{MelConfig, MelSpectrogram};

const MAGIC: &[u8; 4] = b"FVML";
const VERSION: u32 = 1;

pub fn encode_mel(mel: &MelSpectrogram) -> Vec<u8> {
    let (bands, t) = (mel.n_mels(), mel.n_frames());
    let mut out = Vec::with_capacity(16 + 4 * bands * t);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(bands as u32).to_le_bytes());
    for f in 0..t {
        for b in 0..bands {
            out.extend_from_slice(&(mel.get(b, f) as f32).to_le_bytes());
        }
    }
    out
}

fn u32_at(bytes: &[u8], pos: usize) -> Result<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated mel header".into()))
}

/// Parse a cache; the file carries no STFT settings, so `cfg` supplies them.
pub fn decode_mel(bytes: &[u8], cfg: &MelConfig) -> Result<MelSpectrogram> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::Format("bad mel magic".into()));
    }
    let version = u32_at(bytes, 4)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported mel version {version}")));
    }
    let t = u32_at(bytes, 8)? as usize;
    let bands = u32_at(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != 4 * t * bands {
        return Err(Error::Format(format!(
            "mel body has {} bytes, expected {}",
            body.len(),
            4 * t * bands
        )));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite mel value".into()));
    }
    let frames = RealArray::from_fn(&[bands, t], |i| vals[(i % t) * bands + i / t]);
    Ok(MelSpectrogram {
        frames,
        sample_rate: cfg.sample_rate,
        hop: cfg.hop,
        fft: cfg.fft,
        win: cfg.win,
    })
}

pub fn save_mel(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_mel(mel))?;
    Ok(())
}

pub fn load_mel(path: &Path, cfg: &MelConfig) -> Result<MelSpectrogram> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_mel(&bytes, cfg)
}
