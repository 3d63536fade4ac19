use std::path::{Path, PathBuf};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::conditioning::{mel_extract, normalize_audio, read_wav, MelConfig, MelSpectrogram};
use crate::config::Config;
use crate::error::{Error, Result};

use super::loss::TrainChunk;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Stable 90/10 assignment from the SHA-256 of the file name.
pub fn split_of(name: &str) -> Split {
    let digest = Sha256::digest(name.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    if u64::from_be_bytes(head) % 10 == 0 {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub name: String,
    pub wave: Vec<f64>,
    pub mel: MelSpectrogram,
}

impl Utterance {
    pub fn new(name: impl Into<String>, wave: Vec<f64>, cfg: &MelConfig) -> Result<Self> {
        let mel = mel_extract(&wave, cfg)?;
        Ok(Self {
            name: name.into(),
            wave,
            mel,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// `*.wav` files of `dir`, sorted by name.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::input(format!("{} is not a directory", dir.display())));
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

impl Dataset {
    /// Read every WAV of `dir`; unreadable or mismatched files are skipped
    /// with a warning.
    pub fn load(dir: &Path, cfg: &Config) -> Result<Self> {
        let mel_cfg = MelConfig::from_config(cfg);
        let mut ds = Dataset::default();
        for path in list_wavs(dir)? {
            let name = file_name(&path);
            let pcm = match read_wav(&path) {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    continue;
                }
            };
            if pcm.sample_rate != cfg.sample_rate {
                log::warn!(
                    "skipping {}: sample rate {} differs from configured {}",
                    path.display(),
                    pcm.sample_rate,
                    cfg.sample_rate
                );
                continue;
            }
            if pcm.samples.is_empty() {
                log::warn!("skipping {}: no samples", path.display());
                continue;
            }
            let utt = Utterance::new(name.clone(), normalize_audio(&pcm.samples), &mel_cfg)?;
            match split_of(&name) {
                Split::Train => ds.train.push(utt),
                Split::Test => ds.test.push(utt),
            }
        }
        if ds.train.is_empty() && ds.test.is_empty() {
            return Err(Error::input(format!("no readable WAV files in {}", dir.display())));
        }
        Ok(ds)
    }

    pub fn from_utterances(utts: Vec<Utterance>) -> Self {
        let mut ds = Dataset::default();
        for u in utts {
            match split_of(&u.name) {
                Split::Train => ds.train.push(u),
                Split::Test => ds.test.push(u),
            }
        }
        ds
    }
}

/// A uniformly placed chunk of a uniformly chosen utterance.
pub fn sample_chunk<R: Rng>(rng: &mut R, utts: &[Utterance], chunk_len: usize) -> Result<TrainChunk> {
    if utts.is_empty() {
        return Err(Error::input("no training utterances"));
    }
    let u = &utts[rng.random_range(0..utts.len())];
    let start = if u.wave.len() > chunk_len {
        rng.random_range(0..=u.wave.len() - chunk_len)
    } else {
        0
    };
    TrainChunk::from_utterance(&u.wave, &u.mel, start, chunk_len)
}

/// Consecutive non-overlapping chunks covering an utterance.
pub fn chunks_of(u: &Utterance, chunk_len: usize) -> Result<Vec<TrainChunk>> {
    (0..u.wave.len())
        .step_by(chunk_len)
        .map(|s| TrainChunk::from_utterance(&u.wave, &u.mel, s, chunk_len))
        .collect()
}
