//! Objective evaluation: mel-cepstral distortion, F0 error, likelihood, RTF.

use std::f64::consts::{LN_10, PI};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{centered_frame, frame_count, mel_extract, MelConfig, MelSpectrogram};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::flowstack::FlowModel;
use crate::synthesis::{rtf, synthesize, SynthesisRequest};
use crate::training::{chunks_of, nll_loss, TrainChunk, Utterance};

/// Cepstral coefficients `c1..=c13` enter the distortion.
pub const CEPSTRAL_ORDER: usize = 13;
pub const F0_FRAME: usize = 1024;
pub const F0_HOP: usize = 256;
pub const F0_MIN_HZ: f64 = 70.0;
pub const F0_MAX_HZ: f64 = 500.0;
pub const VOICING_THRESHOLD: f64 = 0.45;
/// Candidate peaks within this fraction of the best are preferred if earlier.
const PEAK_RATIO: f64 = 0.9;

/// Orthonormal DCT-II of one log-mel frame.
pub fn mel_cepstrum(frame: &[f64]) -> Vec<f64> {
    let n = frame.len() as f64;
    (0..frame.len())
        .map(|m| {
            let s: f64 = frame
                .iter()
                .enumerate()
                .map(|(k, &x)| x * (PI * m as f64 * (k as f64 + 0.5) / n).cos())
                .sum();
            s * if m == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() }
        })
        .collect()
}

pub fn cepstra(mel: &MelSpectrogram) -> Vec<Vec<f64>> {
    (0..mel.n_frames()).map(|t| mel_cepstrum(&mel.frame(t))).collect()
}

/// Mean per-frame `(10/ln10)·sqrt(2·Σ_{m=1..13} (a_m − b_m)²)` over the
/// common frames.
pub fn mcd_from_cepstra(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let frames = a.len().min(b.len());
    if frames == 0 {
        return Err(Error::input("no common frames for MCD"));
    }
    let k = 10.0 / LN_10;
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(ca, cb)| {
            let top = (CEPSTRAL_ORDER + 1).min(ca.len()).min(cb.len());
            let d2: f64 = (1..top).map(|m| (ca[m] - cb[m]).powi(2)).sum();
            k * (2.0 * d2).sqrt()
        })
        .sum();
    Ok(total / frames as f64)
}

/// Mel-cepstral distortion in dB between two time-aligned waveforms.
pub fn mcd(reference: &[f64], synthesized: &[f64], cfg: &MelConfig) -> Result<f64> {
    let a = mel_extract(reference, cfg)?;
    let b = mel_extract(synthesized, cfg)?;
    mcd_from_cepstra(&cepstra(&a), &cepstra(&b))
}

/// F0 of one analysis frame in Hz, or 0 when unvoiced.
fn frame_f0(frame: &[f64], sample_rate: f64) -> f64 {
    let n = frame.len();
    let mean = frame.iter().sum::<f64>() / n as f64;
    let x: Vec<f64> = frame.iter().map(|v| v - mean).collect();
    let energy: f64 = x.iter().map(|v| v * v).sum();
    if energy <= 1e-10 * n as f64 {
        return 0.0;
    }
    let lag_min = (sample_rate / F0_MAX_HZ).floor().max(2.0) as usize;
    let lag_max = ((sample_rate / F0_MIN_HZ).ceil() as usize).min(n / 2);
    if lag_min + 2 > lag_max {
        return 0.0;
    }
    let r: Vec<f64> = (lag_min - 1..=lag_max + 1)
        .map(|lag| {
            let (a, b) = (&x[..n - lag], &x[lag..]);
            let num: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            let ea: f64 = a.iter().map(|v| v * v).sum();
            let eb: f64 = b.iter().map(|v| v * v).sum();
            let den = (ea * eb).sqrt();
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        })
        .collect();
    // r[i] corresponds to lag lag_min - 1 + i
    let peaks: Vec<usize> = (1..r.len() - 1)
        .filter(|&i| r[i] >= r[i - 1] && r[i] > r[i + 1])
        .collect();
    let Some(best) = peaks.iter().map(|&i| r[i]).reduce(f64::max) else {
        return 0.0;
    };
    if best < VOICING_THRESHOLD {
        return 0.0;
    }
    let i = *peaks.iter().find(|&&i| r[i] >= PEAK_RATIO * best).expect("best is a peak");
    let (y0, y1, y2) = (r[i - 1], r[i], r[i + 1]);
    let denom = y0 - 2.0 * y1 + y2;
    let shift = if denom.abs() > 1e-12 {
        (0.5 * (y0 - y2) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let lag = (lag_min - 1 + i) as f64 + shift;
    sample_rate / lag
}

/// One F0 value per centered frame (hop 256), 0 for unvoiced frames.
pub fn f0_contour(wave: &[f64], sample_rate: u32) -> Vec<f64> {
    if wave.is_empty() {
        return Vec::new();
    }
    let sr = f64::from(sample_rate);
    let mut frame = vec![0.0; F0_FRAME];
    (0..frame_count(wave.len(), F0_HOP))
        .map(|t| {
            centered_frame(wave, t, F0_FRAME, F0_HOP, &mut frame);
            frame_f0(&frame, sr)
        })
        .collect()
}

/// `time_s,f0_hz` rows, one per frame.
pub fn f0_contour_csv(wave: &[f64], sample_rate: u32) -> String {
    let mut s = String::from("time_s,f0_hz\n");
    for (t, f) in f0_contour(wave, sample_rate).iter().enumerate() {
        let _ = writeln!(
            s,
            "{:.6},{:.4}",
            (t * F0_HOP) as f64 / f64::from(sample_rate),
            f
        );
    }
    s
}

/// RMS over commonly voiced frames of `1200·(log2 a − log2 b)`; `None`
/// when no frame is voiced in both.
pub fn rmse_f0_from_contours(a: &[f64], b: &[f64]) -> Option<f64> {
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| 1200.0 * (x.log2() - y.log2()))
        .collect();
    if d.is_empty() {
        None
    } else {
        Some((d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt())
    }
}

/// F0 error in cents between two time-aligned waveforms.
pub fn rmse_f0(reference: &[f64], synthesized: &[f64], sample_rate: u32) -> Option<f64> {
    rmse_f0_from_contours(
        &f0_contour(reference, sample_rate),
        &f0_contour(synthesized, sample_rate),
    )
}

/// Mean per-dimension log-likelihood in nats over held-out chunks.
pub fn ll_eval(model: &FlowModel, chunks: &[TrainChunk]) -> Result<f64> {
    if chunks.is_empty() {
        return Err(Error::input("no evaluation chunks"));
    }
    let total = chunks
        .iter()
        .map(|c| nll_loss(model, std::slice::from_ref(c)).map(|l| -l))
        .sum::<Result<f64>>()?;
    Ok(total / chunks.len() as f64)
}

/// Mean and standard error of the mean.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
                count: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            stderr,
            count: n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceScore {
    pub name: String,
    pub mcd_db: f64,
    pub rmse_f0_cents: Option<f64>,
    pub ll_per_dim: f64,
    pub rtf: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceScore>,
    pub mcd_db: Stat,
    pub rmse_f0_cents: Stat,
    /// Utterances without a commonly voiced frame.
    pub f0_undefined: usize,
    pub ll_per_dim: f64,
    pub rtf: f64,
}

impl EvalReport {
    pub fn from_scores(utterances: Vec<UtteranceScore>) -> Self {
        let mcd: Vec<f64> = utterances.iter().map(|u| u.mcd_db).collect();
        let f0: Vec<f64> = utterances.iter().filter_map(|u| u.rmse_f0_cents).collect();
        let n = utterances.len().max(1) as f64;
        Self {
            mcd_db: Stat::of(&mcd),
            rmse_f0_cents: Stat::of(&f0),
            f0_undefined: utterances.len() - f0.len(),
            ll_per_dim: utterances.iter().map(|u| u.ll_per_dim).sum::<f64>() / n,
            rtf: utterances.iter().map(|u| u.rtf).sum::<f64>() / n,
            utterances,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("utterance,mcd_db,rmse_f0_cents,ll_per_dim,rtf\n");
        for u in &self.utterances {
            let f0 = u
                .rmse_f0_cents
                .map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "{},{:.4},{},{:.6},{:.4}",
                u.name, u.mcd_db, f0, u.ll_per_dim, u.rtf
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "utterances: {}\nMCD [dB]: {:.3} ± {:.3}\nRMSE-F0 [cent]: {:.2} ± {:.2} ({} undefined)\nLL [nats/dim]: {:.4}\nRTF: {:.3}\n",
            self.utterances.len(),
            self.mcd_db.mean,
            self.mcd_db.stderr,
            self.rmse_f0_cents.mean,
            self.rmse_f0_cents.stderr,
            self.f0_undefined,
            self.ll_per_dim,
            self.rtf
        )
    }
}

/// Seeded draw of at most `n` utterances.
pub fn draw<T: Clone>(items: &[T], n: usize, seed: u64) -> Vec<T> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

/// Analysis-synthesis scores of one utterance.
pub fn score_utterance(
    model: &FlowModel,
    cfg: &Config,
    utt: &Utterance,
    seed: u64,
    temperature: f64,
) -> Result<UtteranceScore> {
    let mel_cfg = MelConfig::from_config(cfg);
    let mut req = SynthesisRequest::new(utt.mel.clone(), seed);
    req.temperature = temperature;
    req.tol = cfg.inverse_tol;
    let out = synthesize(model, &req)?;
    let syn = &out.wave[..utt.wave.len().min(out.wave.len())];
    let seconds = out.wave.len() as f64 / f64::from(cfg.sample_rate);
    Ok(UtteranceScore {
        name: utt.name.clone(),
        mcd_db: mcd(&utt.wave, syn, &mel_cfg)?,
        rmse_f0_cents: rmse_f0(&utt.wave, syn, cfg.sample_rate),
        ll_per_dim: ll_eval(model, &chunks_of(utt, cfg.chunk_len)?)?,
        rtf: rtf(out.timing.total, seconds)?,
    })
}

/// Score every utterance; the seed of utterance `i` is `seed + i`.
pub fn evaluate(
    model: &FlowModel,
    cfg: &Config,
    utts: &[Utterance],
    seed: u64,
) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(Error::input("no utterances to evaluate"));
    }
    let scores = utts
        .par_iter()
        .enumerate()
        .map(|(i, u)| score_utterance(model, cfg, u, seed.wrapping_add(i as u64), 1.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scores(scores))
}
