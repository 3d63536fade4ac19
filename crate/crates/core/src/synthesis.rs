//! Mel-conditioned waveform generation with stage timing.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::conditioning::{denormalize_audio, upsample, MelSpectrogram};
use crate::config::UPSAMPLE_FACTOR;
use crate::error::{Error, Result};
use crate::flowstack::{flow_forward_observed, FlowModel, SqueezedAudio};
use crate::numcore::RealArray;

pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct SynthesisRequest {
    pub mel: MelSpectrogram,
    /// Standard deviation of the latent noise.
    pub temperature: f64,
    pub seed: u64,
    /// Inversion tolerance on the CDF.
    pub tol: f64,
}

impl SynthesisRequest {
    pub fn new(mel: MelSpectrogram, seed: u64) -> Self {
        Self {
            mel,
            temperature: 1.0,
            seed,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SynthesisTiming {
    pub upsample: Duration,
    pub estimator: Duration,
    pub inversion: Duration,
    pub total: Duration,
}

impl SynthesisTiming {
    /// `stage,ms` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,ms\n");
        for (name, d) in [
            ("upsample", self.upsample),
            ("estimator", self.estimator),
            ("inversion", self.inversion),
            ("total", self.total),
        ] {
            let _ = writeln!(s, "{name},{:.3}", d.as_secs_f64() * 1e3);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct SynthesisOutput {
    /// Generated waveform in normalized units.
    pub wave: Vec<f64>,
    /// The same waveform as clamped 16-bit PCM.
    pub pcm: Vec<i16>,
    /// Latent grid the waveform was generated from.
    pub latent: SqueezedAudio,
    pub timing: SynthesisTiming,
}

/// Latent noise `N(0, σ²)` on an `h × w` grid; deterministic in `seed`.
pub fn sample_latent(h: usize, w: usize, temperature: f64, seed: u64) -> Result<SqueezedAudio> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::input("temperature must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = RealArray::from_fn(&[h, w], |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        temperature * v
    });
    SqueezedAudio::from_grid(grid)
}

pub fn synthesize(model: &FlowModel, req: &SynthesisRequest) -> Result<SynthesisOutput> {
    let start = Instant::now();
    let t = req.mel.n_frames();
    if t == 0 {
        return Err(Error::input("mel spectrogram has no frames"));
    }
    if req.mel.n_mels() != model.dims().n_mels {
        return Err(Error::config(format!(
            "mel has {} bands, model expects {}",
            req.mel.n_mels(),
            model.dims().n_mels
        )));
    }
    let n = t * UPSAMPLE_FACTOR;
    let h = model.dims().squeeze_h;
    let latent = sample_latent(h, n / h, req.temperature, req.seed)?;
    let cond = upsample(model, &req.mel)?;
    let up = start.elapsed();
    let (wave, ft) = flow_forward_observed(model, &latent, &cond, req.tol, &mut ())?;
    let pcm = denormalize_audio(&wave);
    Ok(SynthesisOutput {
        wave,
        pcm,
        latent,
        timing: SynthesisTiming {
            upsample: up,
            estimator: ft.estimator,
            inversion: ft.inversion,
            total: start.elapsed(),
        },
    })
}

/// Real-time factor: generation wall time over audio duration.
pub fn rtf(wall: Duration, audio_seconds: f64) -> Result<f64> {
    if !(audio_seconds > 0.0) {
        return Err(Error::input("audio duration must be positive"));
    }
    Ok(wall.as_secs_f64() / audio_seconds)
}
