use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::numcore::RealArray;

/// Lower bound applied before the logarithm.
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub fft: usize,
    pub hop: usize,
    pub win: usize,
}

impl MelConfig {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            sample_rate: cfg.sample_rate,
            n_mels: cfg.n_mels,
            fft: cfg.fft,
            hop: cfg.hop,
            win: cfg.win,
        }
    }

    pub fn with_sample_rate(mut self, sr: u32) -> Self {
        self.sample_rate = sr;
        self
    }
}

impl Default for MelConfig {
    fn default() -> Self {
        Self::from_config(&Config::default())
    }
}

/// Log-mel frames stored band-major as `[n_mels, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: RealArray,
    pub sample_rate: u32,
    pub hop: usize,
    pub fft: usize,
    pub win: usize,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn get(&self, band: usize, t: usize) -> f64 {
        self.frames.data()[band * self.n_frames() + t]
    }

    /// Frame `t` as a vector over bands.
    pub fn frame(&self, t: usize) -> Vec<f64> {
        (0..self.n_mels()).map(|b| self.get(b, t)).collect()
    }
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= min_log_hz {
        min_log_mel + (f / min_log_hz).ln() / logstep
    } else {
        f / f_sp
    }
}

pub fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        min_log_hz * ((m - min_log_mel) * logstep).exp()
    } else {
        m * f_sp
    }
}

/// Triangular filters with area normalization, `[n_mels][fft/2+1]`.
pub struct MelFilterbank {
    pub weights: Vec<Vec<f64>>,
    /// Center frequency of each filter in Hz.
    pub centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, fft: usize, n_mels: usize) -> Self {
        let n_bins = fft / 2 + 1;
        let nyq = f64::from(sample_rate) / 2.0;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyq));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz: Vec<f64> = (0..n_bins)
            .map(|k| k as f64 * f64::from(sample_rate) / fft as f64)
            .collect();
        let weights = (0..n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                let norm = 2.0 / (r - l);
                bin_hz
                    .iter()
                    .map(|&f| {
                        let up = (f - l) / (c - l);
                        let down = (r - f) / (r - c);
                        up.min(down).max(0.0) * norm
                    })
                    .collect()
            })
            .collect();
        Self {
            weights,
            centers: edges[1..=n_mels].to_vec(),
        }
    }
}

/// Periodic Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let r = i.rem_euclid(period);
    if r < len as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

/// Number of centered frames, `ceil(len / hop)`.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len.div_ceil(hop)
}

/// Frame `t` of length `frame_len` centered on sample `t·hop`, reflect-padded.
pub(crate) fn centered_frame(wave: &[f64], t: usize, frame_len: usize, hop: usize, out: &mut [f64]) {
    let start = (t * hop) as isize - (frame_len / 2) as isize;
    for (k, o) in out.iter_mut().enumerate().take(frame_len) {
        *o = wave[reflect(start + k as isize, wave.len())];
    }
}

pub fn mel_extract(wave: &[f64], cfg: &MelConfig) -> Result<MelSpectrogram> {
    if wave.is_empty() {
        return Err(Error::input("cannot extract mels from an empty waveform"));
    }
    if cfg.win > cfg.fft || cfg.hop == 0 || cfg.n_mels == 0 {
        return Err(Error::config("invalid mel configuration"));
    }
    let t_frames = frame_count(wave.len(), cfg.hop);
    let bank = MelFilterbank::new(cfg.sample_rate, cfg.fft, cfg.n_mels);
    let window = hamming(cfg.win);
    let offset = (cfg.fft - cfg.win) / 2;
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft);
    let n_bins = cfg.fft / 2 + 1;
    let mut frame = vec![0.0; cfg.fft];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft];
    let mut mag = vec![0.0; n_bins];
    let mut out = vec![0.0; cfg.n_mels * t_frames];
    for t in 0..t_frames {
        centered_frame(wave, t, cfg.fft, cfg.hop, &mut frame);
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for k in 0..cfg.win {
            buf[offset + k] = Complex::new(frame[offset + k] * window[k], 0.0);
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        for (b, wts) in bank.weights.iter().enumerate() {
            let e: f64 = wts.iter().zip(&mag).map(|(w, m)| w * m).sum();
            out[b * t_frames + t] = e.max(LOG_FLOOR).ln();
        }
    }
    Ok(MelSpectrogram {
        frames: RealArray::new(vec![cfg.n_mels, t_frames], out)?,
        sample_rate: cfg.sample_rate,
        hop: cfg.hop,
        fft: cfg.fft,
        win: cfg.win,
    })
}
