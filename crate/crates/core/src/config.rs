//! Line-based `key = value` configuration with `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mixlogcdf::MAX_MIX;

/// Total time upsampling of the conditioner (two stride-16 layers).
pub const UPSAMPLE_FACTOR: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub fft: usize,
    pub hop: usize,
    pub win: usize,
    pub squeeze_h: usize,
    pub n_flows: usize,
    pub n_mix: usize,
    pub channels: usize,
    pub n_layers: usize,
    pub emb_dim: usize,
    pub cond_channels: usize,
    pub lr0: f64,
    pub anneal_every: u64,
    pub batch: usize,
    pub chunk_len: usize,
    pub max_iters: u64,
    pub seed: u64,
    pub inverse_tol: f64,
    pub ckpt_every: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            n_mels: 80,
            fft: 1024,
            hop: 256,
            win: 1024,
            squeeze_h: 16,
            n_flows: 8,
            n_mix: 4,
            channels: 32,
            n_layers: 4,
            emb_dim: 64,
            cond_channels: 32,
            lr0: 2e-4,
            anneal_every: 2000,
            batch: 2,
            chunk_len: 4000,
            max_iters: 10_000,
            seed: 1234,
            inverse_tol: 1e-8,
            ckpt_every: 1000,
        }
    }
}

const KEYS: &[&str] = &[
    "sample_rate",
    "n_mels",
    "fft",
    "hop",
    "win",
    "squeeze_h",
    "n_flows",
    "n_mix",
    "channels",
    "n_layers",
    "emb_dim",
    "cond_channels",
    "lr0",
    "anneal_every",
    "batch",
    "chunk_len",
    "max_iters",
    "seed",
    "inverse_tol",
    "ckpt_every",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for key {key}")))
}

impl Config {
    /// Parse `key = value` lines over the defaults, then validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "sample_rate" => self.sample_rate = parse(key, value)?,
            "n_mels" => self.n_mels = parse(key, value)?,
            "fft" => self.fft = parse(key, value)?,
            "hop" => self.hop = parse(key, value)?,
            "win" => self.win = parse(key, value)?,
            "squeeze_h" => self.squeeze_h = parse(key, value)?,
            "n_flows" => self.n_flows = parse(key, value)?,
            "n_mix" => self.n_mix = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "emb_dim" => self.emb_dim = parse(key, value)?,
            "cond_channels" => self.cond_channels = parse(key, value)?,
            "lr0" => self.lr0 = parse(key, value)?,
            "anneal_every" => self.anneal_every = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "chunk_len" => self.chunk_len = parse(key, value)?,
            "max_iters" => self.max_iters = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "inverse_tol" => self.inverse_tol = parse(key, value)?,
            "ckpt_every" => self.ckpt_every = parse(key, value)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sample_rate", self.sample_rate as u64),
            ("n_mels", self.n_mels as u64),
            ("fft", self.fft as u64),
            ("hop", self.hop as u64),
            ("win", self.win as u64),
            ("squeeze_h", self.squeeze_h as u64),
            ("n_flows", self.n_flows as u64),
            ("n_mix", self.n_mix as u64),
            ("channels", self.channels as u64),
            ("n_layers", self.n_layers as u64),
            ("emb_dim", self.emb_dim as u64),
            ("cond_channels", self.cond_channels as u64),
            ("anneal_every", self.anneal_every),
            ("batch", self.batch as u64),
            ("chunk_len", self.chunk_len as u64),
            ("max_iters", self.max_iters),
            ("ckpt_every", self.ckpt_every),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{k} must be positive")));
        }
        if !(self.lr0 > 0.0) || !(self.inverse_tol > 0.0) {
            return Err(Error::config("lr0 and inverse_tol must be positive"));
        }
        if self.n_mix > MAX_MIX {
            return Err(Error::config(format!("n_mix must be <= {MAX_MIX}")));
        }
        if self.hop != UPSAMPLE_FACTOR {
            return Err(Error::config(format!(
                "hop must equal the upsampling factor {UPSAMPLE_FACTOR}"
            )));
        }
        if self.win > self.fft {
            return Err(Error::config("win must not exceed fft"));
        }
        if self.chunk_len % self.squeeze_h != 0 {
            return Err(Error::config("chunk_len must be divisible by squeeze_h"));
        }
        if UPSAMPLE_FACTOR % self.squeeze_h != 0 {
            return Err(Error::config(format!(
                "squeeze_h must divide {UPSAMPLE_FACTOR}"
            )));
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "sample_rate" => self.sample_rate.to_string(),
            "n_mels" => self.n_mels.to_string(),
            "fft" => self.fft.to_string(),
            "hop" => self.hop.to_string(),
            "win" => self.win.to_string(),
            "squeeze_h" => self.squeeze_h.to_string(),
            "n_flows" => self.n_flows.to_string(),
            "n_mix" => self.n_mix.to_string(),
            "channels" => self.channels.to_string(),
            "n_layers" => self.n_layers.to_string(),
            "emb_dim" => self.emb_dim.to_string(),
            "cond_channels" => self.cond_channels.to_string(),
            "lr0" => format!("{:e}", self.lr0),
            "anneal_every" => self.anneal_every.to_string(),
            "batch" => self.batch.to_string(),
            "chunk_len" => self.chunk_len.to_string(),
            "max_iters" => self.max_iters.to_string(),
            "seed" => self.seed.to_string(),
            "inverse_tol" => format!("{:e}", self.inverse_tol),
            "ckpt_every" => self.ckpt_every.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Fully resolved configuration in a stable key order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = Config::default();
        cfg.lr0 = 3.5e-4;
        cfg.channels = 17;
        let back = Config::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = Config::parse("# desk run\n\nchannels = 16 # narrower\nseed=7\n").unwrap();
        assert_eq!(cfg.channels, 16);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(Config::parse("colour = blue"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_combinations_rejected() {
        assert!(Config::parse("chunk_len = 4001").is_err());
        assert!(Config::parse("hop = 200").is_err());
        assert!(Config::parse("squeeze_h = 3\nchunk_len = 3000").is_err());
        assert!(Config::parse("n_mix = 0").is_err());
        assert!(Config::parse("channels = x").is_err());
    }
}
