//! Invariant suite run by the `check` command, with optional fault injection.

use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{MelConfig, MelSpectrogram, UpsampledConditioner};
use crate::error::{Error, Result};
use crate::flowstack::{
    estimator_forward, flow_forward, flow_forward_observed, flow_reverse, squeeze, unsqueeze,
    FlowModel, ForwardObserver, ModelDims, SqueezedAudio,
};
use crate::metrics::{mcd, mcd_from_cepstra};
use crate::mixlogcdf::{coupling_inverse, mix_log_cdf, MixtureParams};
use crate::numcore::RealArray;
use crate::training::{nll_loss, nll_loss_and_grad, TrainChunk};

/// Deliberate defects used to confirm that the suite catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negate the log-determinant reported by the flow.
    LogdetSignFlip,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logdet-sign-flip" => Ok(Fault::LogdetSignFlip),
            other => Err(Error::config(format!("unknown fault {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn tiny_dims(h: usize) -> ModelDims {
    ModelDims {
        squeeze_h: h,
        n_flows: 2,
        n_mix: 2,
        channels: 4,
        n_layers: 2,
        emb_dim: 4,
        cond_channels: 3,
        n_mels: 5,
    }
}

fn random_model(h: usize, seed: u64) -> Result<FlowModel> {
    let mut m = FlowModel::new(tiny_dims(h), seed)?;
    m.randomize_head(seed ^ 0x5eed, 0.5);
    Ok(m)
}

fn uniform_vec(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_cond(n: usize, seed: u64) -> Result<UpsampledConditioner> {
    UpsampledConditioner::new(RealArray::new(vec![3, n], uniform_vec(3 * n, -1.0, 1.0, seed))?)
}

/// log|det| of the central-difference Jacobian of the `x → z` map.
pub fn dense_jacobian_log_det(
    model: &FlowModel,
    x: &[f64],
    cond: &UpsampledConditioner,
    eps: f64,
) -> Result<f64> {
    let n = x.len();
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for col in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[col] += eps;
        xm[col] -= eps;
        let zp = unsqueeze(&flow_reverse(model, &xp, cond)?.z);
        let zm = unsqueeze(&flow_reverse(model, &xm, cond)?.z);
        for row in 0..n {
            jac[(row, col)] = (zp[row] - zm[row]) / (2.0 * eps);
        }
    }
    Ok(jac.lu().determinant().abs().ln())
}

fn outcome(name: &'static str, r: Result<(bool, String)>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn identity_at_init(fault: Option<Fault>) -> Result<(bool, String)> {
    let model = FlowModel::new(tiny_dims(4), 1)?;
    let x = uniform_vec(24, -0.9, 0.9, 2);
    let run = flow_reverse(&model, &x, &random_cond(24, 3)?)?;
    let ld = if fault == Some(Fault::LogdetSignFlip) { -run.total_logdet } else { run.total_logdet };
    let same = run.z == squeeze(&x, 4)?;
    Ok((same && ld == 0.0, format!("Z = squeeze(x): {same}, logdet = {ld}")))
}

fn round_trip() -> Result<(bool, String)> {
    let model = random_model(8, 11)?;
    let x = uniform_vec(64, -0.8, 0.8, 12);
    let cond = random_cond(64, 13)?;
    let z = flow_reverse(&model, &x, &cond)?.z;
    let back = flow_forward(&model, &z, &cond, 1e-10)?;
    let err = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((err <= 1e-6, format!("max |x - x'| = {err:.3e}")))
}

fn jacobian(fault: Option<Fault>) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let model = random_model(4, 20 + seed)?;
        let x = uniform_vec(24, -0.8, 0.8, 30 + seed);
        let cond = random_cond(24, 40 + seed)?;
        let mut ld = flow_reverse(&model, &x, &cond)?.total_logdet;
        if fault == Some(Fault::LogdetSignFlip) {
            ld = -ld;
        }
        let oracle = dense_jacobian_log_det(&model, &x, &cond, 1e-5)?;
        worst = worst.max((ld - oracle).abs() / oracle.abs().max(1.0));
    }
    Ok((worst <= 1e-4, format!("max rel. err {worst:.3e}")))
}

fn mel_one_frame(seed: u64) -> Result<MelSpectrogram> {
    let cfg = MelConfig::default();
    Ok(MelSpectrogram {
        frames: RealArray::new(vec![5, 1], uniform_vec(5, -3.0, 1.0, seed))?,
        sample_rate: cfg.sample_rate,
        hop: cfg.hop,
        fft: cfg.fft,
        win: cfg.win,
    })
}

fn gradient() -> Result<(bool, String)> {
    let mut model = random_model(4, 50)?;
    let mel = mel_one_frame(51)?;
    let batch = vec![TrainChunk::from_utterance(&uniform_vec(24, -0.5, 0.5, 52), &mel, 0, 24)?];
    let lg = nll_loss_and_grad(&model, &batch)?;
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut count = 0;
    for p in 0..model.params().len() {
        for e in 0..model.params().values()[p].len() {
            let orig = model.params().values()[p].data()[e];
            model.params_mut().values_mut()[p].data_mut()[e] = orig + eps;
            let lp = nll_loss(&model, &batch)?;
            model.params_mut().values_mut()[p].data_mut()[e] = orig - eps;
            let lm = nll_loss(&model, &batch)?;
            model.params_mut().values_mut()[p].data_mut()[e] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            worst = worst.max((lg.grads[p].data()[e] - fd).abs() / fd.abs().max(1.0));
            count += 1;
        }
    }
    Ok((worst <= 1e-4, format!("{count} weights, max rel. err {worst:.3e}")))
}

#[derive(Default)]
struct Recorder {
    rows: Vec<(usize, usize, Vec<f64>)>,
    blocks: Vec<(usize, SqueezedAudio)>,
}

impl ForwardObserver for Recorder {
    fn row(&mut self, k: usize, i: usize, raw: &[f64]) {
        self.rows.push((k, i, raw.to_vec()));
    }
    fn block(&mut self, k: usize, x: &SqueezedAudio) {
        self.blocks.push((k, x.clone()));
    }
}

fn causality() -> Result<(bool, String)> {
    let model = random_model(8, 60)?;
    let cond = random_cond(64, 61)?;
    let z = squeeze(&uniform_vec(64, -1.0, 1.0, 62), 8)?;
    let mut rec = Recorder::default();
    flow_forward_observed(&model, &z, &cond, 1e-10, &mut rec)?;
    let mut seq_err = 0.0f64;
    for (k, x) in &rec.blocks {
        let grid = estimator_forward(&model, x, &cond, *k)?;
        for (_, i, raw) in rec.rows.iter().filter(|r| r.0 == *k) {
            let d = grid
                .raw_row(*i)
                .iter()
                .zip(raw)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            seq_err = seq_err.max(d);
        }
    }
    let mut leaks = 0;
    let base = squeeze(&uniform_vec(64, -1.0, 1.0, 63), 8)?;
    for k in 0..2 {
        let p0 = estimator_forward(&model, &base, &cond, k)?;
        for i in 0..8 {
            let mut g = base.grid().clone();
            g.data_mut()[i * 8..(i + 1) * 8].iter_mut().for_each(|v| *v += 0.5);
            let p1 = estimator_forward(&model, &SqueezedAudio::from_grid(g)?, &cond, k)?;
            leaks += (0..=i).filter(|&r| p0.raw_row(r) != p1.raw_row(r)).count();
        }
    }
    Ok((
        seq_err <= 1e-10 && leaks == 0,
        format!("sequential vs batch {seq_err:.3e}, rows changed at or above the perturbation: {leaks}"),
    ))
}

fn inversion() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut worst = 0.0f64;
    let trials = 2000;
    for _ in 0..trials {
        let m = rng.random_range(1..=4);
        let logits: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mu: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..2.0)).collect();
        let p = MixtureParams::new(&logits, &mu, &s, 0.0, 0.0)?;
        let u: f64 = rng.random_range(1e-6..1.0 - 1e-6);
        let z = (u / (1.0 - u)).ln();
        let x = coupling_inverse(z, &p, 1e-10)?;
        worst = worst.max((mix_log_cdf(x, &p)? - u).abs());
    }
    Ok((worst <= 1e-10, format!("{trials} inversions, max residual {worst:.3e}")))
}

fn metric_identities() -> Result<(bool, String)> {
    let cfg = MelConfig::default();
    let x: Vec<f64> = (0..4096).map(|i| 0.3 * (i as f64 * 0.061).sin()).collect();
    let self_mcd = mcd(&x, &x, &cfg)?;
    let a: Vec<Vec<f64>> = (0..10).map(|t| uniform_vec(80, -2.0, 2.0, t)).collect();
    let b: Vec<Vec<f64>> = a
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c[1] += 0.1;
            c
        })
        .collect();
    let offset = mcd_from_cepstra(&a, &b)?;
    let expected = 10.0 / std::f64::consts::LN_10 * (2.0f64 * 0.01).sqrt();
    Ok((
        self_mcd == 0.0 && (offset - expected).abs() <= 1e-4,
        format!("mcd(x,x) = {self_mcd}, offset case {offset:.6} (closed form {expected:.6})"),
    ))
}

/// Run every check; the suite passes when every entry passes.
pub fn run_checks(fault: Option<Fault>) -> Vec<CheckResult> {
    vec![
        outcome("identity-at-init", identity_at_init(fault)),
        outcome("round-trip", round_trip()),
        outcome("jacobian-logdet", jacobian(fault)),
        outcome("gradient", gradient()),
        outcome("causality", causality()),
        outcome("inversion", inversion()),
        outcome("metric-identities", metric_identities()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        for r in run_checks(None) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let results = run_checks(Some(Fault::LogdetSignFlip));
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
        assert!(failed.contains(&"jacobian-logdet"), "{failed:?}");
    }

    #[test]
    fn fault_names() {
        assert_eq!("logdet-sign-flip".parse::<Fault>().unwrap(), Fault::LogdetSignFlip);
        assert!("other".parse::<Fault>().is_err());
    }
}
