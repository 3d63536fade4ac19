//! Mixture-of-logistics CDF coupling kernels.
//!
//! An element `x` is mapped by
//!
//! ```text
//! τ = Σ_m π_m · σ((x − μ_m)·e^{−s_m})
//! z = logit(τ)·e^{a} + b
//! ```
//!
//! which is strictly increasing in `x`. The log-Jacobian is
//! `a + log p(x) − log τ − log(1 − τ)` with `p` the mixture density.
//! All evaluation happens in log space: `log τ` and `log(1 − τ)` are
//! accumulated separately with log-sum-exp so neither tail cancels.

use std::sync::Once;

use crate::error::{Error, Result};

/// Bound on the affine log-scale `a`.
pub const A_MAX: f64 = 5.0;
/// Bound on the per-component log-scales `s`.
pub const S_MAX: f64 = 7.0;
/// CDF clamp applied before the logit in the forward direction.
pub const CDF_EPS: f64 = 1e-12;
/// Largest supported mixture size.
pub const MAX_MIX: usize = 16;

const MAX_BISECTION_STEPS: usize = 200;
const MAX_NEWTON_STEPS: usize = 5;
const MAX_BRACKET_WIDTH: f64 = 1e12;

static CLAMP_WARNING: Once = Once::new();

/// Per-element parameters of one coupling transform.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    log_pi: Vec<f64>,
    mu: Vec<f64>,
    s: Vec<f64>,
    a: f64,
    b: f64,
}

impl MixtureParams {
    /// Build from unnormalized mixture logits.
    pub fn new(logits: &[f64], mu: &[f64], s: &[f64], a: f64, b: f64) -> Result<Self> {
        let m = logits.len();
        if m == 0 || m > MAX_MIX || mu.len() != m || s.len() != m {
            return Err(Error::config(format!(
                "mixture needs 1..={MAX_MIX} components with matching lengths, got {}/{}/{}",
                logits.len(),
                mu.len(),
                s.len()
            )));
        }
        let all = logits.iter().chain(mu).chain(s).chain([&a, &b]);
        if !all.into_iter().all(|v| v.is_finite()) {
            return Err(Error::input("mixture parameters must be finite"));
        }
        if a.abs() > A_MAX || s.iter().any(|v| v.abs() > S_MAX) {
            return Err(Error::input(format!(
                "mixture scales out of range (|a| <= {A_MAX}, |s| <= {S_MAX})"
            )));
        }
        let mut log_pi = logits.to_vec();
        normalize_logits(&mut log_pi);
        Ok(Self {
            log_pi,
            mu: mu.to_vec(),
            s: s.to_vec(),
            a,
            b,
        })
    }

    /// Build from probability weights, which are renormalized.
    pub fn from_weights(pi: &[f64], mu: &[f64], s: &[f64], a: f64, b: f64) -> Result<Self> {
        if pi.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::input("mixture weights must be positive"));
        }
        let logits: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
        Self::new(&logits, mu, s, a, b)
    }

    /// Parameters for which the coupling is the identity map.
    pub fn identity(m: usize) -> Self {
        let lp = -(m as f64).ln();
        Self {
            log_pi: vec![lp; m],
            mu: vec![0.0; m],
            s: vec![0.0; m],
            a: 0.0,
            b: 0.0,
        }
    }

    /// Decode raw network outputs laid out as `[â, b, logits(M), μ(M), ŝ(M)]`,
    /// applying the soft clamps `a = A·tanh(â/A)`, `s = S·tanh(ŝ/S)`.
    pub fn from_raw(raw: &[f64], m: usize) -> Self {
        debug_assert_eq!(raw.len(), raw_len(m));
        let mut log_pi = raw[2..2 + m].to_vec();
        normalize_logits(&mut log_pi);
        Self {
            log_pi,
            mu: raw[2 + m..2 + 2 * m].to_vec(),
            s: raw[2 + 2 * m..2 + 3 * m]
                .iter()
                .map(|&v| soft_clamp(v, S_MAX))
                .collect(),
            a: soft_clamp(raw[0], A_MAX),
            b: raw[1],
        }
    }

    pub fn n_components(&self) -> usize {
        self.mu.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_pi.iter().map(|v| v.exp()).collect()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_pi
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// True when every component is the standard logistic and the affine
    /// part is trivial, so the coupling is exactly `z = x`.
    pub fn is_identity(&self) -> bool {
        self.a == 0.0
            && self.b == 0.0
            && self.mu.iter().all(|&v| v == 0.0)
            && self.s.iter().all(|&v| v == 0.0)
    }

    fn view(&self) -> Components<'_> {
        Components {
            log_pi: &self.log_pi,
            mu: &self.mu,
            s: &self.s,
        }
    }
}

/// Number of raw channels describing one element with `m` components.
pub fn raw_len(m: usize) -> usize {
    2 + 3 * m
}

pub(crate) fn soft_clamp(v: f64, bound: f64) -> f64 {
    bound * (v / bound).tanh()
}

fn normalize_logits(v: &mut [f64]) {
    let lse = log_sum_exp(v);
    v.iter_mut().for_each(|x| *x -= lse);
}

pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `log σ(u)` without overflow for any finite `u`.
pub(crate) fn log_sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        -(-u).exp().ln_1p()
    } else {
        u - u.exp().ln_1p()
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Copy)]
struct Components<'a> {
    log_pi: &'a [f64],
    mu: &'a [f64],
    s: &'a [f64],
}

/// `(log τ, log(1 − τ), log p)` at `x`, unclamped.
fn log_terms(x: f64, c: Components<'_>) -> (f64, f64, f64) {
    let m = c.mu.len();
    let mut lp = [0.0; MAX_MIX];
    let mut lq = [0.0; MAX_MIX];
    let mut ld = [0.0; MAX_MIX];
    for k in 0..m {
        let u = (x - c.mu[k]) * (-c.s[k]).exp();
        let ls = log_sigmoid(u);
        let lsn = log_sigmoid(-u);
        lp[k] = c.log_pi[k] + ls;
        lq[k] = c.log_pi[k] + lsn;
        ld[k] = c.log_pi[k] - c.s[k] + ls + lsn;
    }
    (
        log_sum_exp(&lp[..m]),
        log_sum_exp(&lq[..m]),
        log_sum_exp(&ld[..m]),
    )
}

fn check_finite(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::input(format!("non-finite input {x}")))
    }
}

/// Mixture CDF `Σ π_m σ((x − μ_m)e^{−s_m})`.
pub fn mix_log_cdf(x: f64, p: &MixtureParams) -> Result<f64> {
    check_finite(x)?;
    Ok(log_terms(x, p.view()).0.exp())
}

/// Log density of the logistic mixture.
pub fn mix_log_pdf(x: f64, p: &MixtureParams) -> Result<f64> {
    check_finite(x)?;
    Ok(log_terms(x, p.view()).2)
}

fn clamp_logs(lp: f64, lq: f64) -> (f64, f64) {
    let floor = CDF_EPS.ln();
    if lp < floor || lq < floor {
        CLAMP_WARNING.call_once(|| {
            log::warn!("mixture CDF saturated; clamping to [{CDF_EPS:e}, 1-{CDF_EPS:e}]")
        });
    }
    (lp.max(floor), lq.max(floor))
}

/// The x→z direction of the coupling: returns `(z, log|dz/dx|)`.
pub fn coupling_forward(x: f64, p: &MixtureParams) -> Result<(f64, f64)> {
    check_finite(x)?;
    if p.is_identity() {
        return Ok((x, 0.0));
    }
    let (lp, lq, lpdf) = log_terms(x, p.view());
    let (lp, lq) = clamp_logs(lp, lq);
    let z = (lp - lq) * p.a.exp() + p.b;
    let logdet = p.a + lpdf - lp - lq;
    Ok((z, logdet))
}

/// Invert [`coupling_forward`]: finds `x` with `|CDF(x) − σ((z−b)e^{−a})| ≤ tol`.
///
/// Bracketed bisection on the monotone logit of the CDF, then at most five
/// Newton steps kept inside the bracket.
pub fn coupling_inverse(z: f64, p: &MixtureParams, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::input("inversion tolerance must be positive"));
    }
    check_finite(z)?;
    if p.is_identity() {
        return Ok(z);
    }
    let c = p.view();
    let target = (z - p.b) * (-p.a).exp();
    let u = sigmoid(target);
    let logit = |x: f64| {
        let (lp, lq, _) = log_terms(x, c);
        lp - lq
    };
    let residual = |x: f64| (log_terms(x, c).0.exp() - u).abs();

    let reach = 40.0 * c.s.iter().map(|s| s.exp()).fold(0.0, f64::max);
    let mut lo = c.mu.iter().copied().fold(f64::INFINITY, f64::min) - reach;
    let mut hi = c.mu.iter().copied().fold(f64::NEG_INFINITY, f64::max) + reach;
    let mut step = hi - lo;
    while logit(lo) > target {
        lo -= step;
        step *= 2.0;
        if hi - lo > MAX_BRACKET_WIDTH {
            return Err(Error::numeric(
                "coupling_inverse",
                format!("bracket expansion exceeded width {MAX_BRACKET_WIDTH:e} (z={z})"),
            ));
        }
    }
    step = hi - lo;
    while logit(hi) < target {
        hi += step;
        step *= 2.0;
        if hi - lo > MAX_BRACKET_WIDTH {
            return Err(Error::numeric(
                "coupling_inverse",
                format!("bracket expansion exceeded width {MAX_BRACKET_WIDTH:e} (z={z})"),
            ));
        }
    }

    let mut x = 0.5 * (lo + hi);
    for _ in 0..MAX_BISECTION_STEPS {
        x = 0.5 * (lo + hi);
        if residual(x) <= tol {
            break;
        }
        if logit(x) < target {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= f64::EPSILON * x.abs().max(1.0) {
            break;
        }
    }

    // Newton polish in logit space; a step is kept only if it improves.
    let mut best = (log_terms(x, c), x);
    for _ in 0..MAX_NEWTON_STEPS {
        let ((lp, lq, lpdf), xc) = best;
        let f = lp - lq - target;
        if f == 0.0 {
            break;
        }
        let slope = (lpdf - lp).exp() + (lpdf - lq).exp();
        if !(slope > 0.0) || !slope.is_finite() {
            break;
        }
        let next = xc - f / slope;
        if !(next >= lo && next <= hi) || next == xc {
            break;
        }
        let terms = log_terms(next, c);
        if (terms.0 - terms.1 - target).abs() >= f.abs() {
            break;
        }
        best = (terms, next);
    }
    x = best.1;

    let r = residual(x);
    if r <= tol {
        Ok(x)
    } else {
        Err(Error::numeric(
            "coupling_inverse",
            format!("tolerance {tol:e} not reached, residual {r:e}"),
        ))
    }
}

/// Value and first derivatives of one coupling element with respect to the
/// input and every raw parameter `[â, b, logits(M), μ(M), ŝ(M)]`.
#[derive(Clone, Debug)]
pub(crate) struct CouplingGrad {
    pub z: f64,
    pub logdet: f64,
    pub dz_dx: f64,
    pub dld_dx: f64,
    pub dz_draw: [f64; 2 + 3 * MAX_MIX],
    pub dld_draw: [f64; 2 + 3 * MAX_MIX],
}

/// Evaluate the coupling at `x` from raw parameters, read through `raw(k)`.
/// With `with_grad = false` only `z` and `logdet` are filled in.
pub(crate) fn coupling_raw(
    x: f64,
    m: usize,
    raw: impl Fn(usize) -> f64,
    with_grad: bool,
) -> CouplingGrad {
    let a_hat = raw(0);
    let a = soft_clamp(a_hat, A_MAX);
    let b = raw(1);
    let mut logits = [0.0; MAX_MIX];
    let mut mu = [0.0; MAX_MIX];
    let mut s_hat = [0.0; MAX_MIX];
    let mut s = [0.0; MAX_MIX];
    for k in 0..m {
        logits[k] = raw(2 + k);
        mu[k] = raw(2 + m + k);
        s_hat[k] = raw(2 + 2 * m + k);
        s[k] = soft_clamp(s_hat[k], S_MAX);
    }
    let lse = log_sum_exp(&logits[..m]);
    let mut log_pi = [0.0; MAX_MIX];
    for k in 0..m {
        log_pi[k] = logits[k] - lse;
    }

    let mut u = [0.0; MAX_MIX];
    let mut r = [0.0; MAX_MIX];
    let mut tp = [0.0; MAX_MIX];
    let mut tq = [0.0; MAX_MIX];
    let mut td = [0.0; MAX_MIX];
    for k in 0..m {
        r[k] = (-s[k]).exp();
        u[k] = (x - mu[k]) * r[k];
        let ls = log_sigmoid(u[k]);
        let lsn = log_sigmoid(-u[k]);
        tp[k] = log_pi[k] + ls;
        tq[k] = log_pi[k] + lsn;
        td[k] = log_pi[k] - s[k] + ls + lsn;
    }
    let lp_raw = log_sum_exp(&tp[..m]);
    let lq_raw = log_sum_exp(&tq[..m]);
    let lpdf = log_sum_exp(&td[..m]);
    let (lp, lq) = clamp_logs(lp_raw, lq_raw);
    let floor = CDF_EPS.ln();
    let p_live = lp_raw >= floor;
    let q_live = lq_raw >= floor;

    let ea = a.exp();
    let ell = lp - lq;
    let mut out = CouplingGrad {
        z: ell * ea + b,
        logdet: a + lpdf - lp - lq,
        dz_dx: 0.0,
        dld_dx: 0.0,
        dz_draw: [0.0; 2 + 3 * MAX_MIX],
        dld_draw: [0.0; 2 + 3 * MAX_MIX],
    };
    let identity =
        a == 0.0 && b == 0.0 && mu[..m].iter().chain(&s[..m]).all(|&v| v == 0.0);
    if identity {
        out.z = x;
        out.logdet = 0.0;
    }
    if !with_grad {
        return out;
    }

    let da = 1.0 - (a_hat / A_MAX).tanh().powi(2);
    out.dz_draw[0] = ell * ea * da;
    out.dz_draw[1] = 1.0;
    out.dld_draw[0] = da;

    for k in 0..m {
        // posterior weights of the CDF, survival and density mixtures
        let alpha = if p_live { (tp[k] - lp).exp() } else { 0.0 };
        let beta = if q_live { (tq[k] - lq).exp() } else { 0.0 };
        let gamma = (td[k] - lpdf).exp();
        let pi = log_pi[k].exp();
        let sig = sigmoid(u[k]);
        let sig_n = sigmoid(-u[k]);

        let dlp_du = alpha * sig_n;
        let dlq_du = -beta * sig;
        let dlpdf_du = gamma * (sig_n - sig);
        let dell_du = dlp_du - dlq_du;
        let dld_du = dlpdf_du - dlp_du - dlq_du;

        out.dz_dx += ea * dell_du * r[k];
        out.dld_dx += dld_du * r[k];

        let ds = 1.0 - (s_hat[k] / S_MAX).tanh().powi(2);
        let dp_live = if p_live { alpha - pi } else { 0.0 };
        let dq_live = if q_live { beta - pi } else { 0.0 };
        out.dz_draw[2 + k] = ea * (dp_live - dq_live);
        out.dld_draw[2 + k] = (gamma - pi) - dp_live - dq_live;
        out.dz_draw[2 + m + k] = -ea * dell_du * r[k];
        out.dld_draw[2 + m + k] = -dld_du * r[k];
        out.dz_draw[2 + 2 * m + k] = -ea * dell_du * u[k] * ds;
        out.dld_draw[2 + 2 * m + k] = (-dld_du * u[k] - gamma) * ds;
    }
    out
}
