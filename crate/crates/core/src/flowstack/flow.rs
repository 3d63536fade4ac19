use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::conditioning::UpsampledConditioner;
use crate::error::{Error, Result};
use crate::mixlogcdf::{coupling_inverse, MixtureParams};
use crate::numcore::{RealArray, Tape, Var};

use super::estimator::{cond_biases, emb_biases, estimator_graph, LayerBiases, ParamGrid};
use super::model::{FlowModel, ModelVars};
use super::squeeze::{
    reverse_rows, row_prefix_index, row_reverse_index, squeeze, unsqueeze, SqueezedAudio,
};

/// Block `k` sees its input with rows reversed when `k` is odd.
pub fn block_reversed(k: usize) -> bool {
    k % 2 == 1
}

fn check_cond(model: &FlowModel, n: usize, cond: &UpsampledConditioner) -> Result<()> {
    if cond.len() != n || cond.channels() != model.dims().cond_channels {
        return Err(Error::config(format!(
            "conditioner [{}, {}] does not match {} channels over {n} samples",
            cond.channels(),
            cond.len(),
            model.dims().cond_channels
        )));
    }
    Ok(())
}

/// Conditioner biases in both row orientations.
pub(crate) struct OrientedBiases {
    natural: LayerBiases,
    reversed: Option<LayerBiases>,
}

impl OrientedBiases {
    pub fn build(
        tape: &mut Tape,
        model: &FlowModel,
        vars: &ModelVars,
        cond_sq: Var,
    ) -> Result<Self> {
        let natural = cond_biases(tape, model, vars, cond_sq)?;
        let reversed = if model.dims().n_flows > 1 {
            let shape = tape.value(natural.cond[0]).shape().to_vec();
            let idx = row_reverse_index(shape[0], shape[1], shape[2]);
            Some(natural.gathered(tape, &idx, &shape)?)
        } else {
            None
        };
        Ok(Self { natural, reversed })
    }

    pub fn for_block(&self, k: usize) -> &LayerBiases {
        if block_reversed(k) {
            self.reversed.as_ref().expect("reversed biases exist when K > 1")
        } else {
            &self.natural
        }
    }
}

/// Handles to the outputs of [`flow_graph`].
pub(crate) struct FlowGraph {
    pub z: Var,
    pub logdet: Var,
    pub ll: Var,
}

/// Full `x → z` pass on a tape. `x` is `[1, h, w]` in natural orientation,
/// `mask` (squeezed, natural) selects the elements that count.
pub(crate) fn flow_graph(
    tape: &mut Tape,
    model: &FlowModel,
    vars: &ModelVars,
    x: Var,
    cond_sq: Var,
    mask: Option<Arc<[bool]>>,
) -> Result<FlowGraph> {
    let shape = tape.value(x).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let rev = row_reverse_index(1, h, w);
    let mask_rev: Option<Arc<[bool]>> = mask.as_ref().map(|mk| reverse_rows(mk, h, w).into());
    let biases = OrientedBiases::build(tape, model, vars, cond_sq)?;
    let m = model.dims().n_mix;
    let mut state = x;
    let mut logdets = Vec::with_capacity(model.dims().n_flows);
    for k in 0..model.dims().n_flows {
        if k > 0 {
            state = tape.gather(state, rev.clone(), &shape)?;
        }
        let emb = emb_biases(tape, model, vars, k)?;
        let raw = estimator_graph(tape, model, vars, state, biases.for_block(k), &emb)?;
        let mk = if block_reversed(k) { mask_rev.clone() } else { mask.clone() };
        logdets.push(tape.coupling_logdet(state, raw, m, mk)?);
        state = tape.coupling(state, raw, m)?;
    }
    if block_reversed(model.dims().n_flows - 1) {
        state = tape.gather(state, rev, &shape)?;
    }
    let logdet = tape.sum(&logdets)?;
    let logp = tape.gaussian_log_prob(state, mask)?;
    let ll = tape.sum(&[logdet, logp])?;
    Ok(FlowGraph { z: state, logdet, ll })
}

/// Result of the `x → z` direction.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowRun {
    pub z: SqueezedAudio,
    pub total_logdet: f64,
    /// `total_logdet + Σ log N(z; 0, 1)` in nats.
    pub log_likelihood: f64,
}

fn leaf_grid(tape: &mut Tape, sq: &SqueezedAudio) -> Result<Var> {
    tape.leaf(sq.grid().clone().reshaped(&[1, sq.h(), sq.w()])?)
}

/// Map a waveform chunk to the latent grid (the analysis direction).
pub fn flow_reverse(
    model: &FlowModel,
    x: &[f64],
    cond: &UpsampledConditioner,
) -> Result<FlowRun> {
    check_cond(model, x.len(), cond)?;
    let sq = squeeze(x, model.dims().squeeze_h)?;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false)?;
    let xv = leaf_grid(&mut tape, &sq)?;
    let cv = tape.leaf(cond.squeezed(sq.h())?)?;
    let g = flow_graph(&mut tape, model, &vars, xv, cv, None)?;
    let z = tape.value(g.z).clone().reshaped(&[sq.h(), sq.w()])?;
    Ok(FlowRun {
        z: SqueezedAudio::from_grid(z)?,
        total_logdet: tape.value(g.logdet).item(),
        log_likelihood: tape.value(g.ll).item(),
    })
}

/// Exact log-likelihood of a chunk in nats.
pub fn log_likelihood(model: &FlowModel, x: &[f64], cond: &UpsampledConditioner) -> Result<f64> {
    Ok(flow_reverse(model, x, cond)?.log_likelihood)
}

/// Estimator output of block `k` for a whole grid in one pass. `x` is the
/// block's input as the block sees it (rows reversed for odd `k`); `cond`
/// is in natural sample order.
pub fn estimator_forward(
    model: &FlowModel,
    x: &SqueezedAudio,
    cond: &UpsampledConditioner,
    k: usize,
) -> Result<ParamGrid> {
    if k >= model.dims().n_flows {
        return Err(Error::config(format!("flow index {k} out of range")));
    }
    check_cond(model, x.h() * x.w(), cond)?;
    if x.h() != model.dims().squeeze_h {
        return Err(Error::config("grid height differs from squeeze_h"));
    }
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false)?;
    let xv = leaf_grid(&mut tape, x)?;
    let cv = tape.leaf(cond.squeezed(x.h())?)?;
    let biases = OrientedBiases::build(&mut tape, model, &vars, cv)?;
    let emb = emb_biases(&mut tape, model, &vars, k)?;
    let raw = estimator_graph(&mut tape, model, &vars, xv, biases.for_block(k), &emb)?;
    ParamGrid::new(model.dims().n_mix, tape.value(raw).clone())
}

/// Hooks into [`flow_forward_observed`].
pub trait ForwardObserver {
    /// Raw parameters `[2+3M, w]` used to generate row `i` of block `k`.
    fn row(&mut self, _k: usize, _i: usize, _raw: &[f64]) {}
    /// Input grid of block `k` once all its rows exist (block orientation).
    fn block(&mut self, _k: usize, _x: &SqueezedAudio) {}
}

impl ForwardObserver for () {}

/// Wall time split of the sampling direction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardTiming {
    pub estimator: Duration,
    pub inversion: Duration,
}

/// Generate a waveform chunk from the latent grid (the synthesis direction).
pub fn flow_forward(
    model: &FlowModel,
    z: &SqueezedAudio,
    cond: &UpsampledConditioner,
    tol: f64,
) -> Result<Vec<f64>> {
    Ok(flow_forward_observed(model, z, cond, tol, &mut ())?.0)
}

/// [`flow_forward`] with per-row hooks and stage timing.
pub fn flow_forward_observed(
    model: &FlowModel,
    z: &SqueezedAudio,
    cond: &UpsampledConditioner,
    tol: f64,
    observer: &mut dyn ForwardObserver,
) -> Result<(Vec<f64>, ForwardTiming)> {
    let dims = *model.dims();
    let (h, w) = (z.h(), z.w());
    if h != dims.squeeze_h {
        return Err(Error::config("latent grid height differs from squeeze_h"));
    }
    check_cond(model, h * w, cond)?;
    if !(tol > 0.0) {
        return Err(Error::input("inversion tolerance must be positive"));
    }
    let m = dims.n_mix;
    let p = dims.head_channels();
    let c2 = 2 * dims.channels;
    let mut timing = ForwardTiming::default();

    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false)?;
    let cv = tape.leaf(cond.squeezed(h)?)?;
    let biases = OrientedBiases::build(&mut tape, model, &vars, cv)?;
    let prefixes: Vec<Arc<[usize]>> = (1..=h).map(|r| row_prefix_index(c2, h, w, r)).collect();

    let last = dims.n_flows - 1;
    let mut y = z.grid().data().to_vec();
    if block_reversed(last) {
        y = reverse_rows(&y, h, w);
    }
    for k in (0..dims.n_flows).rev() {
        let emb = emb_biases(&mut tape, model, &vars, k)?;
        let mark = tape.len();
        let mut x = vec![0.0; h * w];
        for i in 0..h {
            let t0 = Instant::now();
            let rows = i + 1;
            let ctx = RealArray::new(vec![1, rows, w], x[..rows * w].to_vec())?;
            let xv = tape.leaf(ctx)?;
            let local = biases
                .for_block(k)
                .gathered(&mut tape, &prefixes[i], &[c2, rows, w])?;
            let raw = estimator_graph(&mut tape, model, &vars, xv, &local, &emb)?;
            let rd = tape.value(raw).data();
            let mut row_raw = Vec::with_capacity(p * w);
            for c in 0..p {
                let base = (c * rows + i) * w;
                row_raw.extend_from_slice(&rd[base..base + w]);
            }
            tape.truncate(mark);
            timing.estimator += t0.elapsed();
            observer.row(k, i, &row_raw);

            let t1 = Instant::now();
            let targets = &y[i * w..(i + 1) * w];
            let solved: Vec<f64> = (0..w)
                .into_par_iter()
                .map(|j| {
                    let v: Vec<f64> = (0..p).map(|c| row_raw[c * w + j]).collect();
                    let params = MixtureParams::from_raw(&v, m);
                    coupling_inverse(targets[j], &params, tol).map_err(|e| Error::Inversion {
                        flow: k,
                        row: i,
                        col: j,
                        detail: e.to_string(),
                    })
                })
                .collect::<Result<_>>()?;
            x[i * w..(i + 1) * w].copy_from_slice(&solved);
            timing.inversion += t1.elapsed();
        }
        observer.block(
            k,
            &SqueezedAudio::from_grid(RealArray::new(vec![h, w], x.clone())?)?,
        );
        y = if k > 0 { reverse_rows(&x, h, w) } else { x };
    }
    let out = SqueezedAudio::from_grid(RealArray::new(vec![h, w], y)?)?;
    Ok((unsqueeze(&out), timing))
}
