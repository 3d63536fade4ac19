use std::sync::Arc;

use rayon::prelude::*;

use crate::conditioning::{conditioner_graph, mel_window, MelSpectrogram};
use crate::error::{Error, Result};
use crate::flowstack::flow_graph;
use crate::flowstack::squeeze::{squeeze_channels, squeeze_index};
use crate::flowstack::FlowModel;
use crate::numcore::{RealArray, Tape};

/// One training example: a (possibly padded) waveform chunk with the mel
/// frames that condition it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainChunk {
    /// `chunk_len` samples; zeros past `valid`.
    pub wave: Vec<f64>,
    /// Number of real samples at the front of `wave`.
    pub valid: usize,
    mel_window: RealArray,
    offset: usize,
}

impl TrainChunk {
    /// Samples `start..start+chunk_len` of an utterance; short tails are
    /// zero-padded and excluded from the loss.
    pub fn from_utterance(
        wave: &[f64],
        mel: &MelSpectrogram,
        start: usize,
        chunk_len: usize,
    ) -> Result<Self> {
        if start >= wave.len().max(1) {
            return Err(Error::input("chunk start beyond the utterance"));
        }
        let valid = (wave.len() - start).min(chunk_len);
        let mut chunk = vec![0.0; chunk_len];
        chunk[..valid].copy_from_slice(&wave[start..start + valid]);
        let (mel_window, offset) = mel_window(mel, start, chunk_len)?;
        Ok(Self {
            wave: chunk,
            valid,
            mel_window,
            offset,
        })
    }
}

/// Mean per-dimension negative log-likelihood and its gradient with
/// respect to every model parameter, in [`crate::flowstack::ParamSet`] order.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<RealArray>,
}

fn tag(b: usize, e: Error) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op,
            detail: format!("batch item {b}: {detail}"),
        },
        other => other,
    }
}

fn item(model: &FlowModel, c: &TrainChunk, with_grad: bool) -> Result<(f64, Option<Vec<RealArray>>)> {
    let dims = model.dims();
    let n = c.wave.len();
    let h = dims.squeeze_h;
    if n == 0 || n % h != 0 {
        return Err(Error::config(format!("chunk length {n} not divisible by {h}")));
    }
    if c.valid == 0 {
        return Err(Error::input("chunk has no valid samples"));
    }
    let w = n / h;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, with_grad)?;
    let cond = conditioner_graph(&mut tape, model, &vars, c.mel_window.clone(), c.offset, n)?;
    let cc = dims.cond_channels;
    let cond_sq = tape.gather(cond, squeeze_index(cc, n, h), &[cc, h, w])?;
    let x = tape.leaf(RealArray::new(vec![1, h, w], squeeze_channels(&c.wave, 1, h))?)?;
    let mask: Option<Arc<[bool]>> = (c.valid < n).then(|| {
        let flat: Vec<f64> = (0..n).map(|i| if i < c.valid { 1.0 } else { 0.0 }).collect();
        squeeze_channels(&flat, 1, h).iter().map(|&v| v > 0.5).collect()
    });
    let g = flow_graph(&mut tape, model, &vars, x, cond_sq, mask)?;
    let scale = -1.0 / c.valid as f64;
    let loss = tape.value(g.ll).item() * scale;
    if !loss.is_finite() {
        return Err(Error::numeric("nll_loss", format!("loss is {loss}")));
    }
    if !with_grad {
        return Ok((loss, None));
    }
    let grads = tape.backward(g.ll)?;
    let out = vars
        .vars
        .iter()
        .map(|&v| {
            let mut gv = grads.wrt(v);
            gv.data_mut().iter_mut().for_each(|x| *x *= scale);
            gv
        })
        .collect();
    Ok((loss, Some(out)))
}

fn run(model: &FlowModel, batch: &[TrainChunk], with_grad: bool) -> Result<(f64, Option<Vec<RealArray>>)> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let parts: Vec<(f64, Option<Vec<RealArray>>)> = batch
        .par_iter()
        .enumerate()
        .map(|(b, c)| item(model, c, with_grad).map_err(|e| tag(b, e)))
        .collect::<Result<_>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut total: Option<Vec<RealArray>> = None;
    for (l, g) in parts {
        loss += l;
        if let Some(g) = g {
            match total.as_mut() {
                None => total = Some(g),
                Some(t) => {
                    for (acc, gi) in t.iter_mut().zip(&g) {
                        acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }
    if let Some(t) = total.as_mut() {
        for g in t.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok((loss * inv, total))
}

/// Mean over the batch of `−log p(x) / valid_samples`.
pub fn nll_loss(model: &FlowModel, batch: &[TrainChunk]) -> Result<f64> {
    Ok(run(model, batch, false)?.0)
}

pub fn nll_loss_and_grad(model: &FlowModel, batch: &[TrainChunk]) -> Result<LossGrad> {
    let (loss, grads) = run(model, batch, true)?;
    Ok(LossGrad {
        loss,
        grads: grads.expect("gradients requested"),
    })
}
