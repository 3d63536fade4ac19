use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mixlogcdf::MixtureParams;
use crate::numcore::{Conv2dSpec, RealArray, Tape, Var};

use super::model::{FlowModel, ModelVars};

/// Per-layer additive terms of the gated pre-activation for one grid.
pub(crate) struct LayerBiases {
    /// `[2C, h, w]` projected conditioner, one per layer.
    pub cond: Vec<Var>,
}

/// Conditioner projections for every layer; `cond_sq` is `[c_cond, h, w]`.
pub(crate) fn cond_biases(
    tape: &mut Tape,
    model: &FlowModel,
    vars: &ModelVars,
    cond_sq: Var,
) -> Result<LayerBiases> {
    let cond = model
        .layout()
        .layers
        .iter()
        .map(|l| tape.conv2d(cond_sq, vars.at(l.cond_w), None, Conv2dSpec::causal(1)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerBiases { cond })
}

impl LayerBiases {
    /// Same gather applied to every layer's bias.
    pub fn gathered(&self, tape: &mut Tape, index: &Arc<[usize]>, shape: &[usize]) -> Result<Self> {
        let cond = self
            .cond
            .iter()
            .map(|&v| tape.gather(v, index.clone(), shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cond })
    }
}

/// Projected embedding of block `k` for every layer, each `[2C]`.
pub(crate) fn emb_biases(
    tape: &mut Tape,
    model: &FlowModel,
    vars: &ModelVars,
    k: usize,
) -> Result<Vec<Var>> {
    let d = model.dims().emb_dim;
    let idx: Arc<[usize]> = (k * d..(k + 1) * d).collect();
    let e = tape.gather(vars.at(model.layout().embeddings), idx, &[d])?;
    model
        .layout()
        .layers
        .iter()
        .map(|l| tape.matvec(vars.at(l.emb_w), e))
        .collect()
}

/// Shared estimator on `x: [1, h, w]`, giving raw parameters `[2+3M, h, w]`.
/// Output row `i` depends on input rows `< i` only.
pub(crate) fn estimator_graph(
    tape: &mut Tape,
    model: &FlowModel,
    vars: &ModelVars,
    x: Var,
    cond: &LayerBiases,
    emb: &[Var],
) -> Result<Var> {
    let lay = model.layout();
    let mut h = tape.conv2d(x, vars.at(lay.in_w), Some(vars.at(lay.in_b)), Conv2dSpec::strict(1))?;
    for (l, li) in lay.layers.iter().enumerate() {
        let y = tape.conv2d(h, vars.at(li.pre_w), Some(vars.at(li.pre_b)), Conv2dSpec::causal(1))?;
        let y = tape.conv2d(
            y,
            vars.at(li.gate_w),
            Some(vars.at(li.gate_b)),
            Conv2dSpec::causal(model.dims().dilation(l)),
        )?;
        let y = tape.add(y, cond.cond[l])?;
        let y = tape.add_channel_bias(y, emb[l])?;
        let y = tape.gated_activation(y)?;
        let y = tape.conv2d(y, vars.at(li.post_w), Some(vars.at(li.post_b)), Conv2dSpec::causal(1))?;
        h = tape.add(h, y)?;
    }
    let out = tape.conv2d(h, vars.at(lay.head_w), Some(vars.at(lay.head_b)), Conv2dSpec::causal(1))?;
    tape.channel_scale(out, vars.at(lay.head_scale))
}

/// Per-element parameters of one row after the soft clamps.
#[derive(Clone, Debug, PartialEq)]
pub struct RowParams {
    pub m: usize,
    /// `[w]`
    pub a: Vec<f64>,
    /// `[w]`
    pub b: Vec<f64>,
    /// `[w × M]`, normalized log weights.
    pub log_pi: Vec<f64>,
    /// `[w × M]`
    pub mu: Vec<f64>,
    /// `[w × M]`
    pub s: Vec<f64>,
}

/// Raw estimator output for a whole grid, `[2+3M, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrid {
    m: usize,
    raw: RealArray,
}

impl ParamGrid {
    pub(crate) fn new(m: usize, raw: RealArray) -> Result<Self> {
        if raw.shape().len() != 3 || raw.shape()[0] != crate::mixlogcdf::raw_len(m) {
            return Err(Error::config("parameter grid shape mismatch"));
        }
        Ok(Self { m, raw })
    }

    pub fn h(&self) -> usize {
        self.raw.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.raw.shape()[2]
    }

    pub fn raw(&self) -> &RealArray {
        &self.raw
    }

    /// Raw channels of row `i`, channel-major `[2+3M, w]`.
    pub fn raw_row(&self, i: usize) -> Vec<f64> {
        let (h, w) = (self.h(), self.w());
        let p = self.raw.shape()[0];
        let mut out = Vec::with_capacity(p * w);
        for c in 0..p {
            let base = (c * h + i) * w;
            out.extend_from_slice(&self.raw.data()[base..base + w]);
        }
        out
    }

    pub fn params(&self, i: usize, j: usize) -> MixtureParams {
        let (h, w) = (self.h(), self.w());
        let p = self.raw.shape()[0];
        let v: Vec<f64> = (0..p).map(|c| self.raw.data()[(c * h + i) * w + j]).collect();
        MixtureParams::from_raw(&v, self.m)
    }

    pub fn row(&self, i: usize) -> RowParams {
        let mut rp = RowParams {
            m: self.m,
            a: Vec::new(),
            b: Vec::new(),
            log_pi: Vec::new(),
            mu: Vec::new(),
            s: Vec::new(),
        };
        for j in 0..self.w() {
            let p = self.params(i, j);
            rp.a.push(p.a());
            rp.b.push(p.b());
            rp.log_pi.extend_from_slice(p.log_weights());
            rp.mu.extend_from_slice(p.mu());
            rp.s.extend_from_slice(p.s());
        }
        rp
    }
}
