use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::mixlogcdf::{raw_len, MAX_MIX};
use crate::numcore::{RealArray, Tape, Var};

/// Time kernel of both upsampler layers.
pub const UPSAMPLE_KERNEL_T: usize = 32;
/// Band kernel of both upsampler layers.
pub const UPSAMPLE_KERNEL_B: usize = 3;
/// Time stride of each upsampler layer.
pub const UPSAMPLE_STRIDE: usize = 16;
/// Leading samples dropped from each transposed conv so frames stay centered.
pub const UPSAMPLE_CROP: usize = 16;
pub const LEAKY_SLOPE: f64 = 0.4;
/// Height extent of the gated conv.
pub const GATE_KERNEL_H: usize = 3;
/// Width extent of the gated conv.
pub const GATE_KERNEL_W: usize = 3;

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub squeeze_h: usize,
    pub n_flows: usize,
    pub n_mix: usize,
    pub channels: usize,
    pub n_layers: usize,
    pub emb_dim: usize,
    pub cond_channels: usize,
    pub n_mels: usize,
}

impl ModelDims {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            squeeze_h: cfg.squeeze_h,
            n_flows: cfg.n_flows,
            n_mix: cfg.n_mix,
            channels: cfg.channels,
            n_layers: cfg.n_layers,
            emb_dim: cfg.emb_dim,
            cond_channels: cfg.cond_channels,
            n_mels: cfg.n_mels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.squeeze_h,
            self.n_flows,
            self.n_mix,
            self.channels,
            self.n_layers,
            self.emb_dim,
            self.cond_channels,
            self.n_mels,
        ];
        if fields.contains(&0) {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.n_mix > MAX_MIX {
            return Err(Error::config(format!("n_mix must be <= {MAX_MIX}")));
        }
        Ok(())
    }

    /// Raw parameter channels per element: `2 + 3M`.
    pub fn head_channels(&self) -> usize {
        raw_len(self.n_mix)
    }

    /// Width dilation of layer `l`: 1, 2, 4, 8, 1, 2, ...
    pub fn dilation(&self, l: usize) -> usize {
        1 << (l % 4)
    }
}

/// Indices of one residual layer's tensors in the parameter list.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerIdx {
    pub pre_w: usize,
    pub pre_b: usize,
    pub gate_w: usize,
    pub gate_b: usize,
    pub cond_w: usize,
    pub emb_w: usize,
    pub post_w: usize,
    pub post_b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub up1_w: usize,
    pub up1_b: usize,
    pub up2_w: usize,
    pub up2_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub in_w: usize,
    pub in_b: usize,
    pub layers: Vec<LayerIdx>,
    pub head_w: usize,
    pub head_b: usize,
    pub head_scale: usize,
    pub embeddings: usize,
}

/// Ordered, named weight tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<RealArray>,
}

impl ParamSet {
    fn push(&mut self, name: String, value: RealArray) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[RealArray] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [RealArray] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&RealArray> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// The shared-estimator flow with its conditioner upsampler.
///
/// A single estimator weight set serves all `K` flow blocks; block `k` is
/// identified by row `k` of the embedding table. The raw head output is
/// multiplied by a per-channel scale that starts at zero, so a fresh model
/// is the identity flow.
#[derive(Clone, Debug)]
pub struct FlowModel {
    dims: ModelDims,
    params: ParamSet,
    layout: Layout,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> RealArray {
    RealArray::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl FlowModel {
    /// Freshly initialized model; deterministic in `seed`.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = dims.channels;
        let p = dims.head_channels();
        let mut ps = ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        };
        let up_bound = (3.0 / (UPSAMPLE_KERNEL_B * 2) as f64).sqrt();
        let up_shape = [1, 1, UPSAMPLE_KERNEL_B, UPSAMPLE_KERNEL_T];
        let up1_w = ps.push("upsample.conv1.weight".into(), uniform(&mut rng, &up_shape, up_bound));
        let up1_b = ps.push("upsample.conv1.bias".into(), RealArray::zeros(&[1]));
        let up2_w = ps.push("upsample.conv2.weight".into(), uniform(&mut rng, &up_shape, up_bound));
        let up2_b = ps.push("upsample.conv2.bias".into(), RealArray::zeros(&[1]));
        let proj_w = ps.push(
            "upsample.proj.weight".into(),
            uniform(
                &mut rng,
                &[dims.cond_channels, dims.n_mels, 1, 1],
                0.1 / (dims.n_mels as f64).sqrt(),
            ),
        );
        let proj_b = ps.push("upsample.proj.bias".into(), RealArray::zeros(&[dims.cond_channels]));

        let in_w = ps.push("estimator.input.weight".into(), uniform(&mut rng, &[c, 1, 1, 1], 1.0));
        let in_b = ps.push("estimator.input.bias".into(), RealArray::zeros(&[c]));
        let cb = 1.0 / (c as f64).sqrt();
        let mut layers = Vec::with_capacity(dims.n_layers);
        for l in 0..dims.n_layers {
            let pre = format!("estimator.layers.{l}");
            layers.push(LayerIdx {
                pre_w: ps.push(format!("{pre}.pre.weight"), uniform(&mut rng, &[c, c, 1, 1], cb)),
                pre_b: ps.push(format!("{pre}.pre.bias"), RealArray::zeros(&[c])),
                gate_w: ps.push(
                    format!("{pre}.gate.weight"),
                    uniform(
                        &mut rng,
                        &[2 * c, c, GATE_KERNEL_H, GATE_KERNEL_W],
                        1.0 / ((c * GATE_KERNEL_H * GATE_KERNEL_W) as f64).sqrt(),
                    ),
                ),
                gate_b: ps.push(format!("{pre}.gate.bias"), RealArray::zeros(&[2 * c])),
                cond_w: ps.push(
                    format!("{pre}.cond.weight"),
                    uniform(
                        &mut rng,
                        &[2 * c, dims.cond_channels, 1, 1],
                        1.0 / (dims.cond_channels as f64).sqrt(),
                    ),
                ),
                emb_w: ps.push(
                    format!("{pre}.emb.weight"),
                    uniform(&mut rng, &[2 * c, dims.emb_dim], 1.0 / (dims.emb_dim as f64).sqrt()),
                ),
                post_w: ps.push(format!("{pre}.post.weight"), uniform(&mut rng, &[c, c, 1, 1], cb)),
                post_b: ps.push(format!("{pre}.post.bias"), RealArray::zeros(&[c])),
            });
        }
        let head_w = ps.push("estimator.head.weight".into(), uniform(&mut rng, &[p, c, 1, 1], cb));
        let head_b = ps.push("estimator.head.bias".into(), RealArray::zeros(&[p]));
        let head_scale = ps.push("estimator.head.scale".into(), RealArray::zeros(&[p]));
        let embeddings = ps.push(
            "embeddings".into(),
            RealArray::from_fn(&[dims.n_flows, dims.emb_dim], |_| {
                StandardNormal.sample(&mut rng)
            }),
        );
        Ok(Self {
            dims,
            params: ps,
            layout: Layout {
                up1_w,
                up1_b,
                up2_w,
                up2_b,
                proj_w,
                proj_b,
                in_w,
                in_b,
                layers,
                head_w,
                head_b,
                head_scale,
                embeddings,
            },
        })
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        Self::new(ModelDims::from_config(cfg), cfg.seed)
    }

    /// Replace the weights by `values` (same names and shapes, same order).
    pub fn with_params(dims: ModelDims, names: &[String], values: Vec<RealArray>) -> Result<Self> {
        let mut model = Self::new(dims, 0)?;
        if names != model.params.names.as_slice() {
            return Err(Error::config("parameter names do not match the model layout"));
        }
        for (slot, v) in model.params.values.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::config(format!(
                    "parameter shape mismatch: expected {:?}, got {:?}",
                    slot.shape(),
                    v.shape()
                )));
            }
            *slot = v;
        }
        Ok(model)
    }

    /// Give the output head a nonzero random scale and bias so the flow is
    /// no longer the identity. Used for tests and self-checks.
    pub fn randomize_head(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = self.dims.head_channels();
        self.params.values[self.layout.head_scale] =
            RealArray::from_fn(&[p], |_| scale * rng.random_range(0.5..1.5));
        self.params.values[self.layout.head_b] =
            RealArray::from_fn(&[p], |_| scale * rng.random_range(-1.0..1.0));
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Put every weight on `tape`, as trainable parameters or constants.
    pub(crate) fn register(&self, tape: &mut Tape, trainable: bool) -> Result<ModelVars> {
        let vars = self
            .params
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.leaf(v.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelVars { vars })
    }
}

/// Tape handles for every parameter, in [`ParamSet`] order.
#[derive(Clone, Debug)]
pub(crate) struct ModelVars {
    pub vars: Vec<Var>,
}

impl ModelVars {
    pub fn at(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}
