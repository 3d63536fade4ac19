use crate::error::{Error, Result};
use crate::numcore::RealArray;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Global gradient L2 norm above which gradients are rescaled.
pub const GRAD_CLIP: f64 = 100.0;

/// `lr0 · 0.5^floor(iter / anneal_every)`.
pub fn lr_schedule(iter: u64, lr0: f64, anneal_every: u64) -> f64 {
    let halvings = iter / anneal_every.max(1);
    lr0 * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
}

/// Rescale `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [RealArray], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<RealArray>,
    pub v: Vec<RealArray>,
    pub t: u64,
}

impl Adam {
    pub fn new(shapes: &[RealArray]) -> Self {
        Self {
            m: shapes.iter().map(|p| RealArray::zeros(p.shape())).collect(),
            v: shapes.iter().map(|p| RealArray::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [RealArray], grads: &[RealArray], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::config("optimizer state does not match parameters"));
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
