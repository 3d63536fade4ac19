//! Reverse-mode gradient tape.
//!
//! Every primitive appends one node holding its output value. `backward`
//! walks the nodes in reverse and accumulates vector-Jacobian products into
//! the inputs that transitively depend on a parameter. Kernels recompute what
//! they need during the backward pass instead of saving scratch buffers.

use std::sync::Arc;

use super::array::RealArray;
use super::kernels::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward,
    Conv2dSpec, ConvGeom, ConvTGeom,
};
use crate::error::{Error, Result};
use crate::mixlogcdf::{coupling_raw, raw_len, sigmoid, MAX_MIX};

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index map for [`Tape::gather`]; `GATHER_ZERO` produces a zero.
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvTGeom,
    },
    Add(Var, Var),
    AddChannelBias(Var, Var),
    ChannelScale(Var, Var),
    Gated(Var),
    LeakyRelu(Var, f64),
    MatVec(Var, Var),
    Gather(Var, Arc<[usize]>),
    Coupling {
        x: Var,
        raw: Var,
        m: usize,
    },
    CouplingLogDet {
        x: Var,
        raw: Var,
        m: usize,
        mask: Option<Arc<[bool]>>,
    },
    GaussianLogProb {
        z: Var,
        mask: Option<Arc<[bool]>>,
    },
    Scale(Var, f64),
    Sum(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT2d { .. } => "conv_transpose2d",
            Op::Add(..) => "add",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::ChannelScale(..) => "channel_scale",
            Op::Gated(..) => "gated_activation",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::MatVec(..) => "matvec",
            Op::Gather(..) => "gather",
            Op::Coupling { .. } => "coupling",
            Op::CouplingLogDet { .. } => "coupling_logdet",
            Op::GaussianLogProb { .. } => "gaussian_log_prob",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: RealArray,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations. One tape per forward pass.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the parameters of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as an array; exactly zero for nodes the loss does not reach.
    pub fn wrt(&self, v: Var) -> RealArray {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => RealArray::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => RealArray::zeros(shape),
        }
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::config(format!("{op}: {detail}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node recorded after `mark` (a previous [`Tape::len`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn value(&self, v: Var) -> &RealArray {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: RealArray, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric(op.name(), "non-finite value in forward pass"));
        }
        let needs_grad = matches!(op, Op::Param) || inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, value: RealArray) -> Result<Var> {
        self.push(value, Op::Leaf, &[])
    }

    /// Trainable input; gradients flow back to it.
    pub fn param(&mut self, value: RealArray) -> Result<Var> {
        self.push(value, Op::Param, &[])
    }

    /// `[Ci,H,W] ⊛ [Co,Ci,kh,kw] (+ bias[Co]) → [Co,H,W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), spec)?;
        if let Some(b) = b {
            if self.value(b).len() != geom.c_out {
                return Err(shape_err("conv2d", "bias length mismatch".into()));
            }
        }
        let out = conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = RealArray::new(vec![geom.c_out, geom.h, geom.w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Transposed conv `[Ci,B,T] → [Co,B,T·stride]`, see [`ConvTGeom`].
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        crop: usize,
    ) -> Result<Var> {
        let geom = ConvTGeom::new(self.value(x).shape(), self.value(w).shape(), stride, crop)?;
        if let Some(b) = b {
            if self.value(b).len() != geom.c_out {
                return Err(shape_err("conv_transpose2d", "bias length mismatch".into()));
            }
        }
        let out = conv_transpose2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = RealArray::new(vec![geom.c_out, geom.bands, geom.t_out()], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::ConvT2d { x, w, b, geom }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = RealArray::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// `x[c, ...] + bias[c]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.shape()[0];
        if vb.len() != c {
            return Err(shape_err("add_channel_bias", "bias length mismatch".into()));
        }
        let inner = vx.len() / c;
        let mut data = vx.data().to_vec();
        for (ch, chunk) in data.chunks_mut(inner).enumerate() {
            let bv = vb.data()[ch];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let value = RealArray::new(vx.shape().to_vec(), data)?;
        self.push(value, Op::AddChannelBias(x, bias), &[x, bias])
    }

    /// `x[c, ...] · scale[c]`.
    pub fn channel_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(scale));
        let c = vx.shape()[0];
        if vs.len() != c {
            return Err(shape_err("channel_scale", "scale length mismatch".into()));
        }
        let inner = vx.len() / c;
        let mut data = vx.data().to_vec();
        for (ch, chunk) in data.chunks_mut(inner).enumerate() {
            let sv = vs.data()[ch];
            chunk.iter_mut().for_each(|v| *v *= sv);
        }
        let value = RealArray::new(vx.shape().to_vec(), data)?;
        self.push(value, Op::ChannelScale(x, scale), &[x, scale])
    }

    /// `tanh(pre[:C]) ⊙ σ(pre[C:])` over the leading channel axis.
    pub fn gated_activation(&mut self, pre: Var) -> Result<Var> {
        let v = self.value(pre);
        let c2 = v.shape()[0];
        if c2 % 2 != 0 {
            return Err(shape_err(
                "gated_activation",
                format!("channel count {c2} is odd"),
            ));
        }
        let half = v.len() / 2;
        let (t, s) = v.data().split_at(half);
        let data = t.iter().zip(s).map(|(a, b)| a.tanh() * sigmoid(*b)).collect();
        let mut shape = v.shape().to_vec();
        shape[0] = c2 / 2;
        let value = RealArray::new(shape, data)?;
        self.push(value, Op::Gated(pre), &[pre])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&a| if a >= 0.0 { a } else { slope * a })
            .collect();
        let value = RealArray::new(v.shape().to_vec(), data)?;
        self.push(value, Op::LeakyRelu(x, slope), &[x])
    }

    /// `[m, n] · [n] → [m]`.
    pub fn matvec(&mut self, w: Var, v: Var) -> Result<Var> {
        let (vw, vv) = (self.value(w), self.value(v));
        if vw.shape().len() != 2 || vw.shape()[1] != vv.len() {
            return Err(shape_err(
                "matvec",
                format!("{:?} · {:?}", vw.shape(), vv.shape()),
            ));
        }
        let n = vv.len();
        let data = vw
            .data()
            .chunks(n)
            .map(|row| row.iter().zip(vv.data()).map(|(a, b)| a * b).sum())
            .collect();
        let value = RealArray::new(vec![vw.shape()[0]], data)?;
        self.push(value, Op::MatVec(w, v), &[w, v])
    }

    /// `out[i] = x[index[i]]` (or 0 for [`GATHER_ZERO`]), reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if shape.iter().product::<usize>() != index.len() {
            return Err(shape_err("gather", "index length does not match shape".into()));
        }
        let n = vx.len();
        let mut data = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == GATHER_ZERO {
                data.push(0.0);
            } else if i < n {
                data.push(vx.data()[i]);
            } else {
                return Err(shape_err("gather", format!("index {i} out of range {n}")));
            }
        }
        let value = RealArray::new(shape.to_vec(), data)?;
        self.push(value, Op::Gather(x, index), &[x])
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        let index: Arc<[usize]> = (0..n).collect();
        self.gather(x, index, shape)
    }

    fn coupling_shapes(&self, x: Var, raw: Var, m: usize) -> Result<usize> {
        let (vx, vr) = (self.value(x), self.value(raw));
        let n = vx.len();
        if m == 0 || m > MAX_MIX || vr.len() != raw_len(m) * n {
            return Err(shape_err(
                "coupling",
                format!(
                    "raw parameters {:?} do not match {} elements with M={m}",
                    vr.shape(),
                    n
                ),
            ));
        }
        Ok(n)
    }

    /// Element-wise coupling `x → z`; `raw` is `[2+3M, x.len()]` channel-major.
    pub fn coupling(&mut self, x: Var, raw: Var, m: usize) -> Result<Var> {
        let n = self.coupling_shapes(x, raw, m)?;
        let (vx, vr) = (self.value(x), self.value(raw));
        let rd = vr.data();
        let data = (0..n)
            .map(|e| coupling_raw(vx.data()[e], m, |k| rd[k * n + e], false).z)
            .collect();
        let value = RealArray::new(vx.shape().to_vec(), data)?;
        self.push(value, Op::Coupling { x, raw, m }, &[x, raw])
    }

    /// Sum of the coupling log-Jacobians over unmasked elements.
    pub fn coupling_logdet(
        &mut self,
        x: Var,
        raw: Var,
        m: usize,
        mask: Option<Arc<[bool]>>,
    ) -> Result<Var> {
        let n = self.coupling_shapes(x, raw, m)?;
        if mask.as_ref().is_some_and(|mk| mk.len() != n) {
            return Err(shape_err("coupling_logdet", "mask length mismatch".into()));
        }
        let (vx, vr) = (self.value(x), self.value(raw));
        let rd = vr.data();
        let total = (0..n)
            .filter(|&e| mask.as_ref().is_none_or(|mk| mk[e]))
            .map(|e| coupling_raw(vx.data()[e], m, |k| rd[k * n + e], false).logdet)
            .sum();
        self.push(
            RealArray::scalar(total),
            Op::CouplingLogDet { x, raw, m, mask },
            &[x, raw],
        )
    }

    /// `Σ (−z²/2 − log(2π)/2)` over unmasked elements.
    pub fn gaussian_log_prob(&mut self, z: Var, mask: Option<Arc<[bool]>>) -> Result<Var> {
        let vz = self.value(z);
        if mask.as_ref().is_some_and(|mk| mk.len() != vz.len()) {
            return Err(shape_err("gaussian_log_prob", "mask length mismatch".into()));
        }
        let total = vz
            .data()
            .iter()
            .enumerate()
            .filter(|(e, _)| mask.as_ref().is_none_or(|mk| mk[*e]))
            .map(|(_, v)| -0.5 * v * v - HALF_LOG_2PI)
            .sum();
        self.push(
            RealArray::scalar(total),
            Op::GaussianLogProb { z, mask },
            &[z],
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * c).collect();
        let value = RealArray::new(v.shape().to_vec(), data)?;
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// Element-wise sum of same-shaped nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| shape_err("sum", "no operands".into()))?;
        let shape = self.value(*first).shape().to_vec();
        let mut data = vec![0.0; self.value(*first).len()];
        for &x in xs {
            let v = self.value(x);
            if v.shape() != shape.as_slice() {
                return Err(shape_err("sum", "operand shapes differ".into()));
            }
            data.iter_mut().zip(v.data()).for_each(|(d, s)| *d += s);
        }
        let value = RealArray::new(shape, data)?;
        self.push(value, Op::Sum(xs.to_vec()), xs)
    }

    /// Gradients of the scalar `loss` with respect to every parameter node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::config("backward needs a scalar loss"));
        }
        if !lv.item().is_finite() {
            return Err(Error::numeric("backward", "loss is not finite"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(node.op.name(), "non-finite gradient"));
            }
            let contributions = self.vjp(&node.op, &g)?;
            for (var, dv) in contributions {
                if !self.needs(var) {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&dv).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(dv),
                }
            }
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn vjp(&self, op: &Op, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let mut out = Vec::new();
        match op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                out.push((*w, dw));
                if let Some(b) = b {
                    out.push((*b, db));
                }
            }
            Op::ConvT2d { x, w, b, geom } => {
                let (dx, dw, db) = conv_transpose2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                );
                out.push((*x, dx));
                out.push((*w, dw));
                if let Some(b) = b {
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::AddChannelBias(x, bias) => {
                let c = self.value(*bias).len();
                let inner = g.len() / c;
                let db = g.chunks(inner).map(|ch| ch.iter().sum()).collect();
                out.push((*x, g.to_vec()));
                out.push((*bias, db));
            }
            Op::ChannelScale(x, scale) => {
                let vs = self.value(*scale).data();
                let vx = self.value(*x).data();
                let inner = g.len() / vs.len();
                let mut dx = g.to_vec();
                let mut ds = vec![0.0; vs.len()];
                for (ch, (dchunk, xchunk)) in dx.chunks_mut(inner).zip(vx.chunks(inner)).enumerate()
                {
                    ds[ch] = dchunk.iter().zip(xchunk).map(|(d, x)| d * x).sum();
                    dchunk.iter_mut().for_each(|d| *d *= vs[ch]);
                }
                out.push((*x, dx));
                out.push((*scale, ds));
            }
            Op::Gated(pre) => {
                let v = self.value(*pre).data();
                let half = v.len() / 2;
                let mut d = vec![0.0; v.len()];
                for e in 0..half {
                    let t = v[e].tanh();
                    let s = sigmoid(v[half + e]);
                    d[e] = g[e] * s * (1.0 - t * t);
                    d[half + e] = g[e] * t * s * (1.0 - s);
                }
                out.push((*pre, d));
            }
            Op::LeakyRelu(x, slope) => {
                let v = self.value(*x).data();
                let d = v
                    .iter()
                    .zip(g)
                    .map(|(&a, &gv)| if a >= 0.0 { gv } else { slope * gv })
                    .collect();
                out.push((*x, d));
            }
            Op::MatVec(w, v) => {
                let vw = self.value(*w).data();
                let vv = self.value(*v).data();
                let n = vv.len();
                let mut dw = vec![0.0; vw.len()];
                let mut dv = vec![0.0; n];
                for (r, row) in vw.chunks(n).enumerate() {
                    for c in 0..n {
                        dw[r * n + c] = g[r] * vv[c];
                        dv[c] += g[r] * row[c];
                    }
                }
                out.push((*w, dw));
                out.push((*v, dv));
            }
            Op::Gather(x, index) => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&i, &gv) in index.iter().zip(g) {
                    if i != GATHER_ZERO {
                        dx[i] += gv;
                    }
                }
                out.push((*x, dx));
            }
            Op::Coupling { x, raw, m } => {
                let vx = self.value(*x).data();
                let rd = self.value(*raw).data();
                let n = vx.len();
                let p = raw_len(*m);
                let mut dx = vec![0.0; n];
                let mut draw = vec![0.0; p * n];
                for e in 0..n {
                    let cg = coupling_raw(vx[e], *m, |k| rd[k * n + e], true);
                    dx[e] = g[e] * cg.dz_dx;
                    for k in 0..p {
                        draw[k * n + e] = g[e] * cg.dz_draw[k];
                    }
                }
                out.push((*x, dx));
                out.push((*raw, draw));
            }
            Op::CouplingLogDet { x, raw, m, mask } => {
                let vx = self.value(*x).data();
                let rd = self.value(*raw).data();
                let n = vx.len();
                let p = raw_len(*m);
                let mut dx = vec![0.0; n];
                let mut draw = vec![0.0; p * n];
                for e in 0..n {
                    if mask.as_ref().is_some_and(|mk| !mk[e]) {
                        continue;
                    }
                    let cg = coupling_raw(vx[e], *m, |k| rd[k * n + e], true);
                    dx[e] = g[0] * cg.dld_dx;
                    for k in 0..p {
                        draw[k * n + e] = g[0] * cg.dld_draw[k];
                    }
                }
                out.push((*x, dx));
                out.push((*raw, draw));
            }
            Op::GaussianLogProb { z, mask } => {
                let vz = self.value(*z).data();
                let dz = vz
                    .iter()
                    .enumerate()
                    .map(|(e, v)| {
                        if mask.as_ref().is_some_and(|mk| !mk[e]) {
                            0.0
                        } else {
                            -v * g[0]
                        }
                    })
                    .collect();
                out.push((*z, dz));
            }
            Op::Scale(x, c) => {
                out.push((*x, g.iter().map(|v| v * c).collect()));
            }
            Op::Sum(xs) => {
                for x in xs {
                    out.push((*x, g.to_vec()));
                }
            }
        }
        Ok(out)
    }
}
