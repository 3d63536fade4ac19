//! Convolution kernels over `[channels, height, width]` planes.
//!
//! Height padding is one-sided for the causal modes: output row `i` of a
//! causal conv reads input rows `i-kh+1 ..= i`, a strict conv reads rows
//! `i-kh ..= i-1`. Width padding is always symmetric zeros with dilation.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeightPadding {
    /// Output row `i` sees input rows `<= i`.
    Causal,
    /// Output row `i` sees input rows `< i` only.
    Strict,
    /// Centered window.
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub height: HeightPadding,
    pub width_dilation: usize,
}

impl Conv2dSpec {
    pub fn causal(width_dilation: usize) -> Self {
        Self {
            height: HeightPadding::Causal,
            width_dilation,
        }
    }

    pub fn strict(width_dilation: usize) -> Self {
        Self {
            height: HeightPadding::Strict,
            width_dilation,
        }
    }

    pub fn symmetric(width_dilation: usize) -> Self {
        Self {
            height: HeightPadding::Symmetric,
            width_dilation,
        }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self::causal(1)
    }
}

/// `c = a·b + beta·c` for row-major operands; `*_t` selects the transpose
/// of the stored matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are at least as long as the strided extents
    // implied by (m, k, n), checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], spec: Conv2dSpec) -> Result<Self> {
        if x_shape.len() != 3 || w_shape.len() != 4 {
            return Err(Error::config(format!(
                "conv2d expects input [C,H,W] and kernel [Co,Ci,kh,kw], got {:?} and {:?}",
                x_shape, w_shape
            )));
        }
        if x_shape[0] != w_shape[1] {
            return Err(Error::config(format!(
                "conv2d channel mismatch: input has {}, kernel expects {}",
                x_shape[0], w_shape[1]
            )));
        }
        let kw = w_shape[3];
        if kw % 2 == 0 {
            return Err(Error::config("conv2d width kernel must be odd"));
        }
        if spec.height == HeightPadding::Symmetric && w_shape[2] % 2 == 0 {
            return Err(Error::config("symmetric conv2d height kernel must be odd"));
        }
        if spec.width_dilation == 0 {
            return Err(Error::config("width dilation must be positive"));
        }
        Ok(Self {
            c_in: x_shape[0],
            c_out: w_shape[0],
            h: x_shape[1],
            w: x_shape[2],
            kh: w_shape[2],
            kw,
            spec,
        })
    }

    fn row_offset(&self) -> isize {
        match self.spec.height {
            HeightPadding::Causal => self.kh as isize - 1,
            HeightPadding::Strict => self.kh as isize,
            HeightPadding::Symmetric => (self.kh as isize - 1) / 2,
        }
    }

    /// A 1×1 conv with no row shift reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.row_offset() == 0
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn n(&self) -> usize {
        self.h * self.w
    }

    /// Visit every (column-row, input-row-slice) pairing of the im2col
    /// layout: `f(p, i, src_start, dst_col_start, len)`.
    fn for_each_segment(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let off = self.row_offset();
        let half = (self.kw as isize - 1) / 2;
        let dil = self.spec.width_dilation as isize;
        let w = self.w as isize;
        for ci in 0..self.c_in {
            for r in 0..self.kh {
                for c in 0..self.kw {
                    let p = (ci * self.kh + r) * self.kw + c;
                    let shift = (c as isize - half) * dil;
                    // columns j with 0 <= j + shift < w
                    let j0 = (-shift).max(0);
                    let j1 = (w - shift).min(w);
                    if j0 >= j1 {
                        continue;
                    }
                    for i in 0..self.h {
                        let ri = i as isize + r as isize - off;
                        if ri < 0 || ri >= self.h as isize {
                            continue;
                        }
                        let src = (ci * self.h + ri as usize) * self.w + (j0 + shift) as usize;
                        let dst = i * self.w + j0 as usize;
                        f(p, i, src, dst, (j1 - j0) as usize);
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut col = vec![0.0; self.k() * n];
        self.for_each_segment(|p, _i, src, dst, len| {
            let base = p * n + dst;
            col[base..base + len].copy_from_slice(&x[src..src + len]);
        });
        col
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let n = self.n();
        self.for_each_segment(|p, _i, src, dst, len| {
            let base = p * n + dst;
            for (d, s) in dx[src..src + len].iter_mut().zip(&col[base..base + len]) {
                *d += s;
            }
        });
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (k, n) = (g.k(), g.n());
    let mut out = vec![0.0; g.c_out * n];
    if g.is_pointwise() {
        gemm(g.c_out, k, n, w, false, x, false, &mut out, 0.0);
    } else {
        let col = g.im2col(x);
        gemm(g.c_out, k, n, w, false, &col, false, &mut out, 0.0);
    }
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(n).enumerate() {
            let bv = b[co];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Returns (dx, dw, dbias).
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (k, n) = (g.k(), g.n());
    let pointwise = g.is_pointwise();
    let col_owned;
    let col: &[f64] = if pointwise {
        x
    } else {
        col_owned = g.im2col(x);
        &col_owned
    };
    let mut dw = vec![0.0; g.c_out * k];
    gemm(g.c_out, n, k, dout, false, col, true, &mut dw, 0.0);
    let db = dout.chunks(n).map(|r| r.iter().sum()).collect();
    let dx = need_dx.then(|| {
        let mut dcol = vec![0.0; k * n];
        gemm(k, g.c_out, n, w, true, dout, false, &mut dcol, 0.0);
        if pointwise {
            dcol
        } else {
            let mut dx = vec![0.0; x.len()];
            g.col2im(&dcol, &mut dx);
            dx
        }
    });
    (dx, dw, db)
}

/// Transposed convolution over `[C, bands, time]` with a time stride.
///
/// The full output along time is `(T-1)·stride + kt`; `crop` samples are
/// dropped from the front and the result truncated to `T·stride`. Bands use
/// symmetric "same" padding.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvTGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub bands: usize,
    pub t_in: usize,
    pub kb: usize,
    pub kt: usize,
    pub stride: usize,
    pub crop: usize,
}

impl ConvTGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, crop: usize) -> Result<Self> {
        if x_shape.len() != 3 || w_shape.len() != 4 {
            return Err(Error::config(format!(
                "conv_transpose2d expects input [C,B,T] and kernel [Ci,Co,kb,kt], got {:?} and {:?}",
                x_shape, w_shape
            )));
        }
        if x_shape[0] != w_shape[0] {
            return Err(Error::config("conv_transpose2d channel mismatch"));
        }
        if w_shape[2] % 2 == 0 {
            return Err(Error::config("conv_transpose2d band kernel must be odd"));
        }
        if stride == 0 {
            return Err(Error::config("conv_transpose2d stride must be positive"));
        }
        Ok(Self {
            c_in: x_shape[0],
            c_out: w_shape[1],
            bands: x_shape[1],
            t_in: x_shape[2],
            kb: w_shape[2],
            kt: w_shape[3],
            stride,
            crop,
        })
    }

    pub fn t_out(&self) -> usize {
        self.t_in * self.stride
    }

    /// `f(x_index, w_index, out_index_start, kernel_time_start, len)`: for each
    /// (ci, co, b, t, rb) the run of kernel taps landing inside the output.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let pb = (self.kb - 1) / 2;
        let t_out = self.t_out() as isize;
        for ci in 0..self.c_in {
            for co in 0..self.c_out {
                for rb in 0..self.kb {
                    for b in 0..self.bands {
                        let bo = b as isize + rb as isize - pb as isize;
                        if bo < 0 || bo >= self.bands as isize {
                            continue;
                        }
                        let wbase = ((ci * self.c_out + co) * self.kb + rb) * self.kt;
                        let obase = (co * self.bands + bo as usize) * self.t_out();
                        for t in 0..self.t_in {
                            let o0 = (t * self.stride) as isize - self.crop as isize;
                            let r0 = (-o0).max(0);
                            let r1 = (t_out - o0).min(self.kt as isize);
                            if r0 >= r1 {
                                continue;
                            }
                            let xi = (ci * self.bands + b) * self.t_in + t;
                            f(
                                xi,
                                wbase + r0 as usize,
                                obase + (o0 + r0) as usize,
                                r0 as usize,
                                (r1 - r0) as usize,
                            );
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_transpose2d_forward(
    g: &ConvTGeom,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let plane = g.bands * g.t_out();
    let mut out = vec![0.0; g.c_out * plane];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[co]);
        }
    }
    g.for_each_run(|xi, wi, oi, _r0, len| {
        let xv = x[xi];
        for (o, wv) in out[oi..oi + len].iter_mut().zip(&w[wi..wi + len]) {
            *o += xv * wv;
        }
    });
    out
}

/// Returns (dx, dw, dbias).
pub(crate) fn conv_transpose2d_backward(
    g: &ConvTGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = g.bands * g.t_out();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    g.for_each_run(|xi, wi, oi, _r0, len| {
        let d = &dout[oi..oi + len];
        let xv = x[xi];
        let mut acc = 0.0;
        for ((dv, wv), dwv) in d.iter().zip(&w[wi..wi + len]).zip(&mut dw[wi..wi + len]) {
            acc += dv * wv;
            *dwv += xv * dv;
        }
        dx[xi] += acc;
    });
    let db = dout.chunks(plane).map(|c| c.iter().sum()).collect();
    (dx, dw, db)
}
