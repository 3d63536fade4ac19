use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numcore::RealArray;

/// A waveform chunk viewed as an `h × w` grid with `X[i,j] = x[j·h + i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SqueezedAudio {
    grid: RealArray,
}

impl SqueezedAudio {
    pub fn from_grid(grid: RealArray) -> Result<Self> {
        if grid.shape().len() != 2 {
            return Err(Error::config(format!(
                "squeezed grid must be 2-D, got {:?}",
                grid.shape()
            )));
        }
        Ok(Self { grid })
    }

    pub fn h(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.grid.data()[i * self.w() + j]
    }

    pub fn grid(&self) -> &RealArray {
        &self.grid
    }

    pub fn into_grid(self) -> RealArray {
        self.grid
    }
}

pub fn squeeze(x: &[f64], h: usize) -> Result<SqueezedAudio> {
    if h == 0 || x.is_empty() || x.len() % h != 0 {
        return Err(Error::input(format!(
            "length {} is not a positive multiple of squeeze height {h}",
            x.len()
        )));
    }
    let w = x.len() / h;
    let data = squeeze_channels(x, 1, h);
    SqueezedAudio::from_grid(RealArray::new(vec![h, w], data)?)
}

pub fn unsqueeze(sq: &SqueezedAudio) -> Vec<f64> {
    let (h, w) = (sq.h(), sq.w());
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[j * h + i] = sq.grid.data()[i * w + j];
        }
    }
    out
}

/// `[c, n]` channel-major samples to `[c, h, n/h]` grids.
pub(crate) fn squeeze_channels(x: &[f64], c: usize, h: usize) -> Vec<f64> {
    let n = x.len() / c;
    let w = n / h;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let src = &x[ch * n..(ch + 1) * n];
        let dst = &mut out[ch * n..(ch + 1) * n];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = src[j * h + i];
            }
        }
    }
    out
}

/// Gather index turning `[c, 1, n]` into the squeezed `[c, h, n/h]`.
pub(crate) fn squeeze_index(c: usize, n: usize, h: usize) -> Arc<[usize]> {
    let w = n / h;
    let mut idx = Vec::with_capacity(c * n);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                idx.push(ch * n + j * h + i);
            }
        }
    }
    idx.into()
}

/// Gather index flipping the row axis of `[c, h, w]`.
pub(crate) fn row_reverse_index(c: usize, h: usize, w: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            let src = h - 1 - i;
            for j in 0..w {
                idx.push((ch * h + src) * w + j);
            }
        }
    }
    idx.into()
}

/// Gather index keeping rows `0..rows` of `[c, h, w]`.
pub(crate) fn row_prefix_index(c: usize, h: usize, w: usize, rows: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(c * rows * w);
    for ch in 0..c {
        for i in 0..rows {
            for j in 0..w {
                idx.push((ch * h + i) * w + j);
            }
        }
    }
    idx.into()
}

pub(crate) fn reverse_rows<T: Copy>(data: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for i in (0..h).rev() {
        out.extend_from_slice(&data[i * w..(i + 1) * w]);
    }
    out
}
