use std::sync::Arc;

use crate::config::UPSAMPLE_FACTOR;
use crate::error::{Error, Result};
use crate::flowstack::model::{FlowModel, ModelVars, LEAKY_SLOPE, UPSAMPLE_CROP, UPSAMPLE_STRIDE};
use crate::flowstack::squeeze::squeeze_channels;
use crate::numcore::{Conv2dSpec, RealArray, Tape, Var, GATHER_ZERO};

use super::mel::MelSpectrogram;

/// Frames of context kept on each side of a chunk.
const WINDOW_MARGIN: usize = 2;

/// Per-sample conditioning `[c_cond, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsampledConditioner {
    data: RealArray,
}

impl UpsampledConditioner {
    pub fn new(data: RealArray) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(Error::config(format!(
                "conditioner must be [channels, samples], got {:?}",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &RealArray {
        &self.data
    }

    /// `[c_cond, h, n/h]` in the squeeze layout.
    pub fn squeezed(&self, h: usize) -> Result<RealArray> {
        if h == 0 || self.len() % h != 0 {
            return Err(Error::config(format!(
                "conditioner length {} not divisible by {h}",
                self.len()
            )));
        }
        let c = self.channels();
        RealArray::new(
            vec![c, h, self.len() / h],
            squeeze_channels(self.data.data(), c, h),
        )
    }

    /// Samples `start..start+n`.
    pub fn slice(&self, start: usize, n: usize) -> Result<Self> {
        if start + n > self.len() {
            return Err(Error::input("conditioner slice out of range"));
        }
        let (c, len) = (self.channels(), self.len());
        let data = RealArray::from_fn(&[c, n], |i| self.data.data()[(i / n) * len + start + i % n]);
        Self::new(data)
    }
}

/// Mel frames needed for samples `start..start+n`, as `[1, bands, Tw]`,
/// plus the offset of `start` inside the window's upsampled output.
pub(crate) fn mel_window(mel: &MelSpectrogram, start: usize, n: usize) -> Result<(RealArray, usize)> {
    let t = mel.n_frames();
    if t == 0 {
        return Err(Error::input("mel spectrogram has no frames"));
    }
    let f0 = (start / UPSAMPLE_FACTOR).saturating_sub(WINDOW_MARGIN).min(t - 1);
    let f1 = ((start + n).div_ceil(UPSAMPLE_FACTOR) + WINDOW_MARGIN).clamp(f0 + 1, t);
    let tw = f1 - f0;
    let bands = mel.n_mels();
    let win = RealArray::from_fn(&[1, bands, tw], |i| mel.get(i / tw, f0 + i % tw));
    Ok((win, start - f0 * UPSAMPLE_FACTOR))
}

/// Upsampler graph over a mel window, cropped to `n` samples from `offset`;
/// samples past the window's end read zeros. Output `[c_cond, 1, n]`.
pub(crate) fn conditioner_graph(
    tape: &mut Tape,
    model: &FlowModel,
    vars: &ModelVars,
    window: RealArray,
    offset: usize,
    n: usize,
) -> Result<Var> {
    let lay = model.layout();
    let bands = window.shape()[1];
    if bands != model.dims().n_mels {
        return Err(Error::config(format!(
            "mel has {bands} bands, model expects {}",
            model.dims().n_mels
        )));
    }
    let tw = window.shape()[2];
    let m = tape.leaf(window)?;
    let u = tape.conv_transpose2d(
        m,
        vars.at(lay.up1_w),
        Some(vars.at(lay.up1_b)),
        UPSAMPLE_STRIDE,
        UPSAMPLE_CROP,
    )?;
    let u = tape.leaky_relu(u, LEAKY_SLOPE)?;
    let u = tape.conv_transpose2d(
        u,
        vars.at(lay.up2_w),
        Some(vars.at(lay.up2_b)),
        UPSAMPLE_STRIDE,
        UPSAMPLE_CROP,
    )?;
    let u = tape.leaky_relu(u, LEAKY_SLOPE)?;
    let len = tw * UPSAMPLE_FACTOR;
    let index: Arc<[usize]> = (0..bands * n)
        .map(|i| {
            let (b, s) = (i / n, offset + i % n);
            if s < len {
                b * len + s
            } else {
                GATHER_ZERO
            }
        })
        .collect();
    let u = tape.gather(u, index, &[bands, 1, n])?;
    tape.conv2d(
        u,
        vars.at(lay.proj_w),
        Some(vars.at(lay.proj_b)),
        Conv2dSpec::causal(1),
    )
}

fn run(model: &FlowModel, window: RealArray, offset: usize, n: usize) -> Result<UpsampledConditioner> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false)?;
    let out = conditioner_graph(&mut tape, model, &vars, window, offset, n)?;
    let c = model.dims().cond_channels;
    UpsampledConditioner::new(tape.value(out).clone().reshaped(&[c, n])?)
}

/// Conditioner for the whole utterance, `256·T` samples.
pub fn upsample(model: &FlowModel, mel: &MelSpectrogram) -> Result<UpsampledConditioner> {
    let n = mel.n_frames() * UPSAMPLE_FACTOR;
    let (window, offset) = mel_window(mel, 0, n)?;
    run(model, window, offset, n)
}

/// Conditioner for samples `start..start+n` computed from a local mel window;
/// equal to the matching slice of [`upsample`] inside the utterance.
pub fn upsample_chunk(
    model: &FlowModel,
    mel: &MelSpectrogram,
    start: usize,
    n: usize,
) -> Result<UpsampledConditioner> {
    let (window, offset) = mel_window(mel, start, n)?;
    run(model, window, offset, n)
}
