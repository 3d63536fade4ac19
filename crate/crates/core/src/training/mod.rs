//! Maximum-likelihood training: loss, optimizer, data, checkpoints.

mod checkpoint;
mod data;
mod loss;
mod optim;
mod train;

pub use checkpoint::{quantize, Checkpoint, RngState};
pub use data::{chunks_of, list_wavs, sample_chunk, split_of, Dataset, Split, Utterance};
pub use loss::{nll_loss, nll_loss_and_grad, LossGrad, TrainChunk};
pub use optim::{
    clip_grad_norm, lr_schedule, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, GRAD_CLIP,
};
pub use train::{checkpoint_name, train, TrainReport, DIAGNOSTIC_FILE, LATEST_FILE, METRICS_FILE};
