//! Audio normalization, log-mel analysis and the learned mel upsampler.

mod audio;
mod cache;
mod mel;
mod upsample;

pub use audio::{denormalize_audio, normalize_audio, read_wav, write_wav, Pcm, PCM_SCALE};
pub use cache::{decode_mel, encode_mel, load_mel, save_mel};
pub use mel::{
    frame_count, hamming, hz_to_mel, mel_extract, mel_to_hz, MelConfig, MelFilterbank,
    MelSpectrogram, LOG_FLOOR,
};
pub use upsample::{upsample, upsample_chunk, UpsampledConditioner};

pub(crate) use mel::centered_frame;
pub(crate) use upsample::{conditioner_graph, mel_window};
