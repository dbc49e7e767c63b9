//! Spectral analysis, the algebraic low/high-pass filter pair, Gaussian
//! smoothing and resampling.

mod dump;
mod filter;
mod mel;
mod resample;
mod smooth;
mod stft;

pub use dump::{decode_mel, encode_mel, encode_pgm, read_mel_dump, write_mel_dump, write_pgm};
pub use filter::{FilterKind, FilterSpec};
pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, MelExtractor, MelParams, MelSpectrogram, MEL_FLOOR};
pub use resample::resample;
pub use smooth::{gaussian_kernel, kernel_radius};
pub use stft::{frame_count, stft, Spectrogram, Window};
