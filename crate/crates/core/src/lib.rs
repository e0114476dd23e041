//! Time-domain speech enhancement for the radio speech-echo problem.
//!
//! The crate is self-contained: a small reverse-mode tensor engine, WAV I/O,
//! Fourier feature extraction, an echo-channel corpus synthesizer, the U-Net
//! enhancement network with channel/sequence attention and attention-based
//! skip fusion, the multi-objective loss, objective quality metrics, and an
//! Adam training loop. The `rose` binary exposes the pipeline end to end.

pub mod audio_io;
pub mod dsp;
pub mod echo_sim;
pub mod error;
pub mod tensor;

pub use error::{Result, RoseError};
