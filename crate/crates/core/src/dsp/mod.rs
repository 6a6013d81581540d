//! Audio I/O, STFT feature pipeline, synthetic dataset generation, and
//! enhancement signal reconstruction.

mod dataset;
mod features;
mod labels;
mod mix;
mod stft;
mod synth;
mod wav;

pub use dataset::{
    generate_dataset, load_entry, DatasetManifest, LoadedEntry, ManifestEntry, Split,
    SynthesisConfig,
};
pub use features::{features, FrameFeatures, NormStats, LOG_EPS};
pub use labels::vad_labels;
pub use mix::{apply_rir, mix_at_snr, synth_rir, MixInfo};
pub use stft::{hann_window, istft, stft, Spectrogram};
pub use synth::{synth_noise, synth_speech, NoiseKind};
pub use wav::{read_wav, write_wav};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, DspError>;

#[derive(Error, Debug)]
pub enum DspError {
    #[error("clip too short: {len} samples, need at least {needed}")]
    ClipTooShort { len: usize, needed: usize },
    #[error("silent clean input")]
    SilentClean,
    #[error("silent noise input")]
    SilentNoise,
    #[error("sample-rate mismatch: expected {expected} Hz, got {got} Hz")]
    SampleRateMismatch { expected: u32, got: u32 },
    #[error("mono required, file has {channels} channels")]
    MonoRequired { channels: u16 },
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("spectrogram params do not match the requested params")]
    ParamMismatch,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("wav error")]
    Wav(#[from] hound::Error),
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("json error")]
    Json(#[from] serde_json::Error),
}

/// Mono audio in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean sample power.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }
}

/// Analysis parameters: 16 ms frames, 50% overlap, Hann window, FFT size the
/// next power of two at or above the frame length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl StftParams {
    /// Defaults for a given sample rate (256/128/256 at 16 kHz).
    pub fn for_rate(sample_rate: u32) -> Self {
        let frame_len = (sample_rate as usize * 16) / 1000;
        Self {
            sample_rate,
            frame_len,
            hop: frame_len / 2,
            fft_size: frame_len.next_power_of_two(),
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of analysis frames for a clip of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }
}

impl Default for StftParams {
    fn default() -> Self {
        Self::for_rate(16_000)
    }
}
