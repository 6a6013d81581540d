//! Forward/inverse STFT with a periodic Hann window.
//!
//! The periodic Hann at 50% hop satisfies the overlap-add identity
//! `w[n] + w[n + N/2] = 1`, so interior samples are reconstructed exactly
//! by windowed overlap-add normalized with the accumulated squared window.

use std::f64::consts::PI;
use std::sync::Mutex;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{AudioClip, DspError, Result, StftParams};

/// STFT frames: `frames` rows of `bins = fft_size/2 + 1` complex values.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<f64>>,
    pub params: StftParams,
}

impl Spectrogram {
    pub fn zeros(frames: usize, params: StftParams) -> Self {
        let bins = params.bins();
        Self {
            frames,
            bins,
            data: vec![Complex::new(0.0, 0.0); frames * bins],
            params,
        }
    }

    #[inline]
    pub fn frame(&self, t: usize) -> &[Complex<f64>] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    #[inline]
    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex<f64>] {
        &mut self.data[t * self.bins..(t + 1) * self.bins]
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
        .collect()
}

// Planner reuse across calls; rustfft plans are cheap but not free.
pub(super) fn with_planner<T>(f: impl FnOnce(&mut FftPlanner<f64>) -> T) -> T {
    static PLANNER: Mutex<Option<FftPlanner<f64>>> = Mutex::new(None);
    let mut guard = PLANNER.lock().unwrap();
    f(guard.get_or_insert_with(FftPlanner::new))
}

/// Hann-windowed short-time Fourier transform.
///
/// Frame count is `floor((len - frame_len) / hop) + 1`; trailing samples that
/// do not fill a frame are dropped.
pub fn stft(clip: &AudioClip, params: &StftParams) -> Result<Spectrogram> {
    if clip.len() < params.frame_len {
        return Err(DspError::ClipTooShort {
            len: clip.len(),
            needed: params.frame_len,
        });
    }
    let frames = params.frame_count(clip.len());
    let window = hann_window(params.frame_len);
    let fft = with_planner(|p| p.plan_fft_forward(params.fft_size));
    let mut spec = Spectrogram::zeros(frames, *params);
    let mut buf = vec![Complex::new(0.0, 0.0); params.fft_size];
    for t in 0..frames {
        let start = t * params.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            let v = if i < params.frame_len {
                clip.samples[start + i] * window[i]
            } else {
                0.0
            };
            *b = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        spec.frame_mut(t).copy_from_slice(&buf[..params.fft_size / 2 + 1]);
    }
    Ok(spec)
}

/// Inverse STFT by Hann-windowed overlap-add with squared-window
/// normalization. Output length is `(frames - 1) * hop + frame_len`.
pub fn istft(spec: &Spectrogram, params: &StftParams) -> Result<AudioClip> {
    if spec.params != *params {
        return Err(DspError::ParamMismatch);
    }
    let frame_len = params.frame_len;
    let fft_size = params.fft_size;
    let out_len = if spec.frames == 0 {
        0
    } else {
        (spec.frames - 1) * params.hop + frame_len
    };
    let window = hann_window(frame_len);
    let ifft = with_planner(|p| p.plan_fft_inverse(fft_size));
    let mut out = vec![0.0f64; out_len];
    let mut weight = vec![0.0f64; out_len];
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let scale = 1.0 / fft_size as f64;
    for t in 0..spec.frames {
        let half = spec.frame(t);
        buf[..=fft_size / 2].copy_from_slice(half);
        for k in 1..fft_size / 2 {
            buf[fft_size - k] = half[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * params.hop;
        for i in 0..frame_len {
            out[start + i] += buf[i].re * scale * window[i];
            weight[start + i] += window[i] * window[i];
        }
    }
    for (o, &w) in out.iter_mut().zip(&weight) {
        if w > 1e-12 {
            *o /= w;
        } else {
            *o = 0.0;
        }
    }
    Ok(AudioClip::new(out, params.sample_rate))
}
