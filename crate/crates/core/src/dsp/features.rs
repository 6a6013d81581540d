//! Context-stacked log-power features with per-dimension normalization.

use serde::{Deserialize, Serialize};

use super::{DspError, Result, Spectrogram};
use crate::bitkernel::DenseMatrix;

/// Floor inside the log to avoid -inf on silent bins.
pub const LOG_EPS: f64 = 1e-10;

/// Per-dimension normalization statistics, computed on the training split
/// and reused verbatim at evaluation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean/std per column of `data`.
    pub fn from_matrix(data: &DenseMatrix) -> Self {
        let (rows, cols) = (data.rows(), data.cols());
        let mut mean = vec![0.0; cols];
        for i in 0..rows {
            for (m, &v) in mean.iter_mut().zip(data.row(i)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; cols];
        for i in 0..rows {
            for (j, &v) in data.row(i).iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        let std = var
            .iter()
            .map(|v| (v / rows as f64).sqrt())
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, data: &mut DenseMatrix) {
        let cols = data.cols();
        assert_eq!(cols, self.mean.len());
        for i in 0..data.rows() {
            let row = data.row_mut(i);
            for j in 0..cols {
                let s = if self.std[j] > 1e-12 { self.std[j] } else { 1.0 };
                row[j] = (row[j] - self.mean[j]) / s;
            }
        }
    }

    pub fn invert_row(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            let s = if self.std[j] > 1e-12 { self.std[j] } else { 1.0 };
            *v = *v * s + self.mean[j];
        }
    }
}

/// Raw log-power frames: `log(|X|^2 + eps)` per bin, one row per frame.
pub fn log_power(spec: &Spectrogram) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(spec.frames, spec.bins);
    for t in 0..spec.frames {
        let frame = spec.frame(t);
        let row = out.row_mut(t);
        for (r, c) in row.iter_mut().zip(frame) {
            *r = (c.norm_sqr() + LOG_EPS).ln();
        }
    }
    out
}

/// Context-windowed normalized features: one row per frame holding `context`
/// consecutive log-power frames centered on it, edges padded by replication.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    pub data: DenseMatrix,
    pub stats: NormStats,
}

/// Builds features for a spectrogram. With `stats = None` the normalization
/// is fitted on this data (training); otherwise the provided statistics are
/// applied (evaluation).
pub fn features(
    spec: &Spectrogram,
    context: usize,
    stats: Option<&NormStats>,
) -> Result<FrameFeatures> {
    if spec.frames == 0 {
        return Err(DspError::InvalidParam("empty spectrogram".into()));
    }
    if context == 0 || context % 2 == 0 {
        return Err(DspError::InvalidParam(format!(
            "context must be odd and positive, got {context}"
        )));
    }
    let logp = log_power(spec);
    let mut data = stack_context(&logp, context);
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != data.cols() {
                return Err(DspError::InvalidParam(format!(
                    "normalization stats have {} dims, features have {}",
                    s.mean.len(),
                    data.cols()
                )));
            }
            s.clone()
        }
        None => NormStats::from_matrix(&data),
    };
    stats.apply(&mut data);
    Ok(FrameFeatures { data, stats })
}

/// Stacks `context` frames (half past, current, half future) per row,
/// replicating edge frames.
pub fn stack_context(logp: &DenseMatrix, context: usize) -> DenseMatrix {
    let frames = logp.rows();
    let bins = logp.cols();
    let half = context as isize / 2;
    let mut out = DenseMatrix::zeros(frames, context * bins);
    for t in 0..frames {
        let row = out.row_mut(t);
        for c in 0..context {
            let src = (t as isize + c as isize - half).clamp(0, frames as isize - 1) as usize;
            row[c * bins..(c + 1) * bins].copy_from_slice(logp.row(src));
        }
    }
    out
}
