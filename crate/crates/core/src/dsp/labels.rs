//! Ground-truth VAD labels from clean-signal frame energy.

use super::{AudioClip, DspError, Result, StftParams};

/// Labels each analysis frame 1 iff its log-energy is within `threshold_db`
/// of the loudest frame. The frame grid is identical to [`super::stft`]'s.
/// A silent clip yields all zeros.
pub fn vad_labels(clean: &AudioClip, params: &StftParams, threshold_db: f64) -> Result<Vec<u8>> {
    if clean.len() < params.frame_len {
        return Err(DspError::ClipTooShort {
            len: clean.len(),
            needed: params.frame_len,
        });
    }
    let frames = params.frame_count(clean.len());
    let energies: Vec<f64> = (0..frames)
        .map(|t| {
            let start = t * params.hop;
            clean.samples[start..start + params.frame_len]
                .iter()
                .map(|s| s * s)
                .sum()
        })
        .collect();
    let max = energies.iter().fold(0.0f64, |m, &e| m.max(e));
    if max <= 1e-20 {
        return Ok(vec![0; frames]);
    }
    let floor_db = 10.0 * max.log10() - threshold_db;
    Ok(energies
        .iter()
        .map(|&e| {
            let db = 10.0 * (e + 1e-300).log10();
            u8::from(db >= floor_db)
        })
        .collect())
}
