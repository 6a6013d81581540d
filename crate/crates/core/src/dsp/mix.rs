//! SNR-controlled mixing and synthetic room impulse responses.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::stft::with_planner;
use super::{AudioClip, DspError, Result};

/// Gains applied while building a mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixInfo {
    /// Scale applied to the (tiled) noise before adding it to the clean clip.
    pub noise_gain: f64,
    /// Peak-normalization scale applied to the final mixture (1.0 if none).
    pub peak_scale: f64,
}

/// Adds noise to `clean` at the requested SNR, measured over the whole clip.
///
/// The noise is tiled when shorter than the clean clip and scaled by
/// `g = sqrt(P_clean / (P_noise * 10^(snr_db/10)))`. A `+inf` target returns
/// the clean clip unchanged. If the mixture peaks above 1 it is peak
/// normalized, with the scale recorded.
pub fn mix_at_snr(clean: &AudioClip, noise: &AudioClip, snr_db: f64) -> Result<(AudioClip, MixInfo)> {
    if noise.sample_rate != clean.sample_rate {
        return Err(DspError::SampleRateMismatch {
            expected: clean.sample_rate,
            got: noise.sample_rate,
        });
    }
    let p_clean = clean.power();
    if p_clean <= 0.0 {
        return Err(DspError::SilentClean);
    }
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Ok((
            clean.clone(),
            MixInfo {
                noise_gain: 0.0,
                peak_scale: 1.0,
            },
        ));
    }
    if noise.is_empty() {
        return Err(DspError::SilentNoise);
    }
    let n = clean.len();
    let tiled: Vec<f64> = (0..n).map(|i| noise.samples[i % noise.len()]).collect();
    let p_noise = tiled.iter().map(|s| s * s).sum::<f64>() / n as f64;
    if p_noise <= 0.0 {
        return Err(DspError::SilentNoise);
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut samples: Vec<f64> = clean
        .samples
        .iter()
        .zip(&tiled)
        .map(|(c, v)| c + gain * v)
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let peak_scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if peak_scale != 1.0 {
        for s in samples.iter_mut() {
            *s *= peak_scale;
        }
    }
    Ok((
        AudioClip::new(samples, clean.sample_rate),
        MixInfo { noise_gain: gain, peak_scale },
    ))
}

/// Synthetic room impulse response: a unit impulse followed by an
/// exponentially decaying white-noise tail reaching -60 dB at `rt60_ms`.
pub fn synth_rir(rt60_ms: f64, sample_rate: u32, seed: u64) -> Result<AudioClip> {
    if !(50.0..=1000.0).contains(&rt60_ms) {
        return Err(DspError::InvalidParam(format!(
            "rt60 {rt60_ms} ms outside [50, 1000]"
        )));
    }
    let n60 = (rt60_ms / 1000.0 * sample_rate as f64).round() as usize;
    // amplitude decays by 10^-3 (i.e. -60 dB) over n60 samples
    let tau = n60 as f64 / (3.0 * std::f64::consts::LN_10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tail_level = 0.35;
    let mut h = Vec::with_capacity(n60 + 1);
    h.push(1.0);
    for i in 1..=n60 {
        let envelope = (-(i as f64) / tau).exp();
        h.push(tail_level * envelope * rng.gen_range(-1.0..1.0));
    }
    Ok(AudioClip::new(h, sample_rate))
}

/// FFT convolution of a clip with an impulse response; output length is
/// `clip.len() + rir.len() - 1`.
pub fn apply_rir(clip: &AudioClip, rir: &AudioClip) -> Result<AudioClip> {
    if rir.sample_rate != clip.sample_rate {
        return Err(DspError::SampleRateMismatch {
            expected: clip.sample_rate,
            got: rir.sample_rate,
        });
    }
    let out_len = clip.len() + rir.len() - 1;
    let size = out_len.next_power_of_two();
    let fft = with_planner(|p| p.plan_fft_forward(size));
    let ifft = with_planner(|p| p.plan_fft_inverse(size));
    let mut a: Vec<Complex<f64>> = clip
        .samples
        .iter()
        .map(|&s| Complex::new(s, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut b: Vec<Complex<f64>> = rir
        .samples
        .iter()
        .map(|&s| Complex::new(s, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    fft.process(&mut a);
    fft.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    ifft.process(&mut a);
    let scale = 1.0 / size as f64;
    Ok(AudioClip::new(
        a[..out_len].iter().map(|c| c.re * scale).collect(),
        clip.sample_rate,
    ))
}
