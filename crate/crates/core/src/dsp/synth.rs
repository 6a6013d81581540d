//! Bundled signal generators for self-contained datasets: pseudo-speech as
//! formant-filtered pulse trains with pauses, and several noise types.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AudioClip;

/// Two-pole resonator, the building block for formants and band noise.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(center_hz: f64, bandwidth_hz: f64, sample_rate: u32) -> Self {
        let sr = sample_rate as f64;
        let r = (-std::f64::consts::PI * bandwidth_hz / sr).exp();
        let theta = 2.0 * std::f64::consts::PI * center_hz / sr;
        Self {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain: (1.0 - r) * (1.0 - r),
            y1: 0.0,
            y2: 0.0,
        }
    }

    #[inline]
    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Synthetic utterances: glottal-like pulse trains driven through three
/// random formant resonators, alternating with silent pauses. Deterministic
/// per seed.
pub fn synth_speech(seconds: f64, sample_rate: u32, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let mut out = vec![0.0f64; n];
    let mut t = (rng.gen_range(0.04..0.15) * sr) as usize;
    while t < n {
        let utter_len = (rng.gen_range(0.30..0.80) * sr) as usize;
        let end = (t + utter_len).min(n);
        let f0_start = rng.gen_range(85.0..230.0);
        let f0_end = f0_start * rng.gen_range(0.8..1.25);
        let mut formants = [
            Resonator::new(rng.gen_range(280.0..900.0), rng.gen_range(60.0..140.0), sample_rate),
            Resonator::new(rng.gen_range(900.0..2300.0), rng.gen_range(80.0..180.0), sample_rate),
            Resonator::new(rng.gen_range(2300.0..3400.0), rng.gen_range(100.0..240.0), sample_rate),
        ];
        let gains = [1.0, 0.5, 0.25];
        let amp = rng.gen_range(0.25..0.5);
        let len = end - t;
        let mut phase = 0.0f64;
        for i in 0..len {
            let frac = i as f64 / len.max(1) as f64;
            let f0 = f0_start + (f0_end - f0_start) * frac;
            phase += f0 / sr;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            let excitation = pulse + 0.015 * rng.gen_range(-1.0..1.0);
            let mut v = 0.0;
            for (res, g) in formants.iter_mut().zip(&gains) {
                v += g * res.step(excitation);
            }
            // raised-cosine fade over the first/last 25 ms
            let fade = 0.025 * sr;
            let env_in = (i as f64 / fade).min(1.0);
            let env_out = ((len - 1 - i) as f64 / fade).min(1.0);
            out[t + i] = amp * v * env_in * env_out;
        }
        t = end + (rng.gen_range(0.15..0.50) * sr) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.7 {
        let k = 0.7 / peak;
        for s in out.iter_mut() {
            *s *= k;
        }
    }
    AudioClip::new(out, sample_rate)
}

/// Noise families for dataset synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    /// Narrow-band noise at a random center frequency.
    Band,
    /// Mains hum with harmonics over a low white floor.
    Hum,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [
        NoiseKind::White,
        NoiseKind::Pink,
        NoiseKind::Band,
        NoiseKind::Hum,
    ];
}

/// Deterministic per-seed noise clip of the requested kind, peak ~0.5.
pub fn synth_noise(seconds: f64, sample_rate: u32, kind: NoiseKind, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let mut out = vec![0.0f64; n];
    match kind {
        NoiseKind::White => {
            for s in out.iter_mut() {
                *s = rng.gen_range(-1.0..1.0);
            }
        }
        NoiseKind::Pink => {
            // Paul Kellet's three-pole approximation
            let (mut b0, mut b1, mut b2) = (0.0f64, 0.0f64, 0.0f64);
            for s in out.iter_mut() {
                let w: f64 = rng.gen_range(-1.0..1.0);
                b0 = 0.99765 * b0 + w * 0.0990460;
                b1 = 0.96300 * b1 + w * 0.2965164;
                b2 = 0.57000 * b2 + w * 1.0526913;
                *s = b0 + b1 + b2 + w * 0.1848;
            }
        }
        NoiseKind::Band => {
            let center = rng.gen_range(200.0..3500.0);
            let mut res = Resonator::new(center, rng.gen_range(80.0..400.0), sample_rate);
            for s in out.iter_mut() {
                *s = res.step(rng.gen_range(-1.0..1.0));
            }
        }
        NoiseKind::Hum => {
            let base: f64 = if rng.gen::<bool>() { 50.0 } else { 60.0 };
            for (i, s) in out.iter_mut().enumerate() {
                let t = i as f64 / sr;
                let hum = (2.0 * std::f64::consts::PI * base * t).sin()
                    + 0.5 * (2.0 * std::f64::consts::PI * 2.0 * base * t).sin()
                    + 0.25 * (2.0 * std::f64::consts::PI * 3.0 * base * t).sin();
                *s = hum + 0.1 * rng.gen_range(-1.0..1.0);
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let k = 0.5 / peak;
        for s in out.iter_mut() {
            *s *= k;
        }
    }
    AudioClip::new(out, sample_rate)
}
