//! 16-bit PCM mono WAV I/O. Resampling is out of scope; mismatched rates are
//! rejected by the caller via the `expected_rate` check.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioClip, DspError, Result};

/// Reads a 16-bit PCM mono WAV file. When `expected_rate` is given, a file
/// with any other sample rate is rejected.
pub fn read_wav(path: &Path, expected_rate: Option<u32>) -> Result<AudioClip> {
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(DspError::MonoRequired {
            channels: spec.channels,
        });
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(DspError::UnsupportedFormat(format!(
            "{}-bit {:?}, need 16-bit PCM",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    if let Some(expected) = expected_rate {
        if spec.sample_rate != expected {
            return Err(DspError::SampleRateMismatch {
                expected,
                got: spec.sample_rate,
            });
        }
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<f64>, _>>()?;
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Writes a clip as 16-bit PCM mono, clamping samples to [-1, 1].
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn round_trip_within_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let mut rng = StdRng::seed_from_u64(1);
        let samples: Vec<f64> = (0..2000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let clip = AudioClip::new(samples.clone(), 16_000);
        write_wav(&path, &clip).unwrap();
        let back = read_wav(&path, Some(16_000)).unwrap();
        assert_eq!(back.len(), clip.len());
        for (a, b) in samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0, "{a} vs {b}");
        }
    }

    #[test]
    fn stereo_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            w.write_sample(0i16).unwrap();
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let err = read_wav(&path, Some(16_000)).unwrap_err();
        assert!(err.to_string().contains("mono required"));
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hi.wav");
        write_wav(&path, &AudioClip::new(vec![0.0; 64], 44_100)).unwrap();
        let err = read_wav(&path, Some(16_000)).unwrap_err();
        assert!(err.to_string().contains("sample-rate mismatch"));
    }
}
