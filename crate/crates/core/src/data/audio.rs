use std::path::Path;

use crate::error::{Error, Result};

/// Sample rate every clip is converted to at load time.
pub const TARGET_SAMPLE_RATE: u32 = 16_000;

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Validation("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Validation("audio contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Linear-interpolation resampling. Returns a clone when the rate already matches.
    pub fn resampled(&self, rate: u32) -> Result<Self> {
        if rate == 0 {
            return Err(Error::Validation("target sample rate must be positive".into()));
        }
        if rate == self.sample_rate || self.samples.is_empty() {
            return Ok(Self {
                samples: self.samples.clone(),
                sample_rate: rate,
            });
        }
        let n_in = self.samples.len();
        let n_out = ((n_in as u64 * rate as u64 + self.sample_rate as u64 / 2)
            / self.sample_rate as u64)
            .max(1) as usize;
        let step = self.sample_rate as f64 / rate as f64;
        let samples = (0..n_out)
            .map(|i| {
                let pos = i as f64 * step;
                let lo = (pos.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                let frac = (pos - lo as f64).clamp(0.0, 1.0) as f32;
                self.samples[lo] * (1.0 - frac) + self.samples[hi] * frac
            })
            .collect();
        Ok(Self {
            samples,
            sample_rate: rate,
        })
    }

    /// Loads a WAV file, averages channels to mono and converts to 16 kHz.
    pub fn load_wav(path: &Path) -> Result<Self> {
        let entry = path.display().to_string();
        let mut reader = hound::WavReader::open(path).map_err(|e| Error::load(&entry, e))?;
        let spec = reader.spec();
        let channels = spec.channels.max(1) as usize;
        let interleaved: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::load(&entry, e))?,
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample.saturating_sub(1))) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 / scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::load(&entry, e))?
            }
        };
        let mono: Vec<f32> = interleaved
            .chunks(channels)
            .map(|c| c.iter().sum::<f32>() / c.len() as f32)
            .collect();
        Self::new(mono, spec.sample_rate)?.resampled(TARGET_SAMPLE_RATE)
    }

    /// Writes 32-bit float mono WAV.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::load(path.display().to_string(), e))?;
        for s in &self.samples {
            w.write_sample(*s).map_err(|e| Error::load(path.display().to_string(), e))?;
        }
        w.finalize().map_err(|e| Error::load(path.display().to_string(), e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resample_halves_length() {
        let clip = AudioClip::new((0..32_000).map(|i| (i % 7) as f32).collect(), 32_000).unwrap();
        let r = clip.resampled(16_000).unwrap();
        assert_eq!(r.samples().len(), 16_000);
        assert!((r.duration() - clip.duration()).abs() < 1e-9);
        assert_eq!(r.samples()[1], clip.samples()[2]);
    }

    #[test]
    fn wav_roundtrip_converts_to_16k() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let clip = AudioClip::new(vec![0.25; 48_000], 48_000).unwrap();
        clip.write_wav(&p).unwrap();
        let back = AudioClip::load_wav(&p).unwrap();
        assert_eq!(back.sample_rate(), TARGET_SAMPLE_RATE);
        assert_eq!(back.samples().len(), 16_000);
        assert!(back.samples().iter().all(|&s| (s - 0.25).abs() < 1e-6));
    }

    #[test]
    fn zero_rate_rejected() {
        assert!(AudioClip::new(vec![0.0], 0).is_err());
    }
}
