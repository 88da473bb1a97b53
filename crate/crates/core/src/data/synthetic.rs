//! Desk-scale synthetic dataset: speech-like audio whose loudness envelope
//! drives smooth rig-control curves, so the audio-to-motion map is learnable.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::container::write_sequence;
use super::{AnimationSequence, AudioClip, MotionKind, RegionMask, TARGET_SAMPLE_RATE};
use crate::error::{Error, Result};

pub const SYNTHETIC_FPS: f64 = 25.0;
/// Synthetic sequences alternate between this many subjects.
pub const SYNTHETIC_SUBJECTS: usize = 2;

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub audio: AudioClip,
    pub motion: AnimationSequence,
}

struct Envelope {
    parts: Vec<(f64, f64, f64)>,
}

impl Envelope {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let parts = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.3..1.0),
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.0..TAU),
                )
            })
            .collect();
        Self { parts }
    }

    /// Loudness in [0, 1] at time `tau` seconds.
    fn at(&self, tau: f64) -> f64 {
        let total: f64 = self.parts.iter().map(|p| p.0).sum();
        let s: f64 = self
            .parts
            .iter()
            .map(|&(a, f, phi)| a * (TAU * f * tau + phi).sin())
            .sum();
        0.5 + 0.5 * s / total
    }
}

pub fn generate_synthetic_dataset(
    n_sequences: usize,
    n_frames: usize,
    dims: usize,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    if n_sequences == 0 || n_frames == 0 || dims == 0 {
        return Err(Error::Config(
            "synthetic dataset counts must all be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Per-control response shared by every sequence.
    let channels: Vec<(f64, f64, f64)> = (0..dims)
        .map(|_| {
            (
                rng.random_range(-2.0..2.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(0..3) as f64 / SYNTHETIC_FPS,
            )
        })
        .collect();
    let subject_gain = [1.0, 0.6];
    let samples_per_frame = (TARGET_SAMPLE_RATE as f64 / SYNTHETIC_FPS) as usize;

    (0..n_sequences)
        .map(|i| {
            let env = Envelope::random(&mut rng);
            let carrier = rng.random_range(120.0..320.0);
            let subject_ix = i % SYNTHETIC_SUBJECTS;
            let gain = subject_gain[subject_ix];

            let n_samples = n_frames * samples_per_frame;
            let samples: Vec<f32> = (0..n_samples)
                .map(|k| {
                    let tau = k as f64 / TARGET_SAMPLE_RATE as f64;
                    let tone = (TAU * carrier * tau).sin() + 0.4 * (TAU * 2.0 * carrier * tau).sin();
                    (0.5 * env.at(tau) * tone) as f32
                })
                .collect();
            let audio = AudioClip::new(samples, TARGET_SAMPLE_RATE)?;

            let frames = Array2::from_shape_fn((n_frames, dims), |(n, d)| {
                let (w, c, lag) = channels[d];
                let tau = n as f64 / SYNTHETIC_FPS;
                (gain * (w * (env.at(tau - lag) - 0.5) * 2.0 + c)).tanh()
            });
            let motion = AnimationSequence::new(
                frames,
                MotionKind::RigControl,
                SYNTHETIC_FPS,
                format!("synth{subject_ix}"),
                format!("seq{i:03}"),
            )?;
            Ok(SyntheticSample { audio, motion })
        })
        .collect()
}

/// Lower half of the controls are treated as lip controls, the rest as upper face.
pub fn synthetic_mask(dims: usize) -> RegionMask {
    let half = dims.div_ceil(2);
    let upper: Vec<usize> = if dims > 1 { (half..dims).collect() } else { vec![0] };
    RegionMask {
        id: Some("synthetic".into()),
        lip_indices: (0..half).collect(),
        upper_face_indices: upper,
    }
}

/// Writes audio, motion, a manifest and a region mask under `dir`.
pub fn write_synthetic_dataset(dir: &Path, samples: &[SyntheticSample]) -> Result<()> {
    std::fs::create_dir_all(dir.join("wav"))?;
    std::fs::create_dir_all(dir.join("motion"))?;
    let mut manifest = String::from("audio_path,motion_path,template_path,subject,sentence,fps\n");
    for s in samples {
        let stem = format!("{}_{}", s.motion.subject(), s.motion.sentence());
        let wav = format!("wav/{stem}.wav");
        let mot = format!("motion/{stem}.tdm");
        s.audio.write_wav(&dir.join(&wav))?;
        write_sequence(&s.motion, &dir.join(&mot))?;
        writeln!(
            manifest,
            "{wav},{mot},,{},{},{}",
            s.motion.subject(),
            s.motion.sentence(),
            s.motion.fps()
        )
        .expect("writing to a String");
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    if let Some(first) = samples.first() {
        synthetic_mask(first.motion.dim()).write(&dir.join("mask.json"))?;
    }
    Ok(())
}
