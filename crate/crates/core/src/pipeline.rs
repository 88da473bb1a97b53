//! Glue between data, speech features and the model: building aligned
//! training examples and generating motion for new audio.

use std::collections::BTreeMap;

use rand::Rng;

use crate::data::{AnimationSequence, AudioClip};
use crate::decoder::FaceModel;
use crate::diffusion::{sample_loop, Denoiser, NoiseSchedule, Sampled};
use crate::error::{Error, Result};
use crate::nn::Mat;
use crate::speech::{align_to_frames, encode_audio, SpeechEncoder};
use crate::trainer::TrainingExample;

/// Number of visual frames covering a clip at `fps`.
pub fn frames_for_audio(clip: &AudioClip, fps: f64) -> usize {
    ((clip.duration() * fps).round() as usize).max(1)
}

/// Speech features for `clip`, resampled to `n_frames` rows.
pub fn aligned_features(clip: &AudioClip, encoder: &dyn SpeechEncoder, n_frames: usize) -> Result<Mat> {
    let seq = encode_audio(clip, encoder)?;
    align_to_frames(&seq, n_frames)
}

/// Style index per subject: subjects in sorted order.
pub fn style_index<'a>(subjects: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, usize> {
    let mut names: Vec<&str> = subjects.into_iter().collect();
    names.sort_unstable();
    names.dedup();
    names.into_iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect()
}

pub fn make_example(
    clip: &AudioClip,
    motion: &AnimationSequence,
    encoder: &dyn SpeechEncoder,
    styles: &BTreeMap<String, usize>,
) -> Result<TrainingExample> {
    let audio = aligned_features(clip, encoder, motion.n_frames())?;
    Ok(TrainingExample {
        id: format!("{}/{}", motion.subject(), motion.sentence()),
        audio,
        motion: motion.frames().clone(),
        style: styles.get(motion.subject()).copied(),
    })
}

/// Generates motion for aligned audio. Without diffusion this is a single
/// pass on zero noise at `t = 0`.
pub fn generate<R: Rng + ?Sized>(
    model: &FaceModel,
    schedule: &NoiseSchedule,
    audio: &Mat,
    style: Option<usize>,
    steps: usize,
    rng: &mut R,
) -> Result<Sampled> {
    if model.config().diffusion_enabled {
        return sample_loop(audio, style, schedule, model, rng, steps);
    }
    let zeros = Mat::zeros((audio.nrows(), model.output_dim()));
    Ok(Sampled {
        motion: model.predict_x0(audio, &zeros, 0, style)?,
        evaluations: 1,
        last_t: 0,
    })
}

/// Clamps each column into the `[min, max]` range observed during training.
pub fn clamp_to_range(motion: &mut Mat, range: &(Vec<f64>, Vec<f64>)) -> Result<()> {
    let (lo, hi) = range;
    if lo.len() != motion.ncols() || hi.len() != motion.ncols() {
        return Err(Error::Contract(format!(
            "range has {} channels, motion has {}",
            lo.len(),
            motion.ncols()
        )));
    }
    for mut row in motion.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = v.clamp(lo[j], hi[j]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn frame_count_rounds() {
        let clip = AudioClip::new(vec![0.0; 16_000], 16_000).unwrap();
        assert_eq!(frames_for_audio(&clip, 25.0), 25);
        let short = AudioClip::new(vec![0.0; 10], 16_000).unwrap();
        assert_eq!(frames_for_audio(&short, 25.0), 1);
    }

    #[test]
    fn styles_sorted() {
        let s = style_index(["b", "a", "b", "c"]);
        assert_eq!(s["a"], 0);
        assert_eq!(s["c"], 2);
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn clamp() {
        let mut m = array![[-2.0, 0.5], [3.0, 9.0]];
        clamp_to_range(&mut m, &(vec![-1.0, 0.0], vec![1.0, 2.0])).unwrap();
        assert_eq!(m, array![[-1.0, 0.5], [1.0, 2.0]]);
        assert!(clamp_to_range(&mut m, &(vec![0.0], vec![1.0])).is_err());
    }
}
