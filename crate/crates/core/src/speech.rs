//! Speech feature extraction behind a pluggable backend, and alignment of the
//! feature sequence to the visual frame rate.
//!
//! Two kinds of backend exist. The stub computes windowed spectral statistics
//! and needs nothing on disk. The pretrained backends (a HuBERT-style
//! reference model and a wav2vec2-style alternate) read embeddings that were
//! exported offline from the real model into a feature cache directory, one
//! container per clip keyed by a hash of its samples.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::container::{Container, ContainerKind};
use crate::data::{AudioClip, TARGET_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Encoder output at the encoder's native rate.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechFeatureSequence {
    features: Array2<f64>,
    feature_rate: f64,
}

impl SpeechFeatureSequence {
    pub fn new(features: Array2<f64>, feature_rate: f64) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::EmptyInput("speech feature sequence has no frames".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("speech features contain non-finite values".into()));
        }
        if feature_rate.is_nan() || feature_rate <= 0.0 {
            return Err(Error::Validation("feature rate must be positive".into()));
        }
        Ok(Self {
            features,
            feature_rate,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature_rate(&self) -> f64 {
        self.feature_rate
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendName {
    ReferencePretrained,
    AlternatePretrained,
    Stub,
}

impl FromStr for BackendName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference-pretrained" | "hubert" => Ok(BackendName::ReferencePretrained),
            "alternate-pretrained" | "wav2vec2" => Ok(BackendName::AlternatePretrained),
            "stub" => Ok(BackendName::Stub),
            other => Err(Error::Config(format!("unknown encoder backend `{other}`"))),
        }
    }
}

/// Frozen speech encoder.
pub trait SpeechEncoder: Send + Sync {
    fn name(&self) -> BackendName;
    fn feature_dim(&self) -> usize;
    /// Native output rate in frames per second.
    fn feature_rate(&self) -> f64;
    /// Number of output frames for a 16 kHz clip of `n_samples` samples.
    fn output_frames(&self, n_samples: usize) -> usize;
    fn encode(&self, clip: &AudioClip) -> Result<SpeechFeatureSequence>;
}

/// Encodes a 16 kHz mono clip.
pub fn encode_audio(clip: &AudioClip, backend: &dyn SpeechEncoder) -> Result<SpeechFeatureSequence> {
    if clip.sample_rate() != TARGET_SAMPLE_RATE {
        return Err(Error::Contract(format!(
            "speech encoders expect {TARGET_SAMPLE_RATE} Hz audio, got {} Hz",
            clip.sample_rate()
        )));
    }
    let out = backend.encode(clip)?;
    debug_assert_eq!(out.feature_dim(), backend.feature_dim());
    Ok(out)
}

/// Linearly resamples a feature sequence to `n_frames` rows. The first and
/// last rows of the input map onto the first and last output rows.
pub fn align_to_frames(seq: &SpeechFeatureSequence, n_frames: usize) -> Result<Array2<f64>> {
    resample_rows(seq.features(), n_frames)
}

pub(crate) fn resample_rows(src: &Array2<f64>, n_frames: usize) -> Result<Array2<f64>> {
    let (t_a, f) = src.dim();
    if t_a == 0 {
        return Err(Error::EmptyInput("cannot align an empty feature sequence".into()));
    }
    if n_frames == 0 {
        return Err(Error::Contract("alignment target must have at least one frame".into()));
    }
    if n_frames == t_a {
        return Ok(src.clone());
    }
    let mut out = Array2::zeros((n_frames, f));
    for i in 0..n_frames {
        let pos = if n_frames == 1 {
            (t_a - 1) as f64 / 2.0
        } else {
            i as f64 * (t_a - 1) as f64 / (n_frames - 1) as f64
        };
        let lo = (pos.floor() as usize).min(t_a - 1);
        let hi = (lo + 1).min(t_a - 1);
        let w = pos - lo as f64;
        for j in 0..f {
            out[[i, j]] = (1.0 - w) * src[[lo, j]] + w * src[[hi, j]];
        }
    }
    Ok(out)
}

pub const STUB_FEATURE_DIM: usize = 32;
pub const STUB_HOP: usize = 320;
const STUB_WINDOW: usize = 400;
const STUB_FFT: usize = 512;

/// Weight-free test backend: per 20 ms hop, log RMS energy and 31 log-spaced
/// spectral band means of a 25 ms Hann window. 32 features at 50 Hz.
#[derive(Clone)]
pub struct StubEncoder {
    fft: Arc<dyn rustfft::Fft<f64>>,
    window: Vec<f64>,
    bands: Vec<(usize, usize)>,
}

impl std::fmt::Debug for StubEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StubEncoder").finish_non_exhaustive()
    }
}

impl Default for StubEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl StubEncoder {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(STUB_FFT);
        let window = (0..STUB_WINDOW)
            .map(|i| {
                0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / (STUB_WINDOW - 1) as f64).cos()
            })
            .collect();
        let n_bands = STUB_FEATURE_DIM - 1;
        let max_bin = STUB_FFT / 2;
        let edge = |k: usize| -> usize {
            let lo = 1.0f64.ln();
            let hi = (max_bin as f64).ln();
            (lo + (hi - lo) * k as f64 / n_bands as f64).exp().round() as usize
        };
        let bands = (0..n_bands)
            .map(|k| {
                let a = edge(k).max(1);
                let b = edge(k + 1).max(a + 1).min(max_bin + 1);
                (a.min(max_bin), b)
            })
            .collect();
        Self { fft, window, bands }
    }
}

impl SpeechEncoder for StubEncoder {
    fn name(&self) -> BackendName {
        BackendName::Stub
    }

    fn feature_dim(&self) -> usize {
        STUB_FEATURE_DIM
    }

    fn feature_rate(&self) -> f64 {
        TARGET_SAMPLE_RATE as f64 / STUB_HOP as f64
    }

    fn output_frames(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(STUB_HOP).max(1)
    }

    fn encode(&self, clip: &AudioClip) -> Result<SpeechFeatureSequence> {
        Ok(stub_encode_with(self, clip))
    }
}

fn stub_encode_with(enc: &StubEncoder, clip: &AudioClip) -> SpeechFeatureSequence {
    let x = clip.samples();
    let frames = enc.output_frames(x.len());
    let mut out = Array2::zeros((frames, STUB_FEATURE_DIM));
    let mut buf = vec![Complex::new(0.0, 0.0); STUB_FFT];
    for t in 0..frames {
        let start = t * STUB_HOP;
        let mut energy = 0.0;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = if i < STUB_WINDOW {
                x.get(start + i).copied().unwrap_or(0.0) as f64
            } else {
                0.0
            };
            if i < STUB_WINDOW {
                energy += v * v;
            }
            let w = enc.window.get(i).copied().unwrap_or(0.0);
            *slot = Complex::new(v * w, 0.0);
        }
        enc.fft.process(&mut buf);
        out[[t, 0]] = (energy / STUB_WINDOW as f64).sqrt().ln_1p();
        for (k, &(a, b)) in enc.bands.iter().enumerate() {
            let mean = buf[a..b].iter().map(|c| c.norm()).sum::<f64>() / (b - a) as f64;
            out[[t, k + 1]] = mean.ln_1p();
        }
    }
    SpeechFeatureSequence::new(out, enc.feature_rate()).expect("stub features are finite")
}

/// Stub encoding of a clip (32 features at 50 Hz).
pub fn stub_encode(clip: &AudioClip) -> SpeechFeatureSequence {
    stub_encode_with(&StubEncoder::new(), clip)
}

/// Output length of the HuBERT / wav2vec2 convolutional front end.
pub fn conv_frontend_frames(n_samples: usize) -> usize {
    const LAYERS: [(usize, usize); 7] = [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)];
    LAYERS.iter().fold(n_samples, |len, &(k, s)| {
        if len < k {
            0
        } else {
            (len - k) / s + 1
        }
    })
}

/// Cache key of a clip: hex SHA-256 of its sample rate and little-endian f32 samples.
pub fn clip_key(clip: &AudioClip) -> String {
    let mut h = Sha256::new();
    h.update(clip.sample_rate().to_le_bytes());
    for s in clip.samples() {
        h.update(s.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Pretrained encoder served from a directory of exported embeddings.
#[derive(Clone, Debug)]
pub struct PretrainedEncoder {
    name: BackendName,
    cache_dir: PathBuf,
    feature_dim: usize,
}

impl PretrainedEncoder {
    pub const FEATURE_RATE: f64 = 50.0;

    pub fn new(name: BackendName, weights_path: &Path, feature_dim: usize) -> Result<Self> {
        if name == BackendName::Stub {
            return Err(Error::Config("the stub is not a pretrained backend".into()));
        }
        if !weights_path.is_dir() {
            return Err(Error::EncoderUnavailable(format!(
                "no exported embeddings found at {}",
                weights_path.display()
            )));
        }
        if feature_dim == 0 {
            return Err(Error::Config("encoder.feature_dim must be positive".into()));
        }
        Ok(Self {
            name,
            cache_dir: weights_path.to_path_buf(),
            feature_dim,
        })
    }

    fn path_for(&self, clip: &AudioClip) -> PathBuf {
        self.cache_dir.join(format!("{}.tdm", clip_key(clip)))
    }

    /// Stores embeddings for `clip` in the cache directory.
    pub fn store(&self, clip: &AudioClip, features: &Array2<f64>) -> Result<PathBuf> {
        let path = self.path_for(clip);
        Container {
            kind: ContainerKind::Features,
            rate: Self::FEATURE_RATE as f32,
            subject: String::new(),
            sentence: String::new(),
            data: features.clone(),
        }
        .write(&path)?;
        Ok(path)
    }
}

impl SpeechEncoder for PretrainedEncoder {
    fn name(&self) -> BackendName {
        self.name
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn feature_rate(&self) -> f64 {
        Self::FEATURE_RATE
    }

    fn output_frames(&self, n_samples: usize) -> usize {
        conv_frontend_frames(n_samples)
    }

    fn encode(&self, clip: &AudioClip) -> Result<SpeechFeatureSequence> {
        let path = self.path_for(clip);
        if !path.is_file() {
            return Err(Error::EncoderUnavailable(format!(
                "no exported embedding for clip {} in {}",
                clip_key(clip),
                self.cache_dir.display()
            )));
        }
        let c = Container::read(&path)?;
        if c.kind != ContainerKind::Features || c.data.ncols() != self.feature_dim {
            return Err(Error::format(
                &path,
                format!(
                    "expected {} features per frame, found {:?} with {} columns",
                    self.feature_dim,
                    c.kind,
                    c.data.ncols()
                ),
            ));
        }
        let expected = self.output_frames(clip.samples().len());
        if c.data.nrows().abs_diff(expected) > 1 {
            return Err(Error::format(
                &path,
                format!("{} frames cached, encoder front end yields {expected}", c.data.nrows()),
            ));
        }
        SpeechFeatureSequence::new(c.data, Self::FEATURE_RATE)
    }
}

/// Encoder settings as they appear in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub name: BackendName,
    pub feature_dim: usize,
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
    /// Encoder fine-tuning; the toolkit treats encoders as frozen.
    #[serde(default)]
    pub finetune: bool,
    #[serde(default = "default_alignment")]
    pub alignment: String,
}

fn default_alignment() -> String {
    "linear".into()
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            name: BackendName::Stub,
            feature_dim: STUB_FEATURE_DIM,
            weights_path: None,
            finetune: false,
            alignment: default_alignment(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.finetune {
            return Err(Error::Config(
                "encoder.finetune is not supported: encoders are frozen feature extractors".into(),
            ));
        }
        if self.alignment != "linear" {
            return Err(Error::Config(format!(
                "encoder.alignment `{}` unsupported (only `linear`)",
                self.alignment
            )));
        }
        if self.name == BackendName::Stub && self.feature_dim != STUB_FEATURE_DIM {
            return Err(Error::Config(format!(
                "the stub encoder produces {STUB_FEATURE_DIM} features, config says {}",
                self.feature_dim
            )));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn SpeechEncoder>> {
        self.validate()?;
        match self.name {
            BackendName::Stub => Ok(Box::new(StubEncoder::new())),
            name => {
                let path = self.weights_path.as_ref().ok_or_else(|| {
                    Error::EncoderUnavailable("encoder.weights_path is not set".into())
                })?;
                Ok(Box::new(PretrainedEncoder::new(name, path, self.feature_dim)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn tone(seconds: f64, amp: f32) -> AudioClip {
        let n = (seconds * 16_000.0) as usize;
        let s = (0..n)
            .map(|i| amp * (i as f32 * 0.07).sin() + 0.3 * amp * (i as f32 * 0.31).sin())
            .collect();
        AudioClip::new(s, 16_000).unwrap()
    }

    #[test]
    fn one_second_on_fifty_hertz_backends() {
        let silence = AudioClip::new(vec![0.0; 16_000], 16_000).unwrap();
        let stub = StubEncoder::new();
        let t_a = encode_audio(&silence, &stub).unwrap().len();
        assert_eq!(t_a, stub.output_frames(16_000));
        assert!((49..=51).contains(&t_a));
        // HuBERT-style front end on the same input
        let hubert = conv_frontend_frames(16_000);
        assert_eq!(hubert, 49);
    }

    #[test]
    fn silence_gives_zero_features() {
        let f = stub_encode(&AudioClip::new(vec![0.0; 5_000], 16_000).unwrap());
        assert!(f.features().iter().all(|&v| v == 0.0));
        assert_eq!(f.feature_dim(), 32);
    }

    #[test]
    fn deterministic_and_amplitude_sensitive() {
        let a = tone(0.5, 0.2);
        let f1 = stub_encode(&a);
        let f2 = stub_encode(&a);
        assert_eq!(f1, f2);
        let doubled = AudioClip::new(a.samples().iter().map(|s| 2.0 * s).collect(), 16_000).unwrap();
        let g = stub_encode(&doubled);
        // independent check of the energy column on frame 3
        let start = 3 * STUB_HOP;
        let rms = |clip: &AudioClip| {
            let e: f64 = clip.samples()[start..start + STUB_WINDOW]
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum();
            (e / STUB_WINDOW as f64).sqrt().ln_1p()
        };
        assert!((f1.features()[[3, 0]] - rms(&a)).abs() < 1e-12);
        assert!((g.features()[[3, 0]] - rms(&doubled)).abs() < 1e-12);
        assert!(g.features()[[3, 0]] > f1.features()[[3, 0]]);
        assert_ne!(f1, g);
    }

    #[test]
    fn wrong_rate_is_contract_error() {
        let clip = AudioClip::new(vec![0.0; 100], 8_000).unwrap();
        assert!(matches!(encode_audio(&clip, &StubEncoder::new()), Err(Error::Contract(_))));
    }

    #[test]
    fn align_identity_and_hand_interpolation() {
        let src = Array2::from_shape_fn((10, 3), |(i, j)| (i * 3 + j) as f64);
        let seq = SpeechFeatureSequence::new(src.clone(), 50.0).unwrap();
        assert_eq!(align_to_frames(&seq, 10).unwrap(), src);
        let two = SpeechFeatureSequence::new(array![[0.0], [2.0]], 50.0).unwrap();
        assert_eq!(align_to_frames(&two, 3).unwrap(), array![[0.0], [1.0], [2.0]]);
    }

    #[test]
    fn align_constant_rows() {
        let seq = SpeechFeatureSequence::new(Array2::from_elem((7, 4), 1.5), 50.0).unwrap();
        for n in [1, 3, 7, 20] {
            assert!(align_to_frames(&seq, n).unwrap().iter().all(|&v| v == 1.5));
        }
    }

    #[test]
    fn align_empty_input() {
        assert!(matches!(resample_rows(&Array2::zeros((0, 2)), 3), Err(Error::EmptyInput(_))));
        assert!(SpeechFeatureSequence::new(Array2::zeros((0, 2)), 50.0).is_err());
    }

    #[test]
    fn missing_weights_advise_stub() {
        let err = PretrainedEncoder::new(
            BackendName::ReferencePretrained,
            Path::new("/definitely/not/here"),
            768,
        )
        .unwrap_err();
        assert!(err.to_string().contains("stub"), "{err}");
        let cfg = EncoderConfig {
            name: BackendName::ReferencePretrained,
            feature_dim: 768,
            ..EncoderConfig::default()
        };
        assert!(matches!(cfg.build(), Err(Error::EncoderUnavailable(_))));
    }

    #[test]
    fn pretrained_cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let enc = PretrainedEncoder::new(BackendName::ReferencePretrained, dir.path(), 4).unwrap();
        let clip = tone(1.0, 0.1);
        let feats = Array2::from_shape_fn((49, 4), |(i, j)| (i + j) as f64 * 0.5);
        enc.store(&clip, &feats).unwrap();
        let out = encode_audio(&clip, &enc).unwrap();
        assert_eq!(out.features(), &feats);
        assert_eq!(out.feature_rate(), 50.0);
        let other = tone(1.0, 0.2);
        assert!(matches!(encode_audio(&other, &enc), Err(Error::EncoderUnavailable(_))));
    }

    #[test]
    fn finetune_rejected() {
        let cfg = EncoderConfig {
            finetune: true,
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn alignment_stays_within_column_bounds(
            t_a in 1usize..12,
            n in 1usize..40,
            vals in proptest::collection::vec(-5.0f64..5.0, 36),
        ) {
            let src = Array2::from_shape_fn((t_a, 3), |(i, j)| vals[(i * 3 + j) % vals.len()]);
            let seq = SpeechFeatureSequence::new(src.clone(), 50.0).unwrap();
            let out = align_to_frames(&seq, n).unwrap();
            prop_assert_eq!(out.nrows(), n);
            for j in 0..3 {
                let col = src.column(j);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for v in out.column(j) {
                    prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn output_length_monotonic_in_duration(a in 0usize..40_000, b in 0usize..40_000) {
            let stub = StubEncoder::new();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(stub.output_frames(lo) <= stub.output_frames(hi));
            prop_assert!(conv_frontend_frames(lo) <= conv_frontend_frames(hi));
        }
    }

    #[test]
    fn encoded_length_monotonic() {
        let stub = StubEncoder::new();
        let mut last = 0;
        for secs in [0.1, 0.25, 0.5, 1.0, 1.7] {
            let n = encode_audio(&tone(secs, 0.1), &stub).unwrap().len();
            assert!(n >= last);
            last = n;
        }
    }
}
