//! End-to-end workflows shared by the command-line verbs: dataset
//! preparation, training runs, sampling, directory evaluation and ablations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::Serialize;

use crate::checkpoint::{hex, Checkpoint, CheckpointConfig};
use crate::config::RunConfig;
use crate::data::container::{read_rig_csv, read_sequence, write_rig_csv, write_sequence};
use crate::data::{
    generate_synthetic_dataset, load_rig_dataset, load_vertex_dataset, make_split, AnimationSequence, AudioClip,
    MotionKind, RegionMask, SplitEntry,
};
use crate::decoder::{DataKind, DecoderVariant, FaceModel, ModelConfig, NoiseEncoderVariant};
use crate::diffusion::Sampled;
use crate::error::{Error, Result};
use crate::metrics::{diversity, sequence_metrics, MetricReport, SequenceMetrics};
use crate::nn::Mat;
use crate::pipeline::{aligned_features, clamp_to_range, frames_for_audio, generate, style_index};
use crate::seed::rng_for;
use crate::speech::SpeechEncoder;
use crate::trainer::{EpochLog, Trainer, TrainingExample};

/// A held-out sequence with everything needed to sample and score it.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub audio: AudioClip,
    pub features: Mat,
    pub motion: AnimationSequence,
    pub style: Option<usize>,
}

/// Encoded, aligned and split dataset.
pub struct Prepared {
    pub train: Vec<TrainingExample>,
    pub val: Vec<TrainingExample>,
    /// Test-A when present, else test-B; the training set for the `all` split.
    pub test: Vec<EvalItem>,
    pub subjects: Vec<String>,
    pub output_dim: usize,
    pub fps: f64,
    pub mask: RegionMask,
    pub kind: MotionKind,
}

fn load_pairs(cfg: &RunConfig) -> Result<Vec<(AudioClip, AnimationSequence)>> {
    if let Some(s) = &cfg.data.synthetic {
        let samples = generate_synthetic_dataset(s.sequences, s.frames, s.dims, s.seed)?;
        return samples
            .into_iter()
            .map(|s| {
                let m = s.motion;
                let motion = match cfg.data.kind {
                    DataKind::Rig => m,
                    DataKind::Vertex => AnimationSequence::new(
                        m.frames().clone(),
                        MotionKind::VertexDisplacement,
                        m.fps(),
                        m.subject(),
                        m.sentence(),
                    )?,
                };
                Ok((s.audio, motion))
            })
            .collect();
    }
    let root = cfg.data.root()?;
    let manifest = if cfg.data.manifest.is_relative() {
        root.join(&cfg.data.manifest)
    } else {
        cfg.data.manifest.clone()
    };
    Ok(match cfg.data.kind {
        DataKind::Vertex => load_vertex_dataset(&root, &manifest)?
            .into_iter()
            .map(|s| (s.audio, s.motion))
            .collect(),
        DataKind::Rig => load_rig_dataset(&root, &manifest)?
            .into_iter()
            .map(|s| (s.audio, s.motion))
            .collect(),
    })
}

/// Loads, encodes and splits the configured dataset.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let pairs = load_pairs(cfg)?;
    let first = pairs
        .first()
        .ok_or_else(|| Error::EmptyInput("dataset has no sequences".into()))?;
    let fps = first.1.fps();
    let output_dim = first.1.dim();
    let kind = first.1.kind();
    for (_, m) in &pairs {
        if m.fps() != fps || m.dim() != output_dim {
            return Err(Error::Validation(format!(
                "{}/{} has {} columns at {} fps; the dataset started with {} at {}",
                m.subject(),
                m.sentence(),
                m.dim(),
                m.fps(),
                output_dim,
                fps
            )));
        }
    }
    let encoder = cfg.encoder.build()?;
    let index: BTreeMap<(String, String), usize> = pairs
        .iter()
        .enumerate()
        .map(|(i, (_, m))| ((m.subject().to_string(), m.sentence().to_string()), i))
        .collect();

    let (train_e, val_e, test_e) = match cfg.data.split_policy()? {
        None => {
            let all: Vec<SplitEntry> = index
                .keys()
                .map(|(s, t)| SplitEntry {
                    subject: s.clone(),
                    sentence: t.clone(),
                    condition: None,
                })
                .collect();
            (all.clone(), all.clone(), all)
        }
        Some(policy) => {
            let split = make_split(index.keys().map(|(s, t)| (s.as_str(), t.as_str())), &policy)?;
            let test = if split.test_a.is_empty() { split.test_b } else { split.test_a };
            (split.train, split.val, test)
        }
    };
    if train_e.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let subjects: Vec<String> = if cfg.data.styles {
        let mut s: Vec<String> = train_e.iter().map(|e| e.subject.clone()).collect();
        s.sort_unstable();
        s.dedup();
        s
    } else {
        Vec::new()
    };
    let styles = style_index(subjects.iter().map(String::as_str));

    let lookup = |e: &SplitEntry| -> Result<&(AudioClip, AnimationSequence)> {
        index
            .get(&(e.subject.clone(), e.sentence.clone()))
            .map(|&i| &pairs[i])
            .ok_or_else(|| Error::load(format!("{}/{}", e.subject, e.sentence), "listed in the split but not loaded"))
    };
    let to_example = |e: &SplitEntry| -> Result<TrainingExample> {
        let (clip, motion) = lookup(e)?;
        let audio = aligned_features(clip, encoder.as_ref(), motion.n_frames())?;
        let style_subject = e.condition.as_deref().unwrap_or(&e.subject);
        Ok(TrainingExample {
            id: format!("{}/{}", e.subject, e.sentence),
            audio,
            motion: motion.frames().clone(),
            style: styles.get(style_subject).copied(),
        })
    };
    let train = train_e.iter().map(to_example).collect::<Result<Vec<_>>>()?;
    let val = val_e.iter().map(to_example).collect::<Result<Vec<_>>>()?;
    let test = test_e
        .iter()
        .map(|e| {
            let ex = to_example(e)?;
            let (clip, motion) = lookup(e)?;
            let id = match &e.condition {
                Some(c) => format!("{}_{}_{c}", e.subject, e.sentence),
                None => format!("{}_{}", e.subject, e.sentence),
            };
            Ok(EvalItem {
                id,
                audio: clip.clone(),
                features: ex.audio,
                motion: motion.clone(),
                style: ex.style,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n_groups = output_dim / kind.group_size();
    let mask = cfg.data.region_mask(n_groups)?;
    info!(
        "dataset: {} train, {} val, {} test sequences; {} styles; D = {output_dim} at {fps} fps",
        train.len(),
        val.len(),
        test.len(),
        subjects.len()
    );
    Ok(Prepared {
        train,
        val,
        test,
        subjects,
        output_dim,
        fps,
        mask,
        kind,
    })
}

/// Model and checkpoint settings implied by a run config and its data.
pub fn checkpoint_config(cfg: &RunConfig, prepared: &Prepared) -> CheckpointConfig {
    let mut decoder = cfg.decoder.clone();
    if decoder.num_styles == 0 {
        decoder.num_styles = prepared.subjects.len();
    }
    CheckpointConfig {
        model: ModelConfig {
            decoder,
            audio_dim: cfg.encoder.feature_dim,
            output_dim: prepared.output_dim,
            diffusion_enabled: cfg.diffusion.enabled,
        },
        diffusion: cfg.diffusion.clone(),
        encoder: cfg.encoder.clone(),
        fps: prepared.fps,
        style_subjects: prepared.subjects.clone(),
    }
}

pub struct TrainOutcome {
    pub best: PathBuf,
    pub last: PathBuf,
    pub logs: Vec<EpochLog>,
    pub model: FaceModel,
    pub prepared: Prepared,
    pub seconds: f64,
}

/// Trains per `cfg` into `out`, continuing from `out/last.ckpt` when
/// `resume` is set and the file exists. Writes the resolved config as `config.toml`.
pub fn train_run(cfg: &RunConfig, out: &Path, resume: bool) -> Result<TrainOutcome> {
    let start = Instant::now();
    let prepared = prepare(cfg)?;
    let ck_cfg = checkpoint_config(cfg, &prepared);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    let last = out.join("last.ckpt");
    let mut trainer = if resume && last.exists() {
        let ck = Checkpoint::load(&last)?;
        ck.ensure_config(&ck_cfg)?;
        info!("resuming from {} at epoch {}", last.display(), ck.epoch);
        Trainer::resume(&ck, cfg.train.clone())?
    } else {
        Trainer::new(ck_cfg, cfg.train.clone(), cfg.seed)?
    };
    let logs = trainer.fit(&prepared.train, &prepared.val, Some(out))?;
    Ok(TrainOutcome {
        best: out.join("best.ckpt"),
        last,
        logs,
        model: trainer.into_model(),
        prepared,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// A loaded checkpoint ready for generation.
pub struct Generator {
    pub config: CheckpointConfig,
    pub model: FaceModel,
    pub rig_range: Option<(Vec<f64>, Vec<f64>)>,
    pub config_hash: String,
    encoder: Box<dyn SpeechEncoder>,
    schedule: crate::diffusion::NoiseSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub steps: usize,
    pub evaluations: usize,
    pub last_t: usize,
    pub style: Option<usize>,
    pub style_subject: Option<String>,
    pub frames: usize,
    pub fps: f64,
    pub config_hash: String,
}

impl Generator {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ck.config()?;
        let model = FaceModel::from_parameters(config.model.clone(), ck.params.clone())?;
        Ok(Self {
            encoder: config.encoder.build()?,
            schedule: config.diffusion.schedule()?,
            rig_range: ck.rig_range.clone(),
            config_hash: hex(&ck.config_hash()),
            config,
            model,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn with_model(config: CheckpointConfig, model: FaceModel, rig_range: Option<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        Ok(Self {
            encoder: config.encoder.build()?,
            schedule: config.diffusion.schedule()?,
            config_hash: hex(&config.hash()),
            rig_range,
            config,
            model,
        })
    }

    pub fn kind(&self) -> MotionKind {
        self.config.model.decoder.kind.into()
    }

    pub fn features(&self, clip: &AudioClip) -> Result<Mat> {
        aligned_features(clip, self.encoder.as_ref(), frames_for_audio(clip, self.config.fps))
    }

    /// Samples motion for aligned features. `steps` defaults to the full schedule.
    pub fn sample_features(
        &self,
        features: &Mat,
        style: Option<usize>,
        seed: u64,
        steps: Option<usize>,
        clamp: bool,
    ) -> Result<(Mat, SampleMeta)> {
        if let Some(s) = style {
            if s >= self.config.model.decoder.num_styles {
                return Err(Error::Argument(format!(
                    "style {s} out of range: the model knows {} training subjects",
                    self.config.model.decoder.num_styles
                )));
            }
        }
        let steps = steps.unwrap_or(self.schedule.steps());
        let mut rng = rng_for(seed, "sample");
        let Sampled {
            mut motion,
            evaluations,
            last_t,
        } = generate(&self.model, &self.schedule, features, style, steps, &mut rng)?;
        if clamp && self.kind() == MotionKind::RigControl {
            if let Some(r) = &self.rig_range {
                clamp_to_range(&mut motion, r)?;
            }
        }
        info!("sampled {} frames with {evaluations} denoising evaluations", motion.nrows());
        let meta = SampleMeta {
            seed,
            steps,
            evaluations,
            last_t,
            style,
            style_subject: style.and_then(|s| self.config.style_subjects.get(s).cloned()),
            frames: motion.nrows(),
            fps: self.config.fps,
            config_hash: self.config_hash.clone(),
        };
        Ok((motion, meta))
    }

    pub fn sample_clip(
        &self,
        clip: &AudioClip,
        name: &str,
        style: Option<usize>,
        seed: u64,
        steps: Option<usize>,
        clamp: bool,
    ) -> Result<(AnimationSequence, SampleMeta)> {
        let features = self.features(clip)?;
        let (motion, meta) = self.sample_features(&features, style, seed, steps, clamp)?;
        let subject = meta.style_subject.clone().unwrap_or_else(|| "none".into());
        Ok((AnimationSequence::new(motion, self.kind(), self.config.fps, subject, name)?, meta))
    }
}

/// Writes a sampled sequence: rig data as CSV, vertex data as a container,
/// plus `<file>.json` with the sampling metadata.
pub fn write_sample(seq: &AnimationSequence, meta: &SampleMeta, path: &Path) -> Result<PathBuf> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    match seq.kind() {
        MotionKind::RigControl => write_rig_csv(seq, None, path)?,
        MotionKind::VertexDisplacement => write_sequence(seq, path)?,
    }
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    let sidecar = PathBuf::from(sidecar);
    std::fs::write(&sidecar, serde_json::to_string_pretty(meta).expect("metadata serializes"))?;
    Ok(sidecar)
}

/// Default file extension of sampled motion.
pub fn motion_extension(kind: MotionKind) -> &'static str {
    match kind {
        MotionKind::RigControl => "csv",
        MotionKind::VertexDisplacement => "tdm",
    }
}

fn is_motion_file(p: &Path) -> bool {
    p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "tdm"))
}

/// Reads a motion file written by this toolkit (`.tdm` container or rig `.csv`).
pub fn read_motion(path: &Path) -> Result<AnimationSequence> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => {
            let (frames, _) = read_rig_csv(path)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("sequence");
            AnimationSequence::new(frames, MotionKind::RigControl, 1.0, "unknown", stem)
        }
        _ => read_sequence(path),
    }
}

fn motion_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::load(dir.display().to_string(), e))? {
        let p = entry?.path();
        if is_motion_file(&p) {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.insert(stem, p);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Skipped {
    pub name: String,
    pub reason: String,
}

pub struct EvalOutcome {
    pub per_sequence: Vec<SequenceMetrics>,
    pub skipped: Vec<Skipped>,
    pub report: MetricReport,
}

/// Pairs prediction and ground-truth files by stem and scores them.
/// Subdirectories of `pred_dir` holding the same stems (one per style) feed
/// the diversity metric. Results are written to `out_dir` when given.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, mask: Option<&Path>, out_dir: Option<&Path>) -> Result<EvalOutcome> {
    let gts = motion_files(gt_dir)?;
    let preds = motion_files(pred_dir)?;
    let mut style_dirs: Vec<PathBuf> = std::fs::read_dir(pred_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    style_dirs.sort();
    let styled: Vec<BTreeMap<String, PathBuf>> = style_dirs.iter().map(|d| motion_files(d)).collect::<Result<_>>()?;

    let mut skipped = Vec::new();
    let mut per_sequence = Vec::new();
    let mut diversities = Vec::new();
    let mut mask_used: Option<RegionMask> = None;
    let mut kind = None;
    for (name, gt_path) in &gts {
        let pred_path = preds.get(name).or_else(|| styled.iter().find_map(|m| m.get(name)));
        let Some(pred_path) = pred_path else {
            skipped.push(Skipped {
                name: name.clone(),
                reason: "no prediction with this name".into(),
            });
            continue;
        };
        let scored = (|| -> Result<(SequenceMetrics, Option<f64>, RegionMask)> {
            let gt = read_motion(gt_path)?;
            let pred = read_motion(pred_path)?;
            let n_groups = gt.n_groups();
            let m = match mask {
                Some(p) => RegionMask::read(p)?,
                None => RegionMask::full(n_groups),
            };
            let metrics = sequence_metrics(name, &pred, &gt, &m)?;
            let variants: Vec<AnimationSequence> = styled
                .iter()
                .filter_map(|s| s.get(name))
                .map(|p| read_motion(p))
                .collect::<Result<_>>()?;
            let div = if variants.len() >= 2 { Some(diversity(&variants)?) } else { None };
            Ok((metrics, div, m))
        })();
        match scored {
            Ok((metrics, div, m)) => {
                kind.get_or_insert(read_motion(gt_path)?.kind());
                mask_used.get_or_insert(m);
                per_sequence.push(metrics);
                diversities.extend(div);
            }
            Err(e) => skipped.push(Skipped {
                name: name.clone(),
                reason: e.to_string(),
            }),
        }
    }
    for name in preds.keys().filter(|n| !gts.contains_key(*n)) {
        skipped.push(Skipped {
            name: name.clone(),
            reason: "no ground truth with this name".into(),
        });
    }
    if let Some(out) = out_dir {
        std::fs::create_dir_all(out)?;
        let mut w = csv::Writer::from_path(out.join("skipped.csv")).map_err(|e| Error::format(out, e))?;
        w.write_record(["name", "reason"]).map_err(|e| Error::format(out, e))?;
        for s in &skipped {
            w.write_record([&s.name, &s.reason]).map_err(|e| Error::format(out, e))?;
        }
        w.flush()?;
    }
    if per_sequence.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no prediction could be paired with ground truth ({} skipped)",
            skipped.len()
        )));
    }
    let div = (!diversities.is_empty()).then(|| diversities.iter().sum::<f64>() / diversities.len() as f64);
    let dataset = gt_dir.file_name().and_then(|s| s.to_str()).unwrap_or("test").to_string();
    let report = MetricReport::aggregate(
        &dataset,
        mask_used.as_ref().expect("at least one scored sequence"),
        kind.expect("at least one scored sequence"),
        &per_sequence,
        div,
    )?;
    if let Some(out) = out_dir {
        std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report).expect("report serializes"))?;
        let mut w = csv::Writer::from_path(out.join("per_sequence.csv")).map_err(|e| Error::format(out, e))?;
        for s in &per_sequence {
            w.serialize(s).map_err(|e| Error::format(out, e))?;
        }
        w.flush()?;
    }
    Ok(EvalOutcome {
        per_sequence,
        skipped,
        report,
    })
}

/// Scores a generator on prepared test items: accuracy from one sample per
/// item, diversity across training styles (or across seeds without styles).
pub fn evaluate_model(gen: &Generator, items: &[EvalItem], mask: &RegionMask, seed: u64) -> Result<MetricReport> {
    let mut per = Vec::new();
    let mut divs = Vec::new();
    let styles = gen.config.model.decoder.num_styles;
    for (i, item) in items.iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        let (motion, _) = gen.sample_features(&item.features, item.style, s, None, true)?;
        let pred = AnimationSequence::new(motion, gen.kind(), gen.config.fps, item.motion.subject(), item.motion.sentence())?;
        per.push(sequence_metrics(&item.id, &pred, &item.motion, mask)?);
        let variants: Vec<AnimationSequence> = if styles >= 2 {
            (0..styles)
                .map(|st| gen.sample_features(&item.features, Some(st), s, None, true))
                .map(|r| r.and_then(|(m, _)| AnimationSequence::new(m, gen.kind(), gen.config.fps, "v", "v")))
                .collect::<Result<_>>()?
        } else {
            (0..3)
                .map(|k| gen.sample_features(&item.features, item.style, s.wrapping_add(1000 * (k + 1)), None, true))
                .map(|r| r.and_then(|(m, _)| AnimationSequence::new(m, gen.kind(), gen.config.fps, "v", "v")))
                .collect::<Result<_>>()?
        };
        divs.push(diversity(&variants)?);
    }
    let div = divs.iter().sum::<f64>() / divs.len().max(1) as f64;
    MetricReport::aggregate("test", mask, gen.kind(), &per, Some(div))
}

/// A named axis of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Steps,
    Decoder,
    NoiseEncoder,
    Diffusion,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steps" => Ok(Self::Steps),
            "decoder" => Ok(Self::Decoder),
            "noise-encoder" => Ok(Self::NoiseEncoder),
            "diffusion" => Ok(Self::Diffusion),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (steps, decoder, noise-encoder, diffusion)"
            ))),
        }
    }
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [Self::Steps, Self::Decoder, Self::NoiseEncoder, Self::Diffusion];

    pub fn name(self) -> &'static str {
        match self {
            Self::Steps => "steps",
            Self::Decoder => "decoder",
            Self::NoiseEncoder => "noise-encoder",
            Self::Diffusion => "diffusion",
        }
    }

    /// `(setting label, config overrides)` for every row of this axis.
    pub fn settings(self) -> Vec<(String, Vec<String>)> {
        match self {
            Self::Steps => [100, 250, 500, 750, 1000]
                .iter()
                .map(|s| (s.to_string(), vec![format!("diffusion.steps={s}")]))
                .collect(),
            Self::Decoder => DecoderVariant::ALL
                .iter()
                .map(|v| (v.to_string(), vec![format!("decoder.decoder_variant=\"{v}\"")]))
                .collect(),
            Self::NoiseEncoder => NoiseEncoderVariant::ALL
                .iter()
                .filter(|v| **v != NoiseEncoderVariant::None)
                .map(|v| {
                    (
                        v.to_string(),
                        vec![
                            "data.kind=\"vertex\"".into(),
                            "decoder.kind=\"vertex\"".into(),
                            "decoder.input_embedding_dim=16".into(),
                            format!("decoder.noise_encoder_variant=\"{v}\""),
                        ],
                    )
                })
                .collect(),
            Self::Diffusion => vec![
                ("on".into(), vec!["diffusion.enabled=true".into()]),
                ("off".into(), vec!["diffusion.enabled=false".into()]),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub ablation: String,
    pub setting: String,
    pub mve: Option<f64>,
    pub lve: Option<f64>,
    pub fdd: Option<f64>,
    pub diversity: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub seconds: f64,
    pub status: String,
}

fn ablation_row(base: &RunConfig, base_overrides: &[String], axis: AblationAxis, label: &str, overrides: &[String], out: &Path) -> AblationRow {
    let start = Instant::now();
    let dir = out.join(format!("{}-{label}", axis.name()));
    let result = (|| -> Result<(MetricReport, Option<f64>)> {
        let toml_base = base.to_toml();
        let tmp = out.join(format!(".{}-{label}.toml", axis.name()));
        std::fs::write(&tmp, toml_base)?;
        let mut all = base_overrides.to_vec();
        all.extend_from_slice(overrides);
        let cfg = RunConfig::resolve(None, Some(&tmp), &all);
        let _ = std::fs::remove_file(&tmp);
        let cfg = cfg?;
        let outcome = train_run(&cfg, &dir, false)?;
        let final_loss = outcome.logs.last().map(|l| l.train_loss);
        let ck_cfg = checkpoint_config(&cfg, &outcome.prepared);
        let last = Checkpoint::load(&outcome.last)?;
        let gen = Generator::with_model(ck_cfg, outcome.model, last.rig_range.clone())?;
        let report = evaluate_model(&gen, &outcome.prepared.test, &outcome.prepared.mask, cfg.seed)?;
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report).expect("report serializes"))?;
        Ok((report, final_loss))
    })();
    let seconds = start.elapsed().as_secs_f64();
    match result {
        Ok((r, loss)) => AblationRow {
            ablation: axis.name().into(),
            setting: label.into(),
            mve: Some(r.mve),
            lve: Some(r.lve),
            fdd: Some(r.fdd),
            diversity: r.diversity,
            final_train_loss: loss,
            seconds,
            status: "ok".into(),
        },
        Err(e) => {
            warn!("ablation {} = {label} failed: {e}", axis.name());
            AblationRow {
                ablation: axis.name().into(),
                setting: label.into(),
                mve: None,
                lve: None,
                fdd: None,
                diversity: None,
                final_train_loss: None,
                seconds,
                status: format!("failed: {e}"),
            }
        }
    }
}

/// Trains and scores every setting of each axis, writing `ablation.csv` to
/// `out`. Settings run concurrently on up to `jobs` threads; a failed
/// setting is recorded and the rest continue.
pub fn ablate(base: &RunConfig, overrides: &[String], axes: &[AblationAxis], out: &Path, jobs: usize) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out)?;
    let tasks: Vec<(AblationAxis, String, Vec<String>)> = axes
        .iter()
        .flat_map(|&a| a.settings().into_iter().map(move |(l, o)| (a, l, o)))
        .collect();
    let jobs = jobs.max(1);
    let mut rows: Vec<Option<AblationRow>> = vec![None; tasks.len()];
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(&mut rows);
    std::thread::scope(|s| {
        for _ in 0..jobs.min(tasks.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some((axis, label, o)) = tasks.get(i) else { break };
                info!("ablation {} = {label}", axis.name());
                let row = ablation_row(base, overrides, *axis, label, o, out);
                results.lock().expect("no poisoned lock")[i] = Some(row);
            });
        }
    });
    let rows: Vec<AblationRow> = rows.into_iter().map(|r| r.expect("every task ran")).collect();
    let path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::format(&path, e))?;
    }
    w.flush()?;
    Ok(rows)
}
