use super::*;
use crate::decoder::{DecoderConfig, DecoderVariant, ModelConfig, NoiseEncoderVariant};
use crate::diffusion::{training_loss, DiffusionConfig, Denoiser};
use crate::speech::EncoderConfig;
use rand_distr::{Distribution, StandardNormal};

fn config() -> CheckpointConfig {
    CheckpointConfig {
        model: ModelConfig {
            decoder: DecoderConfig {
                kind: DataKind::Rig,
                input_embedding_dim: 0,
                gru_layers: 1,
                hidden_size: 8,
                dropout: 0.0,
                decoder_variant: DecoderVariant::Gru,
                noise_encoder_variant: NoiseEncoderVariant::None,
                timestep_dim: 8,
                num_styles: 2,
                style_every_layer: false,
                attention_heads: 1,
            },
            audio_dim: 3,
            output_dim: 2,
            diffusion_enabled: true,
        },
        diffusion: DiffusionConfig {
            steps: 20,
            ..Default::default()
        },
        encoder: EncoderConfig::default(),
        fps: 25.0,
        style_subjects: vec!["a".into(), "b".into()],
    }
}

fn data(n: usize, seed: u64) -> Vec<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = 3 + i % 3;
            TrainingExample {
                id: format!("s{i}"),
                audio: Mat::from_shape_simple_fn((len, 3), || StandardNormal.sample(&mut rng)),
                motion: Mat::from_shape_simple_fn((len, 2), || StandardNormal.sample(&mut rng)),
                style: Some(i % 2),
            }
        })
        .collect()
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        epochs,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut t = Trainer::new(config(), train_cfg(1), 1).unwrap();
    t.optimizer_mut().lr = 0.0;
    let before = t.model().parameters().clone();
    let d = data(2, 0);
    let loss = t.train_step(&[&d[0]]).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert_eq!(t.model().parameters(), &before);
    assert_eq!(t.state().step, 1);
}

#[test]
fn same_seed_same_trajectory() {
    let d = data(4, 0);
    let run = || {
        let mut t = Trainer::new(config(), train_cfg(3), 7).unwrap();
        (0..3).map(|_| t.run_epoch(&d).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn config_errors() {
    assert!(matches!(Trainer::new(config(), TrainConfig { learning_rate: 0.0, ..train_cfg(1) }, 0), Err(Error::Config(_))));
    assert!(Trainer::new(config(), TrainConfig { epochs: 0, ..train_cfg(1) }, 0).is_err());
    assert!(Trainer::new(config(), TrainConfig { optimizer: "sgd".into(), ..train_cfg(1) }, 0).is_err());
    let mut t = Trainer::new(config(), train_cfg(1), 0).unwrap();
    assert!(matches!(t.fit(&[], &[], None), Err(Error::Config(_))));
}

#[test]
fn evaluate_loss_matches_external_loop() {
    let t = Trainer::new(config(), train_cfg(1), 3).unwrap();
    let d = data(5, 1);
    let a = t.evaluate(&d).unwrap();
    assert_eq!(a, t.evaluate(&d).unwrap());

    let mut rng = ChaCha8Rng::seed_from_u64(TrainConfig::default().validation_seed);
    let mut losses = Vec::new();
    for ex in &d {
        let step = rng.random_range(1..=t.schedule().steps());
        let eps = standard_normal(ex.motion.dim(), &mut rng);
        let ab = t.schedule().alpha_bar(step).unwrap();
        let x_t = &ex.motion * ab.sqrt() + &eps * (1.0 - ab).sqrt();
        let pred = t.model().predict_x0(&ex.audio, &x_t, step, ex.style).unwrap();
        losses.push(training_loss(&ex.motion, &pred, LossKind::Mse).unwrap());
    }
    let manual = losses.iter().sum::<f64>() / losses.len() as f64;
    assert!((a - manual).abs() < 1e-12);
}

#[test]
fn perfect_model_has_zero_loss() {
    let t = Trainer::new(config(), train_cfg(1), 3).unwrap();
    let mut model = t.model().clone();
    let out_w = model.parameters().find("output.weight").unwrap();
    let out_b = model.parameters().find("output.bias").unwrap();
    model.parameters_mut().value_mut(out_w).fill(0.0);
    model.parameters_mut().value_mut(out_b).fill(0.0);
    let mut d = data(3, 2);
    for ex in &mut d {
        ex.motion.fill(0.0);
    }
    assert_eq!(evaluate_loss(&model, t.schedule(), LossKind::Mse, &d, 1).unwrap(), 0.0);
}

#[test]
fn one_epoch_logged() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(2, 0);
    let mut t = Trainer::new(config(), train_cfg(1), 0).unwrap();
    let logs = t.fit(&d, &[], Some(dir.path())).unwrap();
    assert_eq!(logs.len(), 1);
    let text = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("epoch,step,train_loss,val_loss,wall_seconds"));
    assert!(dir.path().join("best.ckpt").exists());
    assert!(dir.path().join("last.ckpt").exists());
}

#[test]
fn resume_continues_without_repeating() {
    let d = data(4, 0);
    let v = data(2, 9);
    let mut straight = Trainer::new(config(), train_cfg(3), 5).unwrap();
    straight.fit(&d, &v, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(config(), train_cfg(1), 5).unwrap();
    first.fit(&d, &v, Some(dir.path())).unwrap();
    let ck = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
    let mut resumed = Trainer::resume(&ck, train_cfg(3)).unwrap();
    assert_eq!(resumed.state().step, 4);
    let logs = resumed.fit(&d, &v, Some(dir.path())).unwrap();
    assert_eq!(logs.iter().map(|l| l.epoch).collect::<Vec<_>>(), vec![2, 3]);
    assert_eq!(resumed.state().step, 12);
    assert_eq!(resumed.model().parameters(), straight.model().parameters());
    let text = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn checkpoint_round_trip_after_training() {
    let d = data(3, 0);
    let mut t = Trainer::new(config(), train_cfg(2), 5).unwrap();
    t.fit(&d, &[], None).unwrap();
    let ck = t.checkpoint();
    let bytes = ck.encode();
    assert_eq!(Checkpoint::decode(&bytes).unwrap().encode(), bytes);
    let (lo, hi) = ck.rig_range.clone().unwrap();
    assert!(lo.iter().zip(&hi).all(|(a, b)| a <= b));
}

#[test]
fn bucketed_batches_cover_everything() {
    let d = data(7, 0);
    let mut t = Trainer::new(
        config(),
        TrainConfig {
            batch_size: 3,
            length_bucketing: true,
            ..train_cfg(1)
        },
        0,
    )
    .unwrap();
    let lengths: Vec<usize> = d.iter().map(TrainingExample::n_frames).collect();
    let batches = t.batches(d.len(), &lengths);
    let mut all: Vec<usize> = batches.concat();
    all.sort_unstable();
    assert_eq!(all, (0..7).collect::<Vec<_>>());
    assert_eq!(batches.len(), 3);
    t.run_epoch(&d).unwrap();
    assert_eq!(t.state().step, 3);
}

#[test]
fn mismatched_example_rejected() {
    let mut t = Trainer::new(config(), train_cfg(1), 0).unwrap();
    let mut d = data(1, 0);
    d[0].audio = Mat::zeros((2, 3));
    assert!(matches!(t.train_step(&[&d[0]]), Err(Error::Contract(_))));
}
