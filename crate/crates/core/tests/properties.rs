use std::cell::Cell;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use talkdiff::config::RunConfig;
use talkdiff::data::{AnimationSequence, MotionKind, RegionMask};
use talkdiff::decoder::{timestep_embedding, DataKind, DecoderConfig, DecoderVariant, FaceModel, ModelConfig, NoiseEncoderVariant};
use talkdiff::diffusion::{build_linear_schedule, sample_loop, training_loss, Denoiser, LossKind};
use talkdiff::metrics::{diversity, fdd, lve, mve};
use talkdiff::runner;
use talkdiff::trainer::Trainer;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

/// Kind, frame count and two sequences of the same shape.
fn pair() -> impl Strategy<Value = (AnimationSequence, AnimationSequence)> {
    (prop::bool::ANY, 2usize..7, 1usize..5).prop_flat_map(|(vertex, n, groups)| {
        let (kind, cols) = if vertex { (MotionKind::VertexDisplacement, groups * 3) } else { (MotionKind::RigControl, groups) };
        (matrix(n, cols), matrix(n, cols)).prop_map(move |(a, b)| {
            (
                AnimationSequence::new(a, kind, 30.0, "s", "a").unwrap(),
                AnimationSequence::new(b, kind, 30.0, "s", "b").unwrap(),
            )
        })
    })
}

fn seq(m: Array2<f64>) -> AnimationSequence {
    AnimationSequence::new(m, MotionKind::RigControl, 30.0, "s", "x").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mve_is_symmetric((a, b) in pair()) {
        prop_assert_eq!(mve(&a, &b).unwrap(), mve(&b, &a).unwrap());
    }

    #[test]
    fn lve_on_full_mask_is_mve((a, b) in pair()) {
        let mask = RegionMask::full(a.n_groups());
        prop_assert_eq!(lve(&a, &b, &mask).unwrap(), mve(&a, &b).unwrap());
    }

    #[test]
    fn fdd_is_antisymmetric((a, b) in pair()) {
        let mask = RegionMask::full(a.n_groups());
        prop_assert!((fdd(&a, &b, &mask).unwrap() + fdd(&b, &a, &mask).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn diversity_ignores_order_and_scales((a, b) in pair(), k in 0.1f64..4.0) {
        let c = AnimationSequence::new(a.frames() * 0.5 - b.frames(), a.kind(), 30.0, "s", "c").unwrap();
        let forward = diversity(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let backward = diversity(&[c.clone(), a.clone(), b.clone()]).unwrap();
        prop_assert!((forward - backward).abs() < 1e-12);
        let scaled: Vec<AnimationSequence> = [&a, &b, &c]
            .iter()
            .map(|s| AnimationSequence::new(s.frames() * k, s.kind(), 30.0, "s", "x").unwrap())
            .collect();
        prop_assert!((diversity(&scaled).unwrap() - k * forward).abs() < 1e-9 * (1.0 + forward));
    }

    #[test]
    fn diversity_outlier_decreases_with_copies(base in matrix(3, 2), shift in 0.1f64..2.0, copies in 2usize..6) {
        let with = |k: usize| {
            let mut v: Vec<AnimationSequence> = (0..k).map(|_| seq(base.clone())).collect();
            v.push(seq(&base + shift));
            diversity(&v).unwrap()
        };
        let (few, more) = (with(copies), with(copies + 1));
        prop_assert!(few > 0.0 && more > 0.0 && more < few);
    }

    #[test]
    fn loss_is_permutation_invariant(a in matrix(3, 4), b in matrix(3, 4), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..12).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let p = |m: &Array2<f64>| {
            let v: Vec<f64> = m.iter().copied().collect();
            Array2::from_shape_fn((3, 4), |(i, j)| v[perm[i * 4 + j]])
        };
        for kind in [LossKind::Mse, LossKind::Mae] {
            let l1 = training_loss(&a, &b, kind).unwrap();
            let l2 = training_loss(&p(&a), &p(&b), kind).unwrap();
            prop_assert!((l1 - l2).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_evaluates_exactly_steps(big_t in 1usize..60, frac in 0.0f64..1.0, seed in any::<u64>()) {
        struct Counter(Cell<usize>);
        impl Denoiser for Counter {
            fn output_dim(&self) -> usize { 2 }
            fn predict_x0(&self, _: &Array2<f64>, x_t: &Array2<f64>, _: usize, _: Option<usize>) -> talkdiff::Result<Array2<f64>> {
                self.0.set(self.0.get() + 1);
                Ok(x_t * 0.9)
            }
        }
        let steps = 1 + ((big_t - 1) as f64 * frac) as usize;
        let sched = build_linear_schedule(big_t, 1e-4, 0.02).unwrap();
        let m = Counter(Cell::new(0));
        let out = sample_loop(&Array2::zeros((3, 1)), None, &sched, &m, &mut ChaCha8Rng::seed_from_u64(seed), steps).unwrap();
        prop_assert_eq!(m.0.get(), steps);
        prop_assert_eq!(out.evaluations, steps);
        prop_assert_eq!(out.last_t, big_t - steps + 1);
    }

    #[test]
    fn timestep_embedding_is_injective(a in 0usize..2000, b in 0usize..2000) {
        prop_assume!(a != b);
        prop_assert_ne!(timestep_embedding(a, 128), timestep_embedding(b, 128));
    }
}

fn model_config(kind: DataKind, variant: DecoderVariant, noise: NoiseEncoderVariant) -> ModelConfig {
    ModelConfig {
        decoder: DecoderConfig {
            kind,
            input_embedding_dim: if kind == DataKind::Vertex { 4 } else { 0 },
            gru_layers: 2,
            hidden_size: 8,
            dropout: 0.0,
            decoder_variant: variant,
            noise_encoder_variant: noise,
            timestep_dim: 8,
            num_styles: 2,
            style_every_layer: false,
            attention_heads: 2,
        },
        audio_dim: 5,
        output_dim: if kind == DataKind::Vertex { 6 } else { 4 },
        diffusion_enabled: true,
    }
}

fn every_config() -> Vec<ModelConfig> {
    DecoderVariant::ALL
        .iter()
        .flat_map(|&v| {
            NoiseEncoderVariant::ALL.iter().map(move |&n| {
                let kind = if n == NoiseEncoderVariant::None { DataKind::Rig } else { DataKind::Vertex };
                model_config(kind, v, n)
            })
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn every_variant_is_shape_total_and_bit_stable(n in 1usize..9, t in 1usize..500, style in prop::option::of(0usize..2), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in every_config() {
            let m = FaceModel::new(c.clone(), seed).unwrap();
            let audio = talkdiff::diffusion::standard_normal((n, c.audio_dim), &mut rng);
            let x_t = talkdiff::diffusion::standard_normal((n, c.output_dim), &mut rng);
            let a = m.predict_x0(&audio, &x_t, t, style).unwrap();
            let b = m.predict_x0(&audio, &x_t, t, style).unwrap();
            prop_assert_eq!(a.dim(), (n, c.output_dim));
            prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

#[test]
fn synthetic_training_loss_finite_for_1000_steps() {
    let cfg = RunConfig::preset("synthetic").unwrap();
    let prepared = runner::prepare(&cfg).unwrap();
    let mut trainer = Trainer::new(runner::checkpoint_config(&cfg, &prepared), cfg.train.clone(), 0).unwrap();
    let per_epoch = prepared.train.len() as u64;
    let mut steps = 0u64;
    while steps < 1000 {
        for ex in &prepared.train {
            let loss = trainer.train_step(&[ex]).unwrap();
            assert!(loss.is_finite(), "step {steps}: {loss}");
            steps += 1;
        }
    }
    assert_eq!(trainer.state().step, steps);
    assert!(steps >= 1000 && steps < 1000 + per_epoch);
}
