//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use talkdiff::config::RunConfig;
use talkdiff::data::{AnimationSequence, MotionKind, RegionMask};
use talkdiff::decoder::{DataKind, DecoderConfig, DecoderVariant, FaceModel, ModelConfig, NoiseEncoderVariant};
use talkdiff::diffusion::{q_sample_closed_form, q_sample_step, DiffusionConfig, LossKind};
use talkdiff::metrics::{diversity, fdd, lve, mean_motion_stats, mve, sequence_metrics};
use talkdiff::nn::Graph;
use talkdiff::runner::{self, AblationAxis, Generator};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Brute-force oracles over plain nested loops.

fn cell(x: &Array2<f64>, n: usize, g: usize, k: usize, c: usize) -> f64 {
    x[[n, g * k + c]]
}

fn dist(a: &Array2<f64>, b: &Array2<f64>, n: usize, g: usize, k: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..k {
        let d = cell(a, n, g, k, c) - cell(b, n, g, k, c);
        s += d * d;
    }
    s.sqrt()
}

fn oracle_max_error(a: &Array2<f64>, b: &Array2<f64>, k: usize, groups: &[usize]) -> f64 {
    let mut total = 0.0;
    for n in 0..a.nrows() {
        let mut worst = 0.0f64;
        for &g in groups {
            worst = worst.max(dist(a, b, n, g, k));
        }
        total += worst;
    }
    total / a.nrows() as f64
}

fn oracle_std(xs: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    for x in xs {
        mean += x;
    }
    mean /= xs.len() as f64;
    let mut var = 0.0;
    for x in xs {
        var += (x - mean) * (x - mean);
    }
    (mean, (var / xs.len() as f64).sqrt())
}

fn oracle_fdd(pred: &Array2<f64>, gt: &Array2<f64>, k: usize, upper: &[usize]) -> f64 {
    let zero = Array2::zeros(pred.dim());
    let mut total = 0.0;
    for &g in upper {
        let mags = |x: &Array2<f64>| (0..x.nrows()).map(|n| dist(x, &zero, n, g, k)).collect::<Vec<_>>();
        total += oracle_std(&mags(gt)).1 - oracle_std(&mags(pred)).1;
    }
    total / upper.len() as f64
}

fn oracle_diversity(xs: &[Array2<f64>], k: usize) -> f64 {
    let groups = xs[0].ncols() / k;
    let mut total = 0.0;
    let mut pairs = 0.0;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let mut d = 0.0;
            for n in 0..xs[0].nrows() {
                for g in 0..groups {
                    d += dist(&xs[i], &xs[j], n, g, k);
                }
            }
            total += d / (xs[0].nrows() * groups) as f64;
            pairs += 1.0;
        }
    }
    total / pairs
}

fn oracle_motion_stats(xs: &[Array2<f64>], k: usize) -> Vec<(f64, f64)> {
    let groups = xs[0].ncols() / k;
    let mut out = Vec::new();
    for g in 0..groups {
        let mut steps = Vec::new();
        for x in xs {
            for n in 1..x.nrows() {
                let mut s = 0.0;
                for c in 0..k {
                    let d = cell(x, n, g, k, c) - cell(x, n - 1, g, k, c);
                    s += d * d;
                }
                steps.push(s.sqrt());
            }
        }
        out.push(oracle_std(&steps));
    }
    out
}

fn random_subset(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
    if s.is_empty() {
        s.push(rng.random_range(0..n));
    }
    s
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let kind = if case % 2 == 0 { MotionKind::VertexDisplacement } else { MotionKind::RigControl };
        let k = kind.group_size();
        let groups = if k == 3 { rng.random_range(1..=6) } else { rng.random_range(1..=10) };
        let n = rng.random_range(2..=8);
        let count = rng.random_range(2..=4);
        let frames: Vec<Array2<f64>> = (0..count)
            .map(|_| Array2::from_shape_simple_fn((n, groups * k), || StandardNormal.sample(&mut rng)))
            .collect();
        let seqs: Vec<AnimationSequence> = frames
            .iter()
            .map(|f| AnimationSequence::new(f.clone(), kind, 30.0, "s", "x").unwrap())
            .collect();
        let mask = RegionMask::new(random_subset(&mut rng, groups), random_subset(&mut rng, groups));
        let (p, g) = (&seqs[0], &seqs[1]);
        let all: Vec<usize> = (0..groups).collect();
        let pairs = [
            (mve(p, g).unwrap(), oracle_max_error(&frames[0], &frames[1], k, &all)),
            (lve(p, g, &mask).unwrap(), oracle_max_error(&frames[0], &frames[1], k, &mask.lip_indices)),
            (fdd(p, g, &mask).unwrap(), oracle_fdd(&frames[0], &frames[1], k, &mask.upper_face_indices)),
            (diversity(&seqs).unwrap(), oracle_diversity(&frames, k)),
        ];
        for (a, b) in pairs {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in mean_motion_stats(&seqs).unwrap().into_iter().zip(oracle_motion_stats(&frames, k)) {
            worst = worst.max((a.0 - b.0).abs()).max((a.1 - b.1).abs());
        }
    }
    let t = start.elapsed();
    check(
        worst <= 1e-9 && t.as_secs_f64() < 10.0,
        format!("50 instances, max |diff| {worst:.2e}, {:.2}s", t.as_secs_f64()),
    )
}

fn diversity_hand_case() -> Outcome {
    let seqs: Vec<AnimationSequence> = [0.0, 1.0, 2.0]
        .iter()
        .map(|&x| AnimationSequence::new(Array2::from_shape_vec((1, 3), vec![x, 0.0, 0.0]).unwrap(), MotionKind::VertexDisplacement, 30.0, "s", "x").unwrap())
        .collect();
    let d = diversity(&seqs).unwrap();
    check(d == 4.0 / 3.0, format!("diversity {d}"))
}

fn diffusion_statistics() -> Outcome {
    let start = Instant::now();
    let sched = DiffusionConfig::default().schedule().unwrap();
    let big_t = sched.steps();
    let samples = 10_000;
    let values = [-1.5, -0.2, 0.0, 0.8, 2.0];
    let x0 = Array2::from_shape_fn((samples, values.len()), |(_, j)| values[j]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut notes = Vec::new();
    let mut ok = true;
    for t in [1, big_t / 2, big_t] {
        let abar = sched.alpha_bar(t).unwrap();
        let x_t = q_sample_closed_form(&x0, t, &sched, &mut rng).unwrap().x_t;
        let mut worst_se: f64 = 0.0;
        let mut worst_var: f64 = 0.0;
        for (j, &v) in values.iter().enumerate() {
            let col: Vec<f64> = x_t.column(j).to_vec();
            let mean = col.iter().sum::<f64>() / samples as f64;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
            let se = ((1.0 - abar) / samples as f64).sqrt();
            worst_se = worst_se.max((mean - abar.sqrt() * v).abs() / se);
            worst_var = worst_var.max((var / (1.0 - abar) - 1.0).abs());
        }
        ok &= worst_se <= 3.0 && worst_var <= 0.05;
        notes.push(format!("t={t}: {worst_se:.2} SE, var {:.2}%", 100.0 * worst_var));
    }

    // iterated single steps against the closed form at t = 50, pooled over identical cells
    let t = 50;
    let x0 = Array2::from_elem((samples, 32), 0.7);
    let mut x = x0.clone();
    for s in 1..=t {
        x = q_sample_step(&x, s, &sched, &mut rng).unwrap().x_t;
    }
    let closed = q_sample_closed_form(&x0, t, &sched, &mut rng).unwrap().x_t;
    let stats = |m: &Array2<f64>| {
        let n = m.len() as f64;
        let mean = m.sum() / n;
        (mean, m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0))
    };
    let (mi, vi) = stats(&x);
    let (mc, vc) = stats(&closed);
    let dm = (mi - mc).abs() / mc.abs();
    let dv = (vi - vc).abs() / vc;
    ok &= dm <= 0.02 && dv <= 0.02;
    notes.push(format!("iterated vs closed at t=50: mean {:.2}%, var {:.2}%", 100.0 * dm, 100.0 * dv));
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 60.0;
    notes.push(format!("{secs:.1}s"));
    check(ok, notes.join("; "))
}

fn tiny_config(kind: DataKind, variant: DecoderVariant, noise: NoiseEncoderVariant, dropout: f64) -> ModelConfig {
    ModelConfig {
        decoder: DecoderConfig {
            kind,
            input_embedding_dim: if kind == DataKind::Vertex { 4 } else { 0 },
            gru_layers: 2,
            hidden_size: 4,
            dropout,
            decoder_variant: variant,
            noise_encoder_variant: noise,
            timestep_dim: 6,
            num_styles: 2,
            style_every_layer: true,
            attention_heads: 2,
        },
        audio_dim: 3,
        output_dim: if kind == DataKind::Vertex { 6 } else { 4 },
        diffusion_enabled: true,
    }
}

fn randn(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Worst relative error between tape and central-difference gradients.
/// Training mode replays the same dropout masks by reseeding per evaluation.
fn gradient_error(c: &ModelConfig, train: bool) -> f64 {
    let mut m = FaceModel::new(c.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let audio = randn((3, c.audio_dim), &mut rng);
    let x_t = randn((3, c.output_dim), &mut rng);
    let x0 = randn((3, c.output_dim), &mut rng);
    let eval = |m: &FaceModel| {
        let mut g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let rng = train.then_some(&mut r as &mut dyn RngCore);
        let l = m.loss(&mut g, &audio, &x_t, 9, Some(1), &x0, LossKind::Mse, rng).unwrap();
        (g, l)
    };
    let (g, l) = eval(&m);
    let grads = g.backward(l, m.parameters().len());
    let h = 1e-5;
    let mut worst = 0.0f64;
    let ids: Vec<_> = m.parameters().ids().collect();
    for id in ids {
        let (rows, cols) = m.parameters().value(id).dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = m.parameters().value(id)[[i, j]];
                let mut at = |v: f64| {
                    m.parameters_mut().value_mut(id)[[i, j]] = v;
                    let (g, l) = eval(&m);
                    g.scalar(l)
                };
                let numeric = (at(orig + h) - at(orig - h)) / (2.0 * h);
                m.parameters_mut().value_mut(id)[[i, j]] = orig;
                let analytic = grads.get(id).map_or(0.0, |g| g[[i, j]]);
                let denom = numeric.abs().max(analytic.abs()).max(1e-4);
                worst = worst.max((numeric - analytic).abs() / denom);
            }
        }
    }
    worst
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut name = String::new();
    let mut count = 0;
    for &v in DecoderVariant::ALL {
        let mut configs = vec![tiny_config(DataKind::Rig, v, NoiseEncoderVariant::None, 0.0)];
        for &n in NoiseEncoderVariant::ALL.iter().filter(|n| **n != NoiseEncoderVariant::None) {
            configs.push(tiny_config(DataKind::Vertex, v, n, 0.0));
        }
        configs.push(tiny_config(DataKind::Rig, v, NoiseEncoderVariant::None, 0.25));
        for c in &configs {
            for train in [false, true] {
                let e = gradient_error(c, train);
                count += 1;
                if e > worst {
                    worst = e;
                    name = format!("{}/{}", c.decoder.decoder_variant, c.decoder.noise_encoder_variant);
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 120.0,
        format!("{count} configurations, worst relative error {worst:.2e} ({name}), {secs:.1}s"),
    )
}

struct Overfit {
    generator: Generator,
    prepared: runner::Prepared,
}

fn overfit(dir: &Path) -> (Outcome, Option<Overfit>) {
    let start = Instant::now();
    let cfg = RunConfig::preset("synthetic").unwrap();
    let outcome = match runner::train_run(&cfg, dir, false) {
        Ok(o) => o,
        Err(e) => return (Err(format!("training failed: {e}")), None),
    };
    let first = outcome.logs.first().unwrap().train_loss;
    let last = outcome.logs.last().unwrap().train_loss;
    let ck_cfg = runner::checkpoint_config(&cfg, &outcome.prepared);
    let range = talkdiff::checkpoint::Checkpoint::load(&outcome.last).unwrap().rig_range;
    let generator = Generator::with_model(ck_cfg, outcome.model, range).unwrap();
    let prepared = outcome.prepared;
    let mut lbe = 0.0;
    for item in &prepared.test {
        let (m, meta) = generator.sample_features(&item.features, item.style, 1, None, true).unwrap();
        assert_eq!(meta.evaluations, cfg.diffusion.steps);
        let pred = AnimationSequence::new(m, MotionKind::RigControl, prepared.fps, "p", "p").unwrap();
        lbe += sequence_metrics(&item.id, &pred, &item.motion, &prepared.mask).unwrap().lve;
    }
    lbe /= prepared.test.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    let ratio = last / first;
    let result = check(
        ratio < 0.1 && lbe < 0.1 && secs < 300.0,
        format!(
            "{} epochs, loss {first:.4} -> {last:.5} ({:.1}%), LBE {lbe:.4} after {} steps, {secs:.1}s",
            outcome.logs.len(),
            100.0 * ratio,
            cfg.diffusion.steps
        ),
    );
    (result, Some(Overfit { generator, prepared }))
}

fn mean_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(f64::abs).mean().unwrap()
}

fn seeds_and_styles(o: &Overfit) -> Outcome {
    let item = &o.prepared.test[0];
    let samples: Vec<Array2<f64>> = (0..5)
        .map(|s| o.generator.sample_features(&item.features, item.style, 100 + s, None, true).unwrap().0)
        .collect();
    let mut min_pair = f64::INFINITY;
    for i in 0..5 {
        for j in i + 1..5 {
            min_pair = min_pair.min(mean_abs_diff(&samples[i], &samples[j]));
        }
    }
    let styles = o.generator.config.model.decoder.num_styles;
    let per_style: Vec<Array2<f64>> = (0..styles)
        .map(|s| o.generator.sample_features(&item.features, Some(s), 100, None, true).unwrap().0)
        .collect();
    let style_gap = mean_abs_diff(&per_style[0], &per_style[1]);
    check(
        min_pair > 0.0 && styles >= 2 && style_gap > 0.0,
        format!("smallest seed-pair difference {min_pair:.3e}; {styles} styles differ by {style_gap:.3e}"),
    )
}

fn determinism(o: &Overfit, dir: &Path) -> Outcome {
    let item = &o.prepared.test[0];
    let write = |name: &str| {
        let (seq, meta) = o.generator.sample_clip(&item.audio, "clip", item.style, 42, None, true).unwrap();
        let p = dir.join(name);
        runner::write_sample(&seq, &meta, &p).unwrap();
        std::fs::read(p).unwrap()
    };
    let sample_same = write("a.csv") == write("b.csv");

    // two fresh short training runs with the same seed and config
    let mut cfg = RunConfig::preset("synthetic").unwrap();
    cfg.train.epochs = 3;
    let ckpts: Vec<Vec<u8>> = ["r1", "r2"]
        .iter()
        .map(|r| {
            let out = runner::train_run(&cfg, &dir.join(r), false).unwrap();
            std::fs::read(out.last).unwrap()
        })
        .collect();
    let gens: Vec<Vec<u8>> = ["r1", "r2"]
        .iter()
        .map(|r| {
            let g = Generator::load(&dir.join(r).join("last.ckpt")).unwrap();
            let (seq, meta) = g.sample_clip(&item.audio, "clip", Some(0), 9, None, true).unwrap();
            let p = dir.join(format!("{r}.csv"));
            runner::write_sample(&seq, &meta, &p).unwrap();
            std::fs::read(p).unwrap()
        })
        .collect();
    check(
        sample_same && ckpts[0] == ckpts[1] && gens[0] == gens[1],
        format!(
            "resampling identical: {sample_same}; retrained checkpoints identical: {}; their samples identical: {}",
            ckpts[0] == ckpts[1],
            gens[0] == gens[1]
        ),
    )
}

fn ablation_steps(dir: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::preset("synthetic").unwrap();
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get()).min(5);
    let rows = match runner::ablate(&cfg, &[], &[AblationAxis::Steps], dir, jobs) {
        Ok(r) => r,
        Err(e) => return Err(format!("ablation failed: {e}")),
    };
    let header = std::fs::read_to_string(dir.join("ablation.csv"))
        .unwrap()
        .lines()
        .next()
        .unwrap_or_default()
        .to_string();
    let settings: Vec<&str> = rows.iter().map(|r| r.setting.as_str()).collect();
    let ok_rows = rows.iter().filter(|r| r.status == "ok").count();
    let columns = ["mve", "lve", "fdd", "diversity"].iter().all(|c| header.split(',').any(|h| h == *c));
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "settings {settings:?}, {ok_rows}/{} ok, columns [{header}], {jobs} jobs, {secs:.1}s",
        rows.len()
    );
    let lbe: Vec<String> = rows.iter().map(|r| format!("{}:{:.4}", r.setting, r.lve.unwrap_or(f64::NAN))).collect();
    check(
        settings == ["100", "250", "500", "750", "1000"] && ok_rows == 5 && columns && secs < 1800.0,
        format!("{detail}; LBE {}", lbe.join(" ")),
    )
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let tmp = tempfile::tempdir().unwrap();
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| {
        match &outcome {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}");
            }
        }
    };
    let wanted = |name: &str| filter.as_deref().is_none_or(|f| name.contains(f));

    if wanted("metric-oracles") {
        report("metric-oracles", metric_oracles());
    }
    if wanted("diversity-hand-case") {
        report("diversity-hand-case", diversity_hand_case());
    }
    if wanted("diffusion-statistics") {
        report("diffusion-statistics", diffusion_statistics());
    }
    if wanted("gradient-check") {
        report("gradient-check", gradient_check());
    }
    if wanted("overfit") || wanted("seed-and-style-diversity") || wanted("determinism") {
        let (outcome, trained) = overfit(&tmp.path().join("overfit"));
        report("overfit", outcome);
        match trained {
            Some(o) => {
                report("seed-and-style-diversity", seeds_and_styles(&o));
                report("determinism", determinism(&o, tmp.path()));
            }
            None => {
                report("seed-and-style-diversity", Err("no trained model".into()));
                report("determinism", Err("no trained model".into()));
            }
        }
    }
    if wanted("ablation-steps") {
        report("ablation-steps", ablation_steps(&tmp.path().join("ablation")));
    }
    println!(
        "SKIP  published-benchmark-numbers: needs the licensed vertex dataset, pretrained speech-encoder weights and GPU-scale training"
    );
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
