use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use talkdiff::config::RunConfig;
use talkdiff::data::synthetic::{generate_synthetic_dataset, write_synthetic_dataset};
use talkdiff::data::AudioClip;
use talkdiff::runner::{self, AblationAxis, Generator};
use talkdiff::{Error, Result};

#[derive(Parser)]
#[command(name = "talkdiff", version, about = "Speech-driven facial animation with a diffusion decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset the configuration file layers on
    #[arg(long)]
    preset: Option<String>,
    /// Root seed for every random stream
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Override any configuration key, e.g. `--set decoder.hidden_size=64`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(e) = self.epochs {
            o.push(format!("train.epochs={e}"));
        }
        o
    }

    fn resolve(&self) -> Result<RunConfig> {
        if self.config.is_none() && self.preset.is_none() {
            return Err(Error::Argument("pass --config or --preset".into()));
        }
        RunConfig::resolve(self.preset.as_deref(), self.config.as_deref(), &self.overrides())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, a log and the resolved config
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory (defaults to `out_dir` from the config)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from `last.ckpt` in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Generate motion for an audio clip
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 16-bit or float WAV file
        #[arg(long)]
        audio: PathBuf,
        /// Training-subject index, subject name, or `none`
        #[arg(long, default_value = "none")]
        style: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Denoising iterations (defaults to the full schedule)
        #[arg(long)]
        steps: Option<usize>,
        /// Output motion file (defaults to the audio name in the current directory)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep rig values outside the training range
        #[arg(long)]
        no_clamp: bool,
    },
    /// Score predictions against ground truth paired by file name
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Region mask JSON (defaults to every group)
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Train and score a grid of model variants
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Grid to run: steps, decoder, noise-encoder or diffusion (repeatable)
        #[arg(long = "grid", default_value = "steps")]
        grids: Vec<String>,
        /// Settings trained concurrently
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Write the synthetic dataset as WAV, motion files and a manifest
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        sequences: usize,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 30)]
        dims: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_style(raw: &str, gen: &Generator) -> Result<Option<usize>> {
    if raw == "none" {
        return Ok(None);
    }
    if let Ok(i) = raw.parse::<usize>() {
        return Ok(Some(i));
    }
    gen.config
        .style_subjects
        .iter()
        .position(|s| s == raw)
        .map(Some)
        .ok_or_else(|| {
            Error::Argument(format!(
                "unknown style `{raw}`; training subjects are {:?}",
                gen.config.style_subjects
            ))
        })
}

fn train(run: &RunArgs, out: Option<&Path>, resume: bool) -> Result<()> {
    let cfg = run.resolve()?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.clone());
    let outcome = runner::train_run(&cfg, &out, resume)?;
    if let Some(l) = outcome.logs.last() {
        info!(
            "epoch {}: train loss {:.6}, val loss {:.6}",
            l.epoch, l.train_loss, l.val_loss
        );
    }
    println!("{}", outcome.best.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample(
    checkpoint: &Path,
    audio: &Path,
    style: &str,
    seed: u64,
    steps: Option<usize>,
    out: Option<&Path>,
    clamp: bool,
) -> Result<()> {
    let gen = Generator::load(checkpoint)?;
    let style = parse_style(style, &gen)?;
    let clip = AudioClip::load_wav(audio)?;
    let name = audio.file_stem().and_then(|s| s.to_str()).unwrap_or("sample").to_string();
    let (seq, meta) = gen.sample_clip(&clip, &name, style, seed, steps, clamp)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(format!("{name}.{}", runner::motion_extension(seq.kind()))));
    runner::write_sample(&seq, &meta, &path)?;
    info!(
        "{} denoising evaluation(s), last timestep {}",
        meta.evaluations, meta.last_t
    );
    println!("{}", path.display());
    Ok(())
}

fn evaluate(pred: &Path, gt: &Path, mask: Option<&Path>, out: &Path) -> Result<()> {
    let outcome = runner::evaluate_dirs(pred, gt, mask, Some(out))?;
    for s in &outcome.skipped {
        log::warn!("skipped {}: {}", s.name, s.reason);
    }
    print!("{}", outcome.report.scaled_table());
    Ok(())
}

fn ablate(run: &RunArgs, grids: &[String], jobs: usize, out: &Path) -> Result<()> {
    let cfg = run.resolve()?;
    let axes: Vec<AblationAxis> = grids.iter().map(|g| g.parse()).collect::<Result<_>>()?;
    let rows = runner::ablate(&cfg, &run.overrides(), &axes, out, jobs)?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    println!("{}", out.join("ablation.csv").display());
    if failed > 0 {
        log::warn!("{failed} of {} settings failed", rows.len());
    }
    Ok(())
}

fn synth_data(out: &Path, sequences: usize, frames: usize, dims: usize, seed: u64) -> Result<()> {
    let samples = generate_synthetic_dataset(sequences, frames, dims, seed)?;
    write_synthetic_dataset(out, &samples)?;
    println!("{}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, out, resume } => train(&run, out.as_deref(), resume),
        Command::Sample {
            checkpoint,
            audio,
            style,
            seed,
            steps,
            out,
            no_clamp,
        } => sample(&checkpoint, &audio, &style, seed, steps, out.as_deref(), !no_clamp),
        Command::Evaluate { pred, gt, mask, out } => evaluate(&pred, &gt, mask.as_deref(), &out),
        Command::Ablate { run, grids, jobs, out } => ablate(&run, &grids, jobs, &out),
        Command::SynthData {
            out,
            sequences,
            frames,
            dims,
            seed,
        } => synth_data(&out, sequences, frames, dims, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
