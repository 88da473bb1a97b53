//! Noise schedule, forward noising, the clean-motion regression loss and the
//! iterative denoising sampler.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear variance schedule with cumulative products.
///
/// Timesteps are 1-based; `alpha_bar(0) == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from arbitrary betas without checking monotonicity.
    /// Useful for limit cases such as zero noise.
    pub fn from_betas_unchecked(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            Err(Error::Domain(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )))
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    /// Cumulative product of alphas up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.index(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// `beta_t` evenly spaced from `beta_start` to `beta_end` inclusive.
pub fn build_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion.steps must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..steps)
            .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
            .collect()
    };
    Ok(NoiseSchedule::from_betas_unchecked(betas))
}

/// A noised sequence together with the Gaussian draw that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSample {
    pub x_t: Array2<f64>,
    pub t: usize,
    pub eps: Array2<f64>,
}

pub fn standard_normal<R: Rng + ?Sized>(shape: (usize, usize), rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// One forward step: `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn q_sample_step<R: Rng + ?Sized>(
    x_prev: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<DiffusionSample> {
    let beta = sched.beta(t)?;
    let eps = standard_normal(x_prev.dim(), rng);
    let x_t = x_prev * (1.0 - beta).sqrt() + &eps * beta.sqrt();
    Ok(DiffusionSample { x_t, t, eps })
}

/// Jumps straight to level `t`: `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`.
/// `t = 0` returns `x_0` unchanged.
pub fn q_sample_closed_form<R: Rng + ?Sized>(
    x0: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<DiffusionSample> {
    let abar = sched.alpha_bar(t)?;
    let eps = standard_normal(x0.dim(), rng);
    let x_t = noise_with(x0, &eps, abar);
    Ok(DiffusionSample { x_t, t, eps })
}

pub(crate) fn noise_with(x0: &Array2<f64>, eps: &Array2<f64>, abar: f64) -> Array2<f64> {
    x0 * abar.sqrt() + eps * (1.0 - abar).sqrt()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
}

/// Mean squared (or absolute) error between the clean sequence and its prediction.
pub fn training_loss(x0: &Array2<f64>, x_hat: &Array2<f64>, kind: LossKind) -> Result<f64> {
    if x0.dim() != x_hat.dim() {
        return Err(Error::Contract(format!(
            "loss shapes differ: {:?} vs {:?}",
            x0.dim(),
            x_hat.dim()
        )));
    }
    if x0.is_empty() {
        return Err(Error::Contract("loss over an empty matrix".into()));
    }
    let n = x0.len() as f64;
    let sum: f64 = x0
        .iter()
        .zip(x_hat.iter())
        .map(|(a, b)| match kind {
            LossKind::Mse => (a - b) * (a - b),
            LossKind::Mae => (a - b).abs(),
        })
        .sum();
    Ok(sum / n)
}

/// Anything that predicts clean motion from aligned audio features and a noised sequence.
pub trait Denoiser {
    fn output_dim(&self) -> usize;

    fn predict_x0(
        &self,
        audio: &Array2<f64>,
        x_t: &Array2<f64>,
        t: usize,
        style: Option<usize>,
    ) -> Result<Array2<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub motion: Array2<f64>,
    /// Number of model evaluations performed.
    pub evaluations: usize,
    /// Noise level of the last evaluation.
    pub last_t: usize,
}

/// Iterative denoising from pure noise.
///
/// Starting from `x_T ~ N(0, I)`, each iteration predicts `x0_hat` at level
/// `t` and, unless it is the last iteration, re-noises that prediction to
/// level `t - 1` with the closed form. Stops after `steps` evaluations and
/// returns the latest prediction.
pub fn sample_loop<R: Rng + ?Sized, M: Denoiser + ?Sized>(
    audio: &Array2<f64>,
    style: Option<usize>,
    sched: &NoiseSchedule,
    model: &M,
    rng: &mut R,
    steps: usize,
) -> Result<Sampled> {
    let big_t = sched.steps();
    if steps == 0 || steps > big_t {
        return Err(Error::Config(format!("sample steps {steps} outside [1, {big_t}]")));
    }
    let n = audio.nrows();
    let mut x_t = standard_normal((n, model.output_dim()), rng);
    let mut evaluations = 0;
    let mut t = big_t;
    loop {
        let x0_hat = model.predict_x0(audio, &x_t, t, style)?;
        evaluations += 1;
        if x0_hat.dim() != (n, model.output_dim()) {
            return Err(Error::Contract(format!(
                "denoiser returned {:?}, expected {:?}",
                x0_hat.dim(),
                (n, model.output_dim())
            )));
        }
        if let Some(v) = x0_hat.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericDivergence {
                location: format!("sampling step t={t}"),
                detail: format!("model produced {v}"),
            });
        }
        if evaluations == steps || t == 1 {
            return Ok(Sampled {
                motion: x0_hat,
                evaluations,
                last_t: t,
            });
        }
        x_t = q_sample_closed_form(&x0_hat, t - 1, sched, rng)?.x_t;
        t -= 1;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default)]
    pub loss: LossKind,
    /// With diffusion off the decoder sees no noised motion and one pass maps audio to motion.
    #[serde(default = "default_true")]
    pub enabled: bool,
}

fn default_beta_start() -> f64 {
    1e-4
}

fn default_beta_end() -> f64 {
    0.02
}

fn default_true() -> bool {
    true
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            loss: LossKind::Mse,
            enabled: true,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}
