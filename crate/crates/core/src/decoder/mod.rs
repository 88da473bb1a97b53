//! The facial decoder: maps aligned audio features, a noised motion sequence,
//! the diffusion timestep and an optional subject style to a prediction of
//! the clean motion.
//!
//! Data flow per call:
//!
//! ```text
//! x_t --noise encoder--> latent (N x E)     (vertex data; rig data passes x_t through)
//! [audio | latent | sinusoid(t)] --> fused (N x W)
//! fused --GRU / RNN / transformer--> hidden (N x H) --(* style row)--> linear --> x0_hat (N x D)
//! ```

mod noise;
mod recurrent;
mod transformer;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MotionKind;
use crate::diffusion::{Denoiser, LossKind};
use crate::error::{Error, Result};
use crate::nn::layers::dropout_mask;
use crate::nn::{sinusoidal_encoding, Graph, Init, Linear, Mat, ParamId, ParamStore, Var};

use noise::NoiseEncoder;
use recurrent::RecurrentLayer;
use transformer::TransformerCore;

pub const DEFAULT_TIMESTEP_DIM: usize = 128;

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

named_enum!(
    /// Sequence model used inside the decoder.
    DecoderVariant {
        Gru => "gru",
        Rnn => "rnn",
        TransformerTf => "transformer-tf",
        TransformerAr => "transformer-ar",
    }
);

named_enum!(
    /// Projection of noised vertex motion to the latent width.
    NoiseEncoderVariant {
        Mlp => "mlp",
        ConvMax => "conv-max",
        ConvAvg => "conv-avg",
        ConvMaxX3 => "conv-max-x3",
        ConvAvgX3 => "conv-avg-x3",
        None => "none",
    }
);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Vertex,
    Rig,
}

impl From<DataKind> for MotionKind {
    fn from(k: DataKind) -> Self {
        match k {
            DataKind::Vertex => MotionKind::VertexDisplacement,
            DataKind::Rig => MotionKind::RigControl,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub kind: DataKind,
    /// Latent width of the noise encoder (vertex data only).
    #[serde(default)]
    pub input_embedding_dim: usize,
    pub gru_layers: usize,
    pub hidden_size: usize,
    pub dropout: f64,
    pub decoder_variant: DecoderVariant,
    pub noise_encoder_variant: NoiseEncoderVariant,
    #[serde(default = "default_timestep_dim")]
    pub timestep_dim: usize,
    /// Number of training subjects for the one-hot style; 0 disables styles.
    #[serde(default)]
    pub num_styles: usize,
    /// Modulate after every recurrent layer instead of only the last.
    #[serde(default)]
    pub style_every_layer: bool,
    #[serde(default = "default_heads")]
    pub attention_heads: usize,
}

fn default_timestep_dim() -> usize {
    DEFAULT_TIMESTEP_DIM
}

fn default_heads() -> usize {
    4
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("decoder.dropout {} outside [0, 1)", self.dropout)));
        }
        if self.gru_layers == 0 || self.hidden_size == 0 {
            return Err(Error::Config("decoder needs at least one layer and a positive hidden size".into()));
        }
        if self.timestep_dim == 0 {
            return Err(Error::Config("decoder.timestep_dim must be positive".into()));
        }
        match (self.kind, self.noise_encoder_variant) {
            (DataKind::Vertex, NoiseEncoderVariant::None) => {
                return Err(Error::Config("vertex data needs a noise encoder".into()))
            }
            (DataKind::Rig, v) if v != NoiseEncoderVariant::None => {
                return Err(Error::Config(format!(
                    "rig data uses no noise encoder, got `{v}`"
                )))
            }
            (DataKind::Vertex, _) if self.input_embedding_dim == 0 => {
                return Err(Error::Config("decoder.input_embedding_dim must be positive for vertex data".into()))
            }
            _ => {}
        }
        if matches!(self.decoder_variant, DecoderVariant::TransformerTf | DecoderVariant::TransformerAr)
            && (self.attention_heads == 0 || !self.hidden_size.is_multiple_of(self.attention_heads))
        {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} attention heads",
                self.hidden_size, self.attention_heads
            )));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model: decoder settings plus data widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub audio_dim: usize,
    pub output_dim: usize,
    pub diffusion_enabled: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if self.audio_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("audio and output widths must be positive".into()));
        }
        if self.decoder.kind == DataKind::Vertex && !self.output_dim.is_multiple_of(3) {
            return Err(Error::Config(format!(
                "vertex output width {} is not a multiple of 3",
                self.output_dim
            )));
        }
        Ok(())
    }

    /// Width of the per-frame noise representation fed to fusion.
    pub fn noise_width(&self) -> usize {
        match self.decoder.kind {
            DataKind::Vertex => self.decoder.input_embedding_dim,
            DataKind::Rig => self.output_dim,
        }
    }

    pub fn fused_width(&self) -> usize {
        self.audio_dim + self.noise_width() + self.decoder.timestep_dim
    }
}

/// One-hot subject vector with the learned embedding table it selects from.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCondition {
    onehot: Vec<f64>,
    embedding_table: Array2<f64>,
}

impl StyleCondition {
    pub fn new(onehot: Vec<f64>, embedding_table: Array2<f64>) -> Result<Self> {
        let active: Vec<usize> = onehot
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        if active.len() != 1 || onehot[active[0]] != 1.0 {
            return Err(Error::Contract("style one-hot must have exactly one entry equal to 1".into()));
        }
        if embedding_table.nrows() != onehot.len() {
            return Err(Error::Contract(format!(
                "one-hot of length {} for an embedding table with {} rows",
                onehot.len(),
                embedding_table.nrows()
            )));
        }
        Ok(Self {
            onehot,
            embedding_table,
        })
    }

    pub fn from_index(index: usize, embedding_table: Array2<f64>) -> Result<Self> {
        let mut onehot = vec![0.0; embedding_table.nrows()];
        *onehot
            .get_mut(index)
            .ok_or_else(|| Error::Argument(format!("style {index} out of range")))? = 1.0;
        Self::new(onehot, embedding_table)
    }

    pub fn index(&self) -> usize {
        self.onehot.iter().position(|&v| v == 1.0).expect("validated one-hot")
    }

    pub fn embedding(&self) -> ndarray::ArrayView1<'_, f64> {
        self.embedding_table.row(self.index())
    }
}

/// Multiplies every hidden row elementwise by the selected style embedding.
pub fn apply_style(hidden: &Array2<f64>, style: &StyleCondition) -> Result<Array2<f64>> {
    let row = style.embedding();
    if row.len() != hidden.ncols() {
        return Err(Error::Contract(format!(
            "style width {} does not match hidden width {}",
            row.len(),
            hidden.ncols()
        )));
    }
    Ok(hidden * &row)
}

/// Sinusoidal timestep embedding as one row.
pub fn timestep_embedding(t: usize, dim: usize) -> Array2<f64> {
    sinusoidal_encoding(t as f64, dim)
}

/// Per-frame concatenation `[audio | noise | t_emb]` with `t_emb` broadcast to every frame.
pub fn fuse_inputs(audio: &Array2<f64>, noise: &Array2<f64>, t_emb: &Array2<f64>) -> Result<Array2<f64>> {
    if audio.nrows() != noise.nrows() {
        return Err(Error::Contract(format!(
            "audio has {} frames but the noise input has {}",
            audio.nrows(),
            noise.nrows()
        )));
    }
    if t_emb.nrows() != 1 {
        return Err(Error::Contract("timestep embedding must be a single row".into()));
    }
    let n = audio.nrows();
    let t = t_emb.broadcast((n, t_emb.ncols())).expect("single-row broadcast");
    Ok(ndarray::concatenate(Axis(1), &[audio.view(), noise.view(), t]).expect("equal row counts"))
}

/// Dropout applied during training only.
pub(crate) struct Dropout<'a> {
    p: f64,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Dropout<'a> {
    pub(crate) fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub(crate) fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => {
                let mask = dropout_mask(g.dim(x), self.p, rng);
                g.mul_const(x, mask)
            }
            _ => x,
        }
    }
}

/// How a forward pass is run.
pub enum Mode<'a> {
    /// Dropout off; transformer variants decode autoregressively.
    Eval,
    /// Dropout on (drawn from `rng`). `target` is the clean sequence, used
    /// as the previous-frame input by the teacher-forced transformer.
    Train {
        rng: &'a mut dyn RngCore,
        target: &'a Mat,
    },
}

#[derive(Clone, Debug)]
enum Core {
    Recurrent(Vec<RecurrentLayer>),
    Transformer(TransformerCore),
}

/// The trainable decoder with its parameters.
#[derive(Clone, Debug)]
pub struct FaceModel {
    cfg: ModelConfig,
    store: ParamStore,
    noise: Option<NoiseEncoder>,
    core: Core,
    style: Option<ParamId>,
    output: Linear,
}

/// Builds the configured decoder variant with freshly initialised parameters.
pub fn build_decoder_variant(cfg: &ModelConfig, seed: u64) -> Result<FaceModel> {
    FaceModel::new(cfg.clone(), seed)
}

fn check_finite(g: &Graph, v: Var, location: &str) -> Result<()> {
    match g.value(v).iter().find(|x| !x.is_finite()) {
        Some(x) => Err(Error::NumericDivergence {
            location: location.to_string(),
            detail: format!("non-finite activation {x}"),
        }),
        None => Ok(()),
    }
}

impl FaceModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dc = &cfg.decoder;
        let noise = NoiseEncoder::build(
            dc.noise_encoder_variant,
            cfg.output_dim,
            dc.input_embedding_dim,
            &mut store,
            &mut rng,
        );
        let fused = cfg.fused_width();
        let h = dc.hidden_size;
        let core = match dc.decoder_variant {
            DecoderVariant::Gru | DecoderVariant::Rnn => Core::Recurrent(
                (0..dc.gru_layers)
                    .map(|l| {
                        let fan_in = if l == 0 { fused } else { h };
                        let name = format!("decoder.{}{l}", dc.decoder_variant);
                        if dc.decoder_variant == DecoderVariant::Gru {
                            RecurrentLayer::gru(&mut store, &name, fan_in, h, &mut rng)
                        } else {
                            RecurrentLayer::rnn(&mut store, &name, fan_in, h, &mut rng)
                        }
                    })
                    .collect(),
            ),
            DecoderVariant::TransformerTf | DecoderVariant::TransformerAr => Core::Transformer(
                TransformerCore::new(&mut store, fused, cfg.output_dim, h, dc.gru_layers, dc.attention_heads, &mut rng),
            ),
        };
        let style = (dc.num_styles > 0).then(|| {
            store.add("style.embedding", (dc.num_styles, h), Init::FanIn(dc.num_styles), &mut rng)
        });
        let output = Linear::new(&mut store, "output", h, cfg.output_dim, &mut rng);
        Ok(Self {
            cfg,
            store,
            noise,
            core,
            style,
            output,
        })
    }

    /// Rebuilds a model around stored parameters; names and shapes must match.
    pub fn from_parameters(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        if params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                params.len()
            )));
        }
        for ((_, n1, v1), (_, n2, v2)) in model.store.iter().zip(params.iter()) {
            if n1 != n2 || v1.dim() != v2.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {n1} {:?}, found {n2} {:?}",
                    v1.dim(),
                    v2.dim()
                )));
            }
        }
        model.store = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn parameters(&self) -> &ParamStore {
        &self.store
    }

    pub fn parameters_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_styles(&self) -> usize {
        self.cfg.decoder.num_styles
    }

    /// The learned style table, if styles are enabled.
    pub fn style_table(&self) -> Option<&Mat> {
        self.style.map(|id| self.store.value(id))
    }

    /// Projects noised vertex motion to the latent width. Rig models have no
    /// noise encoder and pass `x_t` straight to fusion.
    pub fn encode_noise(&self, x_t: &Mat) -> Result<Mat> {
        let enc = self.noise.as_ref().ok_or_else(|| {
            Error::Contract("rig-control models pass x_t through unchanged; there is no noise encoder".into())
        })?;
        if x_t.ncols() != self.cfg.output_dim {
            return Err(Error::Contract(format!(
                "noised motion has {} columns, model expects {}",
                x_t.ncols(),
                self.cfg.output_dim
            )));
        }
        let mut g = Graph::new();
        let x = g.input(x_t.clone());
        let out = enc.forward(&mut g, &self.store, x);
        Ok(g.value(out).clone())
    }

    fn style_row(&self, g: &mut Graph, style: Option<usize>) -> Result<Option<Var>> {
        let Some(s) = style else { return Ok(None) };
        let id = self.style.ok_or_else(|| Error::Argument("this model was trained without styles".into()))?;
        if s >= self.cfg.decoder.num_styles {
            return Err(Error::Argument(format!(
                "style {s} out of range for {} training subjects",
                self.cfg.decoder.num_styles
            )));
        }
        let mut onehot = Mat::zeros((1, self.cfg.decoder.num_styles));
        onehot[[0, s]] = 1.0;
        let oh = g.input(onehot);
        let table = g.param(&self.store, id);
        Ok(Some(g.matmul(oh, table)))
    }

    /// Runs the sequence model, style modulation and output projection on a fused input.
    fn decode(
        &self,
        g: &mut Graph,
        fused: Var,
        style: Option<usize>,
        teacher: Option<&Mat>,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let style_row = self.style_row(g, style)?;
        let every = self.cfg.decoder.style_every_layer;
        let out = match &self.core {
            Core::Recurrent(layers) => {
                let mut h = fused;
                let last = layers.len() - 1;
                for (l, layer) in layers.iter().enumerate() {
                    h = layer.forward(g, &self.store, h);
                    check_finite(g, h, &format!("decoder layer {}.{l}", self.cfg.decoder.decoder_variant))?;
                    if let (Some(s), true) = (style_row, every || l == last) {
                        h = g.mul_row(h, s);
                    }
                    if l < last {
                        h = dropout.apply(g, h);
                    }
                }
                self.output.forward(g, &self.store, h)
            }
            Core::Transformer(core) => {
                let output = self.output;
                let store = &self.store;
                let mut head = |g: &mut Graph, h: Var| {
                    let h = match style_row {
                        Some(s) => g.mul_row(h, s),
                        None => h,
                    };
                    output.forward(g, store, h)
                };
                core.forward(g, store, fused, teacher, dropout, &mut head)
            }
        };
        check_finite(g, out, "output projection")?;
        Ok(out)
    }

    /// Decodes an already fused `N x W` input in evaluation mode.
    pub fn decode_sequence(&self, fused: &Mat, style: Option<usize>) -> Result<Mat> {
        if fused.ncols() != self.cfg.fused_width() {
            return Err(Error::Contract(format!(
                "fused width {} does not match the configured {}",
                fused.ncols(),
                self.cfg.fused_width()
            )));
        }
        let mut g = Graph::new();
        let f = g.input(fused.clone());
        let out = self.decode(&mut g, f, style, None, &mut Dropout::off())?;
        Ok(g.value(out).clone())
    }

    /// Records the full forward pass into `g` and returns the `N x D` prediction.
    pub fn forward(
        &self,
        g: &mut Graph,
        audio: &Mat,
        x_t: &Mat,
        t: usize,
        style: Option<usize>,
        mode: Mode<'_>,
    ) -> Result<Var> {
        let n = audio.nrows();
        if n == 0 {
            return Err(Error::Contract("cannot decode an empty sequence".into()));
        }
        if audio.ncols() != self.cfg.audio_dim {
            return Err(Error::Contract(format!(
                "audio features have {} columns, model expects {}",
                audio.ncols(),
                self.cfg.audio_dim
            )));
        }
        if x_t.dim() != (n, self.cfg.output_dim) {
            return Err(Error::Contract(format!(
                "noised motion is {:?}, model expects {:?}",
                x_t.dim(),
                (n, self.cfg.output_dim)
            )));
        }
        let (x_in, t_in) = if self.cfg.diffusion_enabled {
            (x_t.clone(), t)
        } else {
            (Mat::zeros(x_t.dim()), 0)
        };
        let x = g.input(x_in);
        let latent = match &self.noise {
            Some(enc) => {
                let l = enc.forward(g, &self.store, x);
                check_finite(g, l, "noise encoder")?;
                l
            }
            None => x,
        };
        let a = g.input(audio.clone());
        let temb = timestep_embedding(t_in, self.cfg.decoder.timestep_dim);
        let temb = g.input(temb.broadcast((n, temb.ncols())).expect("row broadcast").to_owned());
        let fused = g.concat_cols(&[a, latent, temb]);

        let (teacher, mut dropout) = match mode {
            Mode::Eval => (None, Dropout::off()),
            Mode::Train { rng, target } => {
                let teacher = (self.cfg.decoder.decoder_variant == DecoderVariant::TransformerTf).then_some(target);
                (
                    teacher,
                    Dropout {
                        p: self.cfg.decoder.dropout,
                        rng: Some(rng),
                    },
                )
            }
        };
        self.decode(g, fused, style, teacher, &mut dropout)
    }

    /// Records forward pass and loss against `x0`; returns the scalar loss node.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph,
        audio: &Mat,
        x_t: &Mat,
        t: usize,
        style: Option<usize>,
        x0: &Mat,
        kind: LossKind,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let mode = match rng {
            Some(rng) => Mode::Train { rng, target: x0 },
            None => Mode::Eval,
        };
        let pred = self.forward(g, audio, x_t, t, style, mode)?;
        Ok(match kind {
            LossKind::Mse => g.mse(pred, x0.clone()),
            LossKind::Mae => g.mae(pred, x0.clone()),
        })
    }
}

impl Denoiser for FaceModel {
    fn output_dim(&self) -> usize {
        self.cfg.output_dim
    }

    fn predict_x0(&self, audio: &Mat, x_t: &Mat, t: usize, style: Option<usize>) -> Result<Mat> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, audio, x_t, t, style, Mode::Eval)?;
        Ok(g.value(out).clone())
    }
}
