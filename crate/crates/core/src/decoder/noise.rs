//! Noise encoders that project high-dimensional noised vertex motion to a
//! per-frame latent of width `E`.

use rand::Rng;

use super::NoiseEncoderVariant;
use crate::nn::{Graph, Linear, ParamStore, Var};

#[derive(Clone, Debug)]
pub(crate) struct ConvBlock {
    affine: Linear,
    conv: Linear,
}

#[derive(Clone, Debug)]
pub(crate) enum NoiseEncoder {
    Mlp(Linear, Linear),
    Conv { blocks: Vec<ConvBlock>, max: bool },
}

impl NoiseEncoder {
    /// `None` for the identity (rig) variant.
    pub(crate) fn build<R: Rng + ?Sized>(
        variant: NoiseEncoderVariant,
        input_dim: usize,
        latent: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Option<Self> {
        let (repeats, max) = match variant {
            NoiseEncoderVariant::None => return None,
            NoiseEncoderVariant::Mlp => {
                let a = Linear::new(store, "noise.fc1", input_dim, latent, rng);
                let b = Linear::new(store, "noise.fc2", latent, latent, rng);
                return Some(NoiseEncoder::Mlp(a, b));
            }
            NoiseEncoderVariant::ConvMax => (1, true),
            NoiseEncoderVariant::ConvAvg => (1, false),
            NoiseEncoderVariant::ConvMaxX3 => (3, true),
            NoiseEncoderVariant::ConvAvgX3 => (3, false),
        };
        let blocks = (0..repeats)
            .map(|i| {
                let fan_in = if i == 0 { input_dim } else { latent };
                ConvBlock {
                    affine: Linear::new(store, &format!("noise.block{i}.fc"), fan_in, 2 * latent, rng),
                    conv: Linear::new(store, &format!("noise.block{i}.conv"), 3 * 2 * latent, 2 * latent, rng),
                }
            })
            .collect();
        Some(NoiseEncoder::Conv { blocks, max })
    }

    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        match self {
            NoiseEncoder::Mlp(a, b) => {
                let h = a.forward(g, store, x);
                let h = g.relu(h);
                b.forward(g, store, h)
            }
            NoiseEncoder::Conv { blocks, max } => {
                let mut h = x;
                for block in blocks {
                    let y = block.affine.forward(g, store, h);
                    // window-3 temporal convolution with zero padding
                    let prev = g.shift_rows(y, 1);
                    let next = g.shift_rows(y, -1);
                    let window = g.concat_cols(&[prev, y, next]);
                    let c = block.conv.forward(g, store, window);
                    h = if *max { g.max_pool_cols(c, 2) } else { g.avg_pool_cols(c, 2) };
                }
                h
            }
        }
    }
}
