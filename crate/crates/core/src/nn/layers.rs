use ndarray::Array2;
use rand::Rng;

use super::params::{Init, ParamId, ParamStore};
use super::tape::{Graph, Mat, Var};

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), (fan_in, fan_out), Init::FanIn(fan_in), rng);
        let bias = store.add(format!("{name}.bias"), (1, fan_out), Init::FanIn(fan_in), rng);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

/// Sinusoidal encoding of a position, `width` columns: `sin(p w_i)` for the
/// first half and `cos(p w_i)` for the second, with geometric frequencies
/// `w_i = 10000^(-i / half)`.
pub fn sinusoidal_encoding(position: f64, width: usize) -> Array2<f64> {
    let half = width / 2;
    let mut out = Array2::zeros((1, width));
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[[0, i]] = (position * freq).sin();
        out[[0, half + i]] = (position * freq).cos();
    }
    if width % 2 == 1 {
        out[[0, width - 1]] = (position / 10_000f64).sin();
    }
    out
}

/// Inverted-dropout mask: kept entries are scaled by `1 / (1 - p)`.
pub fn dropout_mask<R: Rng + ?Sized>(shape: (usize, usize), p: f64, rng: &mut R) -> Mat {
    let keep = 1.0 - p;
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
}
