use rand::Rng;

use crate::nn::{Graph, Init, Linear, Mat, ParamId, ParamStore, Var};

/// One GRU or vanilla tanh-RNN layer unrolled over the frames of a sequence.
#[derive(Clone, Debug)]
pub(crate) struct RecurrentLayer {
    input: Linear,
    hidden_weight: ParamId,
    hidden_bias: Option<ParamId>,
    hidden: usize,
    gated: bool,
}

impl RecurrentLayer {
    pub(crate) fn gru<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let input = Linear::new(store, &format!("{name}.input"), fan_in, 3 * hidden, rng);
        let hidden_weight = store.add(format!("{name}.hidden.weight"), (hidden, 3 * hidden), Init::FanIn(hidden), rng);
        let hidden_bias = store.add(format!("{name}.hidden.bias"), (1, 3 * hidden), Init::FanIn(hidden), rng);
        Self {
            input,
            hidden_weight,
            hidden_bias: Some(hidden_bias),
            hidden,
            gated: true,
        }
    }

    pub(crate) fn rnn<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let input = Linear::new(store, &format!("{name}.input"), fan_in, hidden, rng);
        let hidden_weight = store.add(format!("{name}.hidden.weight"), (hidden, hidden), Init::FanIn(hidden), rng);
        Self {
            input,
            hidden_weight,
            hidden_bias: None,
            hidden,
            gated: false,
        }
    }

    /// Runs the layer over all rows of `x` from a zero initial state and
    /// returns the stacked hidden states (`N x H`).
    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.dim(x).0;
        let hdim = self.hidden;
        let xw = self.input.forward(g, store, x);
        let wh = g.param(store, self.hidden_weight);
        let bh = self.hidden_bias.map(|b| g.param(store, b));
        let mut h = g.input(Mat::zeros((1, hdim)));
        let mut states = Vec::with_capacity(n);
        for i in 0..n {
            let xi = g.row(xw, i);
            let hw = g.matmul(h, wh);
            h = if self.gated {
                let hw = g.add_row(hw, bh.expect("GRU layers have a hidden bias"));
                let xr = g.slice_cols(xi, 0, hdim);
                let xz = g.slice_cols(xi, hdim, hdim);
                let xn = g.slice_cols(xi, 2 * hdim, hdim);
                let hr = g.slice_cols(hw, 0, hdim);
                let hz = g.slice_cols(hw, hdim, hdim);
                let hn = g.slice_cols(hw, 2 * hdim, hdim);
                let r = g.add(xr, hr);
                let r = g.sigmoid(r);
                let z = g.add(xz, hz);
                let z = g.sigmoid(z);
                let rn = g.mul(r, hn);
                let cand = g.add(xn, rn);
                let cand = g.tanh(cand);
                // h' = (1 - z) * cand + z * h = cand + z * (h - cand)
                let diff = g.sub(h, cand);
                let zd = g.mul(z, diff);
                g.add(cand, zd)
            } else {
                let pre = g.add(xi, hw);
                g.tanh(pre)
            };
            states.push(h);
        }
        g.stack_rows(&states)
    }
}
