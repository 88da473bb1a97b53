//! Causal transformer decoder, evaluated one frame at a time.
//!
//! Each frame's token is the projected fused input plus a projection of the
//! previous frame's motion and a positional encoding. Under teacher forcing
//! the previous frame comes from the clean target; otherwise it is the
//! model's own prediction for that frame, kept in the graph.

use rand::Rng;

use super::Dropout;
use crate::nn::{sinusoidal_encoding, Graph, Init, Linear, Mat, ParamId, ParamStore, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct Block {
    query: Linear,
    key: Linear,
    value: Linear,
    proj: Linear,
    ln1: (ParamId, ParamId),
    ff1: Linear,
    ff2: Linear,
    ln2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub(crate) struct TransformerCore {
    input: Linear,
    prev_motion: Linear,
    blocks: Vec<Block>,
    hidden: usize,
    heads: usize,
    output_dim: usize,
}

fn layer_norm_params<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, h: usize, rng: &mut R) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.gamma"), (1, h), Init::Const(1.0), rng),
        store.add(format!("{name}.beta"), (1, h), Init::Const(0.0), rng),
    )
}

impl TransformerCore {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        fan_in: usize,
        output_dim: usize,
        hidden: usize,
        layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let input = Linear::new(store, "decoder.input", fan_in, hidden, rng);
        let prev_motion = Linear::new(store, "decoder.prev_motion", output_dim, hidden, rng);
        let blocks = (0..layers)
            .map(|l| {
                let p = format!("decoder.block{l}");
                Block {
                    query: Linear::new(store, &format!("{p}.query"), hidden, hidden, rng),
                    key: Linear::new(store, &format!("{p}.key"), hidden, hidden, rng),
                    value: Linear::new(store, &format!("{p}.value"), hidden, hidden, rng),
                    proj: Linear::new(store, &format!("{p}.proj"), hidden, hidden, rng),
                    ln1: layer_norm_params(store, &format!("{p}.ln1"), hidden, rng),
                    ff1: Linear::new(store, &format!("{p}.ff1"), hidden, 2 * hidden, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), 2 * hidden, hidden, rng),
                    ln2: layer_norm_params(store, &format!("{p}.ln2"), hidden, rng),
                }
            })
            .collect();
        Self {
            input,
            prev_motion,
            blocks,
            hidden,
            heads,
            output_dim,
        }
    }

    fn layer_norm(g: &mut Graph, store: &ParamStore, x: Var, (gamma, beta): (ParamId, ParamId)) -> Var {
        let n = g.normalize_rows(x, LN_EPS);
        let gm = g.param(store, gamma);
        let bt = g.param(store, beta);
        let y = g.mul_row(n, gm);
        g.add_row(y, bt)
    }

    /// Returns the `N x D` predictions. `head` maps one final hidden row to one motion row.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fused: Var,
        teacher: Option<&Mat>,
        dropout: &mut Dropout<'_>,
        head: &mut dyn FnMut(&mut Graph, Var) -> Var,
    ) -> Var {
        let n = g.dim(fused).0;
        let dh = self.hidden / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let projected = self.input.forward(g, store, fused);
        let mut keys: Vec<Vec<Var>> = vec![Vec::with_capacity(n); self.blocks.len()];
        let mut values: Vec<Vec<Var>> = vec![Vec::with_capacity(n); self.blocks.len()];
        let mut outputs = Vec::with_capacity(n);
        let mut prev = g.input(Mat::zeros((1, self.output_dim)));

        for i in 0..n {
            let xi = g.row(projected, i);
            let pm = self.prev_motion.forward(g, store, prev);
            let pos = g.input(sinusoidal_encoding(i as f64, self.hidden));
            let z = g.add(xi, pm);
            let mut z = g.add(z, pos);
            for (l, block) in self.blocks.iter().enumerate() {
                let q = block.query.forward(g, store, z);
                let k = block.key.forward(g, store, z);
                let v = block.value.forward(g, store, z);
                keys[l].push(k);
                values[l].push(v);
                let kk = g.stack_rows(&keys[l]);
                let vv = g.stack_rows(&values[l]);
                let mut head_out = Vec::with_capacity(self.heads);
                for h in 0..self.heads {
                    let qh = g.slice_cols(q, h * dh, dh);
                    let kh = g.slice_cols(kk, h * dh, dh);
                    let vh = g.slice_cols(vv, h * dh, dh);
                    let kt = g.transpose(kh);
                    let scores = g.matmul(qh, kt);
                    let scores = g.scale(scores, scale);
                    let attn = g.softmax_rows(scores);
                    head_out.push(g.matmul(attn, vh));
                }
                let att = if head_out.len() == 1 { head_out[0] } else { g.concat_cols(&head_out) };
                let att = block.proj.forward(g, store, att);
                let att = dropout.apply(g, att);
                let r = g.add(z, att);
                let r = Self::layer_norm(g, store, r, block.ln1);
                let f = block.ff1.forward(g, store, r);
                let f = g.relu(f);
                let f = block.ff2.forward(g, store, f);
                let f = dropout.apply(g, f);
                let r2 = g.add(r, f);
                z = Self::layer_norm(g, store, r2, block.ln2);
            }
            let out = head(g, z);
            outputs.push(out);
            prev = match teacher {
                Some(t) => g.input(t.row(i).to_owned().insert_axis(ndarray::Axis(0))),
                None => out,
            };
        }
        g.stack_rows(&outputs)
    }
}
