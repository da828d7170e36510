//! Layers built on the autograd tape.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation.
pub fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound))
}

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_fan_in(rng, d_in, d_out), false);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, d_out)), false));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, d)), false),
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, d)), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two-layer GELU feed-forward.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, d_inner: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), d, d_inner, true),
            down: Linear::new(store, rng, &format!("{name}.down"), d_inner, d, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention with optional per-head additive
/// score biases (which may hold `-inf` for masked positions).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
}

pub struct AttentionOutput {
    pub output: Var,
    /// Row-stochastic `T_q x T_k` weights, one per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        d_kv_in: usize,
        n_heads: usize,
    ) -> Self {
        assert!(
            d_model.is_multiple_of(n_heads),
            "d_model {d_model} not divisible by {n_heads} heads"
        );
        Self {
            query: Linear::new(store, rng, &format!("{name}.query"), d_model, d_model, true),
            key: Linear::new(store, rng, &format!("{name}.key"), d_kv_in, d_model, true),
            value: Linear::new(store, rng, &format!("{name}.value"), d_kv_in, d_model, true),
            output: Linear::new(store, rng, &format!("{name}.output"), d_model, d_model, true),
            n_heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, query_in: Var, kv_in: Var, biases: Option<&[Array2<f64>]>) -> AttentionOutput {
        let q = self.query.forward(g, query_in);
        let k = self.key.forward(g, kv_in);
        let v = self.value.forward(g, kv_in);
        let d_model = self.query.d_out;
        let d_head = d_model / self.n_heads;
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * d_head, d_head);
            let kh = g.slice_cols(k, h * d_head, d_head);
            let vh = g.slice_cols(v, h * d_head, d_head);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let mut scores = g.scale(scores, scale);
            if let Some(b) = biases {
                let bias = g.constant(b[h].clone());
                scores = g.add(scores, bias);
            }
            let w = g.softmax(scores);
            heads.push(g.matmul(w, vh));
            weights.push(w);
        }
        let cat = g.concat_cols(&heads);
        AttentionOutput {
            output: self.output.forward(g, cat),
            weights,
        }
    }
}
