//! Emotion-guided fusion decoder.
//!
//! Emotion and content streams are projected and concatenated with the style
//! and level embeddings, a periodic positional encoding is added, and the
//! result passes through decoder blocks (causal ALiBi self-attention,
//! emotion-guided cross-attention, feed-forward; pre-norm residual) before a
//! linear head produces 52 blendshape coefficients per frame.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::data::{BlendshapeSequence, FeatureSequence, N_BLENDSHAPES};
use crate::error::{Error, Result};
use crate::nn::{uniform_fan_in, AttentionOutput, FeedForward, LayerNorm, Linear, MultiHeadAttention};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub d_emotion: usize,
    pub d_content: usize,
    pub d_style: usize,
    pub d_level: usize,
    pub d_fused: usize,
    pub n_heads: usize,
    pub ppe_period: usize,
    pub n_styles: usize,
    pub n_levels: usize,
    pub n_decoder_blocks: usize,
}

impl FusionConfig {
    pub fn full() -> Self {
        Self {
            d_emotion: 256,
            d_content: 512,
            d_style: 32,
            d_level: 32,
            d_fused: 832,
            n_heads: 4,
            ppe_period: 30,
            n_styles: 24,
            n_levels: 2,
            n_decoder_blocks: 1,
        }
    }

    /// Same layout at a width that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            d_emotion: 32,
            d_content: 64,
            d_style: 16,
            d_level: 16,
            d_fused: 128,
            n_heads: 4,
            ppe_period: 30,
            n_styles: 24,
            n_levels: 2,
            n_decoder_blocks: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum = self.d_emotion + self.d_content + self.d_style + self.d_level;
        if sum != self.d_fused {
            return Err(Error::Config(format!(
                "d_fused {} != {} + {} + {} + {}",
                self.d_fused, self.d_emotion, self.d_content, self.d_style, self.d_level
            )));
        }
        if self.n_heads == 0 || !self.d_fused.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_fused {} not divisible by {} heads",
                self.d_fused, self.n_heads
            )));
        }
        if !self.d_fused.is_multiple_of(2) {
            return Err(Error::Config("d_fused must be even for the positional encoding".into()));
        }
        if self.ppe_period == 0 || self.n_styles == 0 || self.n_levels == 0 {
            return Err(Error::Config(
                "ppe_period, n_styles and n_levels must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Column range of each fused segment, in concatenation order.
    pub fn segments(&self) -> [std::ops::Range<usize>; 4] {
        let e = self.d_emotion;
        let c = e + self.d_content;
        let s = c + self.d_style;
        [0..e, e..c, c..s, s..s + self.d_level]
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// `PPE(t, 2i) = sin((t mod p) / 10000^(2i/d))`, odd columns use cosine.
pub fn periodic_positional_encoding(t: usize, d: usize, period: usize) -> Array2<f64> {
    assert!(period >= 1 && d.is_multiple_of(2));
    Array2::from_shape_fn((t, d), |(row, col)| {
        let i = col / 2;
        let arg = (row % period) as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        if col % 2 == 0 {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// ALiBi slope of head `h` (1-based) out of `n`.
pub fn alibi_slope(h: usize, n: usize) -> f64 {
    2f64.powf(-8.0 * h as f64 / n as f64)
}

/// Per-head additive biases: `m_h (j - i)` on and below the diagonal, `-inf` above.
pub fn alibi_biases(t: usize, n_heads: usize) -> Vec<Array2<f64>> {
    (1..=n_heads)
        .map(|h| {
            let m = alibi_slope(h, n_heads);
            Array2::from_shape_fn((t, t), |(i, j)| {
                if j <= i {
                    m * (j as f64 - i as f64)
                } else {
                    f64::NEG_INFINITY
                }
            })
        })
        .collect()
}

fn causal_mask(t: usize, n_heads: usize) -> Vec<Array2<f64>> {
    let m = Array2::from_shape_fn((t, t), |(i, j)| if j <= i { 0.0 } else { f64::NEG_INFINITY });
    vec![m; n_heads]
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

/// Parameters of the fusion decoder.
#[derive(Clone, Debug)]
pub struct FusionDecoder {
    pub config: FusionConfig,
    pub d_model: usize,
    pub proj_emotion: Linear,
    pub proj_content: Linear,
    pub style_table: ParamId,
    pub level_table: ParamId,
    /// `d_model -> d_fused` projection feeding the cross-attention keys and values.
    pub emotion_guide: Linear,
    pub blocks: Vec<DecoderBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

/// Decoder activations kept for inspection.
pub struct DecoderTrace {
    pub output: Var,
    pub self_weights: Vec<Vec<Var>>,
    pub cross_weights: Vec<Vec<Var>>,
}

impl FusionDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &FusionConfig, d_model: usize) -> Result<Self> {
        config.validate()?;
        let d = config.d_fused;
        let blocks = (0..config.n_decoder_blocks)
            .map(|b| {
                let p = format!("decoder.block.{b}");
                DecoderBlock {
                    self_norm: LayerNorm::new(store, &format!("{p}.self_norm"), d),
                    self_attn: MultiHeadAttention::new(store, rng, &format!("{p}.self_attn"), d, d, config.n_heads),
                    cross_norm: LayerNorm::new(store, &format!("{p}.cross_norm"), d),
                    cross_attn: MultiHeadAttention::new(store, rng, &format!("{p}.cross_attn"), d, d, config.n_heads),
                    ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), d),
                    ff: FeedForward::new(store, rng, &format!("{p}.ff"), d, 2 * d),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            d_model,
            proj_emotion: Linear::new(store, rng, "decoder.proj_emotion", d_model, config.d_emotion, true),
            proj_content: Linear::new(store, rng, "decoder.proj_content", d_model, config.d_content, true),
            style_table: store.add(
                "decoder.style_table",
                uniform_fan_in(rng, config.n_styles, config.d_style),
                false,
            ),
            level_table: store.add(
                "decoder.level_table",
                uniform_fan_in(rng, config.n_levels, config.d_level),
                false,
            ),
            emotion_guide: Linear::new(store, rng, "decoder.emotion_guide", d_model, d, true),
            blocks,
            final_norm: LayerNorm::new(store, "decoder.final_norm", d),
            head: Linear::new(store, rng, "decoder.head", d, N_BLENDSHAPES, true),
        })
    }

    fn embed(&self, g: &mut Graph, table: ParamId, id: usize, rows: usize) -> Var {
        let n = g.params().get(table).nrows();
        let mut one_hot = Array2::zeros((1, n));
        one_hot[[0, id]] = 1.0;
        let one_hot = g.constant(one_hot);
        let table = g.param(table);
        let row = g.matmul(one_hot, table);
        g.broadcast_rows(row, rows)
    }

    pub fn check_ids(&self, style_id: usize, level_id: usize) -> Result<()> {
        if style_id >= self.config.n_styles {
            return Err(Error::range("style_id", style_id, self.config.n_styles));
        }
        if level_id >= self.config.n_levels {
            return Err(Error::range("level_id", level_id, self.config.n_levels));
        }
        Ok(())
    }

    /// `[proj_e(emo) | proj_c(content) | style | level]`, `T x d_fused`.
    pub fn fuse_graph(&self, g: &mut Graph, emo: Var, content: Var, style_id: usize, level_id: usize) -> Result<Var> {
        let (te, tc) = (g.value(emo).nrows(), g.value(content).nrows());
        if te != tc {
            return Err(Error::Alignment(format!(
                "emotion stream has {te} frames, content {tc}"
            )));
        }
        self.check_ids(style_id, level_id)?;
        let e = self.proj_emotion.forward(g, emo);
        let c = self.proj_content.forward(g, content);
        let s = self.embed(g, self.style_table, style_id, te);
        let l = self.embed(g, self.level_table, level_id, te);
        Ok(g.concat_cols(&[e, c, s, l]))
    }

    pub fn self_attention_graph(&self, g: &mut Graph, block: &DecoderBlock, x: Var) -> AttentionOutput {
        let t = g.value(x).nrows();
        let biases = alibi_biases(t, self.config.n_heads);
        block.self_attn.forward(g, x, x, Some(&biases))
    }

    /// Cross-attention from `x` onto the projected emotion stream.
    pub fn emotion_attention_graph(
        &self,
        g: &mut Graph,
        block: &DecoderBlock,
        x: Var,
        emo_raw: Var,
    ) -> Result<AttentionOutput> {
        let (t, te) = (g.value(x).nrows(), g.value(emo_raw).nrows());
        if t != te {
            return Err(Error::Alignment(format!("decoder stream has {t} frames, emotion {te}")));
        }
        let kv = self.emotion_guide.forward(g, emo_raw);
        let mask = causal_mask(t, self.config.n_heads);
        Ok(block.cross_attn.forward(g, x, kv, Some(&mask)))
    }

    /// Full decoder over a fused sequence: PPE, blocks, final norm, head.
    pub fn decode_graph(&self, g: &mut Graph, fused: Var, emo_raw: Var) -> Result<DecoderTrace> {
        let (t, d) = g.value(fused).dim();
        if d != self.config.d_fused {
            return Err(Error::Shape(format!(
                "fused width {d}, expected {}",
                self.config.d_fused
            )));
        }
        let ppe = g.constant(periodic_positional_encoding(t, d, self.config.ppe_period));
        let mut x = g.add(fused, ppe);
        let mut self_weights = Vec::new();
        let mut cross_weights = Vec::new();
        for block in &self.blocks {
            let h = block.self_norm.forward(g, x);
            let a = self.self_attention_graph(g, block, h);
            x = g.add(x, a.output);
            self_weights.push(a.weights);

            let h = block.cross_norm.forward(g, x);
            let a = self.emotion_attention_graph(g, block, h, emo_raw)?;
            x = g.add(x, a.output);
            cross_weights.push(a.weights);

            let h = block.ff_norm.forward(g, x);
            let f = block.ff.forward(g, h);
            x = g.add(x, f);
        }
        let x = self.final_norm.forward(g, x);
        Ok(DecoderTrace {
            output: self.head.forward(g, x),
            self_weights,
            cross_weights,
        })
    }

    pub fn fuse_features(
        &self,
        store: &ParamStore,
        emo: &FeatureSequence,
        content: &FeatureSequence,
        style_id: usize,
        level_id: usize,
    ) -> Result<FeatureSequence> {
        let mut g = Graph::new(store);
        let (e, c) = (g.constant(emo.values().clone()), g.constant(content.values().clone()));
        let out = self.fuse_graph(&mut g, e, c, style_id, level_id)?;
        FeatureSequence::new(g.value(out).clone(), emo.fps())
    }

    /// First block's causal ALiBi self-attention sublayer (no residual).
    pub fn biased_self_attention(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new(store);
        let xv = g.constant(x.clone());
        let out = self.self_attention_graph(&mut g, &self.blocks[0], xv).output;
        g.value(out).clone()
    }

    /// First block's emotion-guided sublayer including its residual connection.
    pub fn emotion_guided_attention(
        &self,
        store: &ParamStore,
        x: &Array2<f64>,
        emo_raw: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let mut g = Graph::new(store);
        let (xv, ev) = (g.constant(x.clone()), g.constant(emo_raw.clone()));
        let block = &self.blocks[0];
        let h = block.cross_norm.forward(&mut g, xv);
        let a = self.emotion_attention_graph(&mut g, block, h, ev)?;
        let out = g.add(xv, a.output);
        Ok(g.value(out).clone())
    }

    pub fn decode_blendshapes(
        &self,
        store: &ParamStore,
        fused: &Array2<f64>,
        emo_raw: &Array2<f64>,
    ) -> Result<BlendshapeSequence> {
        let mut g = Graph::new(store);
        let (f, e) = (g.constant(fused.clone()), g.constant(emo_raw.clone()));
        let trace = self.decode_graph(&mut g, f, e)?;
        BlendshapeSequence::new(g.value(trace.output).clone())
    }
}
