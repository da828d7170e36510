//! Content and emotion feature extractors.
//!
//! Each extractor is a strided convolutional front-end over the normalized
//! waveform (frozen by default), a linear resampling of the front-end frames to
//! the target frame count, a feature projection and a stack of pre-norm
//! transformer blocks. The emotion extractor additionally owns a classification
//! head (temporal mean-pool, affine map, softmax).

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{im2col, softmax_rows, Graph, ParamId, ParamStore, Var};
use crate::data::{AudioClip, FeatureSequence};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};

/// `(kernel, stride)` of each front-end layer; total stride 320 samples (50 Hz at 16 kHz).
pub const FRONTEND_LAYERS: [(usize, usize); 7] = [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)];

/// Shortest waveform the front-end accepts.
pub fn frontend_min_samples() -> usize {
    FRONTEND_LAYERS.iter().rev().fold(1, |need, &(k, s)| (need - 1) * s + k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_inner: usize,
    pub conv_frontend_frozen: bool,
    /// Number of emotion classes `M`.
    pub n_emotions: usize,
    /// Channel width of the convolutional front-end.
    pub frontend_channels: usize,
    /// Width in frames of the convolutional positional embedding; 0 disables it.
    pub pos_conv_kernel: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_blocks: 2,
            n_heads: 4,
            d_inner: 256,
            conv_frontend_frozen: true,
            n_emotions: 4,
            frontend_channels: 32,
            pos_conv_kernel: 9,
        }
    }

    /// Dimensions of the large pre-trained extractor.
    pub fn full() -> Self {
        Self {
            d_model: 1024,
            n_blocks: 24,
            n_heads: 16,
            d_inner: 4096,
            conv_frontend_frozen: true,
            n_emotions: 8,
            frontend_channels: 512,
            pos_conv_kernel: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_inner == 0 || self.frontend_channels == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "encoder d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.n_emotions == 0 {
            return Err(Error::Config("n_emotions must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Linear interpolation matrix mapping `t_in` frames to `t_out` frames on a
/// normalized time axis. A single output frame samples the midpoint.
pub fn interp_matrix(t_in: usize, t_out: usize) -> Array2<f64> {
    assert!(t_in >= 1 && t_out >= 1);
    let mut m = Array2::zeros((t_out, t_in));
    if t_in == t_out {
        m.diag_mut().fill(1.0);
        return m;
    }
    for i in 0..t_out {
        let u = if t_out == 1 { 0.5 } else { i as f64 / (t_out - 1) as f64 };
        let pos = u * (t_in - 1) as f64;
        let lo = (pos.floor() as usize).min(t_in - 1);
        let a = pos - lo as f64;
        if lo + 1 < t_in && a > 0.0 {
            m[[i, lo]] = 1.0 - a;
            m[[i, lo + 1]] = a;
        } else {
            m[[i, lo]] = 1.0;
        }
    }
    m
}

fn resample(values: &Array2<f64>, target_t: usize) -> Array2<f64> {
    if values.nrows() == target_t {
        values.clone()
    } else {
        interp_matrix(values.nrows(), target_t).dot(values)
    }
}

/// Per-channel linear resampling of a feature sequence to `target_t` frames.
pub fn interp_time(seq: &FeatureSequence, target_t: usize) -> Result<FeatureSequence> {
    if target_t == 0 {
        return Err(Error::Length("target frame count must be at least 1".into()));
    }
    let fps = seq.fps() * target_t as f64 / seq.frames() as f64;
    FeatureSequence::new(resample(seq.values(), target_t), fps)
}

/// Zero-mean, unit-variance waveform as a `N x 1` column.
fn normalized_waveform(samples: &[f64]) -> Array2<f64> {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-7).sqrt();
    Array2::from_shape_fn((samples.len(), 1), |(i, _)| (samples[i] - mean) * inv)
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

/// One feature extractor.
#[derive(Clone, Debug)]
pub struct Extractor {
    frontend: Vec<ParamId>,
    proj: Linear,
    pos_conv: Option<Linear>,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
}

impl Extractor {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &EncoderConfig) -> Self {
        let mut frontend = Vec::new();
        let mut c_in = 1;
        for (i, &(k, _)) in FRONTEND_LAYERS.iter().enumerate() {
            let fan_in = k * c_in;
            // variance-preserving bound for a GELU stack
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, cfg.frontend_channels), |_| {
                rand::Rng::gen_range(rng, -bound..bound)
            });
            frontend.push(store.add(format!("{name}.frontend.{i}.weight"), w, cfg.conv_frontend_frozen));
            c_in = cfg.frontend_channels;
        }
        let proj = Linear::new(
            store,
            rng,
            &format!("{name}.proj"),
            cfg.frontend_channels,
            cfg.d_model,
            true,
        );
        let pos_conv = (cfg.pos_conv_kernel > 0).then(|| {
            Linear::new(
                store,
                rng,
                &format!("{name}.pos_conv"),
                cfg.pos_conv_kernel * cfg.d_model,
                cfg.d_model,
                true,
            )
        });
        let blocks = (0..cfg.n_blocks)
            .map(|b| {
                let p = format!("{name}.block.{b}");
                Block {
                    attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), cfg.d_model),
                    attn: MultiHeadAttention::new(
                        store,
                        rng,
                        &format!("{p}.attn"),
                        cfg.d_model,
                        cfg.d_model,
                        cfg.n_heads,
                    ),
                    ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), cfg.d_model),
                    ff: FeedForward::new(store, rng, &format!("{p}.ff"), cfg.d_model, cfg.d_inner),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, &format!("{name}.final_norm"), cfg.d_model);
        Self {
            frontend,
            proj,
            pos_conv,
            blocks,
            final_norm,
        }
    }

    pub fn frontend_params(&self) -> &[ParamId] {
        &self.frontend
    }

    /// Front-end frames for a waveform, computed outside the tape.
    pub fn frontend(&self, store: &ParamStore, samples: &[f64]) -> Result<Array2<f64>> {
        if samples.len() < frontend_min_samples() {
            return Err(Error::Length(format!(
                "{} samples, front-end needs at least {}",
                samples.len(),
                frontend_min_samples()
            )));
        }
        let mut x = normalized_waveform(samples);
        for (&(k, s), &w) in FRONTEND_LAYERS.iter().zip(&self.frontend) {
            x = im2col(&x, k, s).dot(store.get(w)).mapv(crate::autograd::gelu);
        }
        Ok(x)
    }

    fn frontend_graph(&self, g: &mut Graph, samples: &[f64]) -> Result<Var> {
        if samples.len() < frontend_min_samples() {
            return Err(Error::Length(format!(
                "{} samples, front-end needs at least {}",
                samples.len(),
                frontend_min_samples()
            )));
        }
        let mut x = g.constant(normalized_waveform(samples));
        for (&(k, s), &w) in FRONTEND_LAYERS.iter().zip(&self.frontend) {
            let cols = g.im2col(x, k, s);
            let w = g.param(w);
            let h = g.matmul(cols, w);
            x = g.gelu(h);
        }
        Ok(x)
    }

    pub fn is_frozen(&self, store: &ParamStore) -> bool {
        store.entry(self.frontend[0]).frozen
    }

    /// Front-end frames resampled to `target_t`, computed outside the tape.
    pub fn aligned_frontend_values(&self, store: &ParamStore, samples: &[f64], target_t: usize) -> Result<Array2<f64>> {
        Ok(resample(&self.frontend(store, samples)?, target_t))
    }

    /// Front-end output aligned to `target_t` frames, as a graph node.
    ///
    /// Frozen front-ends are evaluated (or taken from `cached`) outside the
    /// tape; trainable ones are recorded so they receive gradients.
    pub fn aligned_frontend(
        &self,
        g: &mut Graph,
        samples: &[f64],
        target_t: usize,
        cached: Option<&Array2<f64>>,
    ) -> Result<Var> {
        if self.is_frozen(g.params()) {
            let feats = match cached {
                Some(c) => c.clone(),
                None => resample(&self.frontend(g.params(), samples)?, target_t),
            };
            Ok(g.constant(feats))
        } else {
            let x = self.frontend_graph(g, samples)?;
            let t_in = g.value(x).nrows();
            if t_in == target_t {
                Ok(x)
            } else {
                let m = g.constant(interp_matrix(t_in, target_t));
                Ok(g.matmul(m, x))
            }
        }
    }

    /// Trainable part: projection, transformer blocks and final norm.
    pub fn encode(&self, g: &mut Graph, aligned: Var) -> Var {
        let mut x = self.proj.forward(g, aligned);
        if let Some(conv) = &self.pos_conv {
            // zero-padded "same" convolution over frames
            let t = g.value(x).nrows();
            let k = conv.d_in / conv.d_out;
            let left = (k - 1) / 2;
            let pad = g.constant(Array2::from_shape_fn((t + k - 1, t), |(i, j)| f64::from(i == j + left)));
            let padded = g.matmul(pad, x);
            let cols = g.im2col(padded, k, 1);
            let h = conv.forward(g, cols);
            let h = g.gelu(h);
            x = g.add(x, h);
        }
        for b in &self.blocks {
            let h = b.attn_norm.forward(g, x);
            let a = b.attn.forward(g, h, h, None).output;
            x = g.add(x, a);
            let h = b.ff_norm.forward(g, x);
            let f = b.ff.forward(g, h);
            x = g.add(x, f);
        }
        self.final_norm.forward(g, x)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        samples: &[f64],
        target_t: usize,
        cached: Option<&Array2<f64>>,
    ) -> Result<Var> {
        let aligned = self.aligned_frontend(g, samples, target_t, cached)?;
        Ok(self.encode(g, aligned))
    }
}

/// Both extractors plus the emotion classification head.
#[derive(Clone, Debug)]
pub struct AudioEncoders {
    pub config: EncoderConfig,
    pub content: Extractor,
    pub emotion: Extractor,
    pub classifier: Linear,
}

impl AudioEncoders {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            content: Extractor::new(store, rng, "content", config),
            emotion: Extractor::new(store, rng, "emotion", config),
            classifier: Linear::new(
                store,
                rng,
                "emotion.classifier",
                config.d_model,
                config.n_emotions,
                true,
            ),
        })
    }

    /// Graph version of the classification head: `1 x M` probabilities.
    pub fn classify_graph(&self, g: &mut Graph, emo_features: Var) -> Var {
        let pooled = g.mean_rows(emo_features);
        let logits = self.classifier.forward(g, pooled);
        g.softmax(logits)
    }

    fn run(&self, store: &ParamStore, which: &Extractor, clip: &AudioClip, target_t: usize) -> Result<FeatureSequence> {
        if target_t == 0 {
            return Err(Error::Length("target frame count must be at least 1".into()));
        }
        let mut g = Graph::new(store);
        let out = which.forward(&mut g, clip.samples(), target_t, None)?;
        FeatureSequence::new(g.value(out).clone(), target_t as f64 / clip.duration_s())
    }

    pub fn extract_content(&self, store: &ParamStore, clip: &AudioClip, target_t: usize) -> Result<FeatureSequence> {
        self.run(store, &self.content, clip, target_t)
    }

    pub fn extract_emotion(&self, store: &ParamStore, clip: &AudioClip, target_t: usize) -> Result<FeatureSequence> {
        self.run(store, &self.emotion, clip, target_t)
    }

    /// Categorical emotion distribution of length `M`.
    pub fn classify_emotion(&self, store: &ParamStore, emo_features: &FeatureSequence) -> Vec<f64> {
        let pooled = emo_features
            .values()
            .mean_axis(ndarray::Axis(0))
            .expect("feature sequences are nonempty")
            .insert_axis(ndarray::Axis(0));
        let mut logits = pooled.dot(store.get(self.classifier.weight));
        if let Some(b) = self.classifier.bias {
            logits += store.get(b);
        }
        softmax_rows(&logits).row(0).to_vec()
    }
}
