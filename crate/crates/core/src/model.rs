//! Full model: both extractors, the classifier head and the fusion decoder,
//! with the cross-reconstruction objective over [`CrossPair`]s.

use std::collections::HashMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, ParamStore, Var};
use crate::data::{AudioClip, BlendshapeSequence, CrossPair, FeatureSequence};
use crate::decoder::{FusionConfig, FusionDecoder};
use crate::encoders::{AudioEncoders, EncoderConfig, Extractor};
use crate::error::{Error, Result};
use crate::losses::{
    classification_graph, mean_square_diff_graph, total_loss, velocity_graph, LossReport, LossWeights,
};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            fusion: FusionConfig::desk(),
        }
    }

    pub fn full() -> Self {
        Self {
            encoder: EncoderConfig::full(),
            fusion: FusionConfig::full(),
        }
    }

    /// Smallest configuration with every component present.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                d_model: 16,
                n_blocks: 1,
                n_heads: 4,
                d_inner: 32,
                conv_frontend_frozen: true,
                n_emotions: 3,
                frontend_channels: 8,
                pos_conv_kernel: 3,
            },
            fusion: FusionConfig {
                d_emotion: 4,
                d_content: 4,
                d_style: 4,
                d_level: 4,
                d_fused: 16,
                n_heads: 4,
                ppe_period: 30,
                n_styles: 24,
                n_levels: 2,
                n_decoder_blocks: 1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: AudioEncoders,
    pub decoder: FusionDecoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Branch {
    Content,
    Emotion,
}

/// Memo of frozen front-end outputs keyed by waveform, branch and frame count.
#[derive(Clone, Debug, Default)]
pub struct FrontendCache {
    entries: HashMap<(Branch, usize, u64, usize), Array2<f64>>,
}

impl FrontendCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

fn waveform_key(samples: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for s in samples {
        h ^= s.to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Symbolic loss terms of one pair.
pub struct PairTerms {
    pub cross: Var,
    pub self_rec: Var,
    pub velocity: Var,
    pub classification: Var,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoders = AudioEncoders::new(&mut store, &mut rng, &config.encoder)?;
        let decoder = FusionDecoder::new(&mut store, &mut rng, &config.fusion, config.encoder.d_model)?;
        Ok(Self {
            config: config.clone(),
            store,
            encoders,
            decoder,
        })
    }

    fn extractor(&self, branch: Branch) -> &Extractor {
        match branch {
            Branch::Content => &self.encoders.content,
            Branch::Emotion => &self.encoders.emotion,
        }
    }

    fn features(
        &self,
        g: &mut Graph,
        branch: Branch,
        clip: &AudioClip,
        t: usize,
        cache: &mut FrontendCache,
    ) -> Result<Var> {
        let ex = self.extractor(branch);
        if ex.is_frozen(&self.store) {
            let key = (branch, clip.len(), waveform_key(clip.samples()), t);
            if let std::collections::hash_map::Entry::Vacant(e) = cache.entries.entry(key) {
                let v = ex.aligned_frontend_values(&self.store, clip.samples(), t)?;
                e.insert(v);
            }
            let aligned = g.constant(cache.entries[&key].clone());
            Ok(ex.encode(g, aligned))
        } else {
            ex.forward(g, clip.samples(), t, None)
        }
    }

    fn decode(&self, g: &mut Graph, emo: Var, content: Var, style: usize, level: usize) -> Result<Var> {
        let fused = self.decoder.fuse_graph(g, emo, content, style, level)?;
        Ok(self.decoder.decode_graph(g, fused, emo)?.output)
    }

    /// Records both cross branches, the self branch, velocity on all three
    /// and classification of both clips.
    pub fn pair_terms(&self, g: &mut Graph, pair: &CrossPair, cache: &mut FrontendCache) -> Result<PairTerms> {
        let (a, b) = (&pair.audio_a, &pair.audio_b);
        if (a.labels.speaker_id, a.labels.level) != (b.labels.speaker_id, b.labels.level) {
            return Err(Error::Config("pair clips must share speaker and level".into()));
        }
        let (style, level) = (a.labels.speaker_id, a.labels.level);
        let mut memo: HashMap<(bool, Branch, usize), Var> = HashMap::new();
        let mut feat = |g: &mut Graph, first: bool, branch: Branch, t: usize| -> Result<Var> {
            if let Some(v) = memo.get(&(first, branch, t)) {
                return Ok(*v);
            }
            let v = self.features(g, branch, if first { a } else { b }, t, cache)?;
            memo.insert((first, branch, t), v);
            Ok(v)
        };

        let branches = [
            // (content from a?, emotion from a?, target)
            (true, false, &pair.gt_c1e1),
            (false, true, &pair.gt_c2e2),
            (true, true, &pair.gt_c1e2),
        ];
        let mut recon = Vec::new();
        let mut vel = Vec::new();
        for (content_a, emotion_a, target) in branches {
            let t = target.frames();
            let c = feat(g, content_a, Branch::Content, t)?;
            let e = feat(g, emotion_a, Branch::Emotion, t)?;
            let pred = self.decode(g, e, c, style, level)?;
            let gt = g.constant(target.coeffs().clone());
            recon.push(mean_square_diff_graph(g, pred, gt));
            if t < 2 {
                return Err(Error::Length(format!("velocity loss needs at least 2 frames, got {t}")));
            }
            vel.push(velocity_graph(g, pred, gt));
        }
        let cross = g.add(recon[0], recon[1]);
        let v01 = g.add(vel[0], vel[1]);
        let velocity = g.add(v01, vel[2]);

        let ta = pair.gt_c2e2.frames();
        let tb = pair.gt_c1e1.frames();
        let ea = feat(g, true, Branch::Emotion, ta)?;
        let eb = feat(g, false, Branch::Emotion, tb)?;
        let pa = self.encoders.classify_graph(g, ea);
        let pb = self.encoders.classify_graph(g, eb);
        let la = classification_graph(g, pa, &[a.labels.emotion_id])?;
        let lb = classification_graph(g, pb, &[b.labels.emotion_id])?;
        let cls = g.add(la, lb);
        Ok(PairTerms {
            cross,
            self_rec: recon[2],
            velocity,
            classification: g.scale(cls, 0.5),
        })
    }

    /// Batch-mean loss report and gradients over `pairs`.
    pub fn loss_and_gradients(
        &self,
        pairs: &[CrossPair],
        weights: &LossWeights,
        cache: &mut FrontendCache,
    ) -> Result<(LossReport, Gradients)> {
        if pairs.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let scale = 1.0 / pairs.len() as f64;
        let mut grads = Gradients::zeros_like(&self.store);
        let mut sums = [0.0; 4];
        for pair in pairs {
            let mut g = Graph::new(&self.store);
            let terms = self.pair_terms(&mut g, pair, cache)?;
            let parts = [terms.cross, terms.self_rec, terms.velocity, terms.classification];
            let values: Vec<f64> = parts.iter().map(|v| g.scalar(*v)).collect();
            total_loss(values[0], values[1], values[2], values[3], weights)?;
            for (s, v) in sums.iter_mut().zip(&values) {
                *s += v * scale;
            }
            let total = g.weighted_sum(&[
                (weights.cross, terms.cross),
                (weights.self_rec, terms.self_rec),
                (weights.velocity, terms.velocity),
                (weights.classification, terms.classification),
            ]);
            grads.accumulate(&g.backward(total), scale);
        }
        let report = total_loss(sums[0], sums[1], sums[2], sums[3], weights)?;
        Ok((report, grads))
    }

    /// Batch-mean loss report without gradients.
    pub fn loss(&self, pairs: &[CrossPair], weights: &LossWeights, cache: &mut FrontendCache) -> Result<LossReport> {
        let mut sums = [0.0; 4];
        for pair in pairs {
            let mut g = Graph::new(&self.store);
            let t = self.pair_terms(&mut g, pair, cache)?;
            for (s, v) in sums.iter_mut().zip([t.cross, t.self_rec, t.velocity, t.classification]) {
                *s += g.scalar(v) / pairs.len() as f64;
            }
        }
        total_loss(sums[0], sums[1], sums[2], sums[3], weights)
    }

    /// Content and emotion features of one clip at `t` frames.
    pub fn clip_features(
        &self,
        clip: &AudioClip,
        t: usize,
        cache: &mut FrontendCache,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut g = Graph::new(&self.store);
        let c = self.features(&mut g, Branch::Content, clip, t, cache)?;
        let e = self.features(&mut g, Branch::Emotion, clip, t, cache)?;
        Ok((g.value(c).clone(), g.value(e).clone()))
    }

    /// Decodes a blendshape track from precomputed feature streams.
    pub fn decode_features(
        &self,
        emo: &Array2<f64>,
        content: &Array2<f64>,
        style_id: usize,
        level_id: usize,
    ) -> Result<Array2<f64>> {
        let mut g = Graph::new(&self.store);
        let (e, c) = (g.constant(emo.clone()), g.constant(content.clone()));
        let out = self.decode(&mut g, e, c, style_id, level_id)?;
        Ok(g.value(out).clone())
    }

    /// Blendshape track for one clip: both extractors on the same audio.
    pub fn infer(&self, clip: &AudioClip, level_id: usize, style_id: usize, clamp: bool) -> Result<BlendshapeSequence> {
        self.decoder.check_ids(style_id, level_id)?;
        let t = clip.frames();
        let (c, e) = self.clip_features(clip, t, &mut FrontendCache::new())?;
        let seq = BlendshapeSequence::new(self.decode_features(&e, &c, style_id, level_id)?)?;
        Ok(if clamp { seq.clamped() } else { seq })
    }

    /// Emotion class distribution of a clip.
    pub fn classify(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        let feats = self.encoders.extract_emotion(&self.store, clip, clip.frames())?;
        Ok(self.encoders.classify_emotion(&self.store, &feats))
    }

    pub fn emotion_features(&self, clip: &AudioClip) -> Result<FeatureSequence> {
        self.encoders.extract_emotion(&self.store, clip, clip.frames())
    }
}
