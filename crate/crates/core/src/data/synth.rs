//! Synthetic factorized corpus.
//!
//! Audio is a content-coded harmonic carrier (one fundamental per "phoneme"
//! segment) multiplied by an emotion-coded slow amplitude envelope. Ground
//! truth coefficients are pure functions of the factors:
//!
//! * lip channels depend on `(content_id, t)` only,
//! * brow/eye channels depend on `(emotion_id, level, t)` only,
//! * the remaining channels depend on `(speaker_id, t)` only.
//!
//! The `seed` only perturbs the audio (carrier phases and additive noise), so
//! every combination of factors has an exact, seed-independent target.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::channels::{BROW_EYE_CHANNELS, LIP_CHANNELS, OTHER_CHANNELS};
use super::{AudioClip, BlendshapeSequence, ClipLabels, FPS, N_BLENDSHAPES, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Seconds per phoneme segment.
const SEGMENT_S: f64 = 0.1;
const N_PHONEMES: u64 = 6;
const HARMONIC_AMPS: [f64; 4] = [1.0, 0.5, 0.3, 0.2];
const LEVEL_GAIN: [f64; 2] = [0.5, 1.0];
const LEVEL_DEPTH: [f64; 2] = [0.5, 0.9];
const NOISE_AMP: f64 = 0.01;
const OUTPUT_GAIN: f64 = 0.3;

/// Valid id ranges for the factor labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorRanges {
    pub n_contents: usize,
    pub n_emotions: usize,
    pub n_levels: usize,
    pub n_speakers: usize,
}

impl Default for FactorRanges {
    fn default() -> Self {
        Self {
            n_contents: 3,
            n_emotions: 3,
            n_levels: 2,
            n_speakers: 2,
        }
    }
}

impl FactorRanges {
    pub fn check(&self, labels: &ClipLabels) -> Result<()> {
        if labels.content_id >= self.n_contents {
            return Err(Error::range("content_id", labels.content_id, self.n_contents));
        }
        if labels.emotion_id >= self.n_emotions {
            return Err(Error::range("emotion_id", labels.emotion_id, self.n_emotions));
        }
        if labels.level >= self.n_levels.min(2) {
            return Err(Error::range("level", labels.level, self.n_levels.min(2)));
        }
        if labels.speaker_id >= self.n_speakers {
            return Err(Error::range("speaker_id", labels.speaker_id, self.n_speakers));
        }
        Ok(())
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash2(a: u64, b: u64) -> u64 {
    mix(mix(a) ^ b.rotate_left(17))
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn phoneme(content_id: usize, segment: i64) -> u64 {
    hash2(content_id as u64 ^ 0xC0DE, segment as u64) % N_PHONEMES
}

/// Active phonemes and cross-fade weight at time `t` seconds.
fn phoneme_blend(content_id: usize, t: f64) -> (u64, u64, f64) {
    let s = t / SEGMENT_S - 0.5;
    let k0 = s.floor();
    let a = s - k0;
    let w = a * a * (3.0 - 2.0 * a);
    let k0 = k0 as i64;
    (phoneme(content_id, k0), phoneme(content_id, k0 + 1), w)
}

fn lip_pose(phoneme: u64, channel: usize) -> f64 {
    0.9 * unit(hash2(0x11_0000 + phoneme, channel as u64)).powf(1.5)
}

fn brow_pose(emotion_id: usize, channel: usize) -> f64 {
    0.2 + 0.8 * unit(hash2(0x22_0000 + emotion_id as u64, channel as u64))
}

fn emotion_rate_hz(emotion_id: usize) -> f64 {
    1.0 + 1.1 * emotion_id as f64
}

fn emotion_phase(emotion_id: usize) -> f64 {
    0.9 * emotion_id as f64
}

fn emotion_base_amp(emotion_id: usize) -> f64 {
    0.55 + 0.35 * unit(hash2(0x33_0000, emotion_id as u64))
}

/// Slow modulation in `[0, 1]` shared by the audio envelope and the brow targets.
fn emotion_modulation(emotion_id: usize, t: f64) -> f64 {
    0.5 + 0.5 * (TAU * emotion_rate_hz(emotion_id) * t + emotion_phase(emotion_id)).sin()
}

fn phoneme_f0(phoneme: u64, speaker_id: usize) -> f64 {
    (140.0 + 60.0 * phoneme as f64) * (1.0 + 0.04 * speaker_id as f64)
}

/// Deterministic ground-truth coefficients for `frames` frames of the given factors.
pub(crate) fn target_coeffs(labels: &ClipLabels, frames: usize) -> Array2<f64> {
    let mut out = Array2::zeros((frames, N_BLENDSHAPES));
    let gain = LEVEL_GAIN[labels.level.min(1)];
    for t in 0..frames {
        let time = t as f64 / FPS as f64;
        let (p0, p1, w) = phoneme_blend(labels.content_id, time);
        for ch in LIP_CHANNELS {
            out[[t, ch]] = (1.0 - w) * lip_pose(p0, ch) + w * lip_pose(p1, ch);
        }
        let m = emotion_modulation(labels.emotion_id, time);
        for ch in BROW_EYE_CHANNELS {
            out[[t, ch]] = brow_pose(labels.emotion_id, ch) * gain * (0.4 + 0.6 * m);
        }
        for ch in OTHER_CHANNELS {
            let base = 0.1 + 0.4 * unit(hash2(0x44_0000 + labels.speaker_id as u64, ch as u64));
            let wobble = (TAU * 0.5 * time + labels.speaker_id as f64 + ch as f64).sin();
            out[[t, ch]] = base + 0.1 * wobble;
        }
    }
    out
}

fn synth_audio(labels: &ClipLabels, n_samples: usize, seed: u64) -> Vec<f64> {
    let key = hash2(
        hash2(seed, labels.content_id as u64),
        hash2(
            labels.emotion_id as u64,
            hash2(labels.level as u64, labels.speaker_id as u64),
        ),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let phases: Vec<f64> = HARMONIC_AMPS.iter().map(|_| rng.gen::<f64>() * TAU).collect();
    let depth = LEVEL_DEPTH[labels.level.min(1)];
    let base = emotion_base_amp(labels.emotion_id);
    let norm: f64 = HARMONIC_AMPS.iter().sum();

    let harmonic = |p: u64, t: f64| -> f64 {
        let f0 = phoneme_f0(p, labels.speaker_id);
        HARMONIC_AMPS
            .iter()
            .zip(&phases)
            .enumerate()
            .map(|(h, (a, ph))| a * (TAU * (h + 1) as f64 * f0 * t + ph).sin())
            .sum::<f64>()
            / norm
    };

    (0..n_samples)
        .map(|n| {
            let t = n as f64 / SAMPLE_RATE as f64;
            let (p0, p1, w) = phoneme_blend(labels.content_id, t);
            let carrier = (1.0 - w) * harmonic(p0, t) + w * harmonic(p1, t);
            let m = emotion_modulation(labels.emotion_id, t);
            let envelope = base * (1.0 + depth * (2.0 * m - 1.0));
            OUTPUT_GAIN * envelope * carrier + NOISE_AMP * (2.0 * rng.gen::<f64>() - 1.0)
        })
        .collect()
}

/// Generates one clip and its exact ground-truth track.
pub fn synth_clip(
    labels: ClipLabels,
    duration_s: f64,
    seed: u64,
    ranges: &FactorRanges,
) -> Result<(AudioClip, BlendshapeSequence)> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::Length(format!("duration {duration_s} s must be positive")));
    }
    ranges.check(&labels)?;
    let n_samples = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let frames = (duration_s * FPS as f64).round() as usize;
    if frames == 0 {
        return Err(Error::Length(format!(
            "duration {duration_s} s is shorter than one frame"
        )));
    }
    let clip = AudioClip::new(synth_audio(&labels, n_samples, seed), SAMPLE_RATE, labels)?;
    let target = BlendshapeSequence::new(target_coeffs(&labels, frames))?;
    Ok((clip, target))
}
