//! Clip, sequence and dataset types plus the synthetic factorized corpus.

mod align;
pub mod channels;
pub mod corpus;
pub mod io;
mod pairs;
mod smoothing;
mod synth;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use align::frames_for_audio;
pub use pairs::{sample_cross_pair, CrossPair, PairSampler};
pub use smoothing::{savgol_matrix, savgol_smooth, savgol_weights};
pub use synth::{synth_clip, FactorRanges};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FPS: u32 = 30;
pub const N_BLENDSHAPES: usize = 52;

/// Factor labels carried by every clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClipLabels {
    pub content_id: usize,
    pub emotion_id: usize,
    pub level: usize,
    pub speaker_id: usize,
}

impl ClipLabels {
    pub fn new(content_id: usize, emotion_id: usize, level: usize, speaker_id: usize) -> Self {
        Self {
            content_id,
            emotion_id,
            level,
            speaker_id,
        }
    }

    pub fn with_content_emotion(self, content_id: usize, emotion_id: usize) -> Self {
        Self {
            content_id,
            emotion_id,
            ..self
        }
    }
}

/// Mono 16 kHz waveform with its factor labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
    pub labels: ClipLabels,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32, labels: ClipLabels) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Config(format!(
                "sample rate {sample_rate} Hz, expected {SAMPLE_RATE} Hz"
            )));
        }
        if samples.is_empty() {
            return Err(Error::Length("audio clip has no samples".into()));
        }
        // at least one visual frame's worth of audio
        if (samples.len() as u64) * (FPS as u64) < sample_rate as u64 {
            return Err(Error::Length(format!(
                "{} samples is shorter than one frame at {FPS} fps",
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("audio sample {i}"),
                value: samples[i],
            });
        }
        Ok(Self {
            samples,
            sample_rate,
            labels,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Visual frame count aligned with this clip.
    pub fn frames(&self) -> usize {
        frames_for_audio(self.samples.len(), self.sample_rate, FPS)
    }
}

/// `T x 52` blendshape coefficients at a fixed frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendshapeSequence {
    coeffs: Array2<f64>,
    fps: u32,
}

impl BlendshapeSequence {
    pub fn new(coeffs: Array2<f64>) -> Result<Self> {
        Self::with_fps(coeffs, FPS)
    }

    pub fn with_fps(coeffs: Array2<f64>, fps: u32) -> Result<Self> {
        if coeffs.ncols() != N_BLENDSHAPES {
            return Err(Error::Shape(format!(
                "blendshape sequence has {} channels, expected {N_BLENDSHAPES}",
                coeffs.ncols()
            )));
        }
        if coeffs.nrows() == 0 {
            return Err(Error::Length("blendshape sequence has no frames".into()));
        }
        Ok(Self { coeffs, fps })
    }

    pub fn coeffs(&self) -> &Array2<f64> {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Array2<f64> {
        self.coeffs
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn frames(&self) -> usize {
        self.coeffs.nrows()
    }

    /// Export clamping into the `[0, 1]` activation range.
    pub fn clamped(&self) -> Self {
        Self {
            coeffs: self.coeffs.mapv(|v| v.clamp(0.0, 1.0)),
            fps: self.fps,
        }
    }
}

/// Frame-aligned `T x D` real features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    values: Array2<f64>,
    fps: f64,
}

impl FeatureSequence {
    pub fn new(values: Array2<f64>, fps: f64) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::Length("feature sequence has no frames".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: "feature sequence".into(),
                value: f64::NAN,
            });
        }
        Ok(Self { values, fps })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// One audio clip with its ground-truth coefficient track.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clip: AudioClip,
    pub target: BlendshapeSequence,
    /// Repetition index within its factor cell.
    pub clip_index: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples whose labels equal `labels`, in dataset order.
    pub fn cell(&self, labels: &ClipLabels) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.clip.labels == *labels)
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of distinct emotion ids present.
    pub fn n_emotions(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.clip.labels.emotion_id + 1)
            .max()
            .unwrap_or(0)
    }
}
