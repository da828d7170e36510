//! Synthetic dataset grids and their on-disk layout.
//!
//! A dataset directory holds `manifest.json`, a `clips/` folder with one WAV
//! and one blendshape CSV per clip, and `channel_masks/` with the regional
//! channel grouping.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::channels::Region;
use super::io::{read_blendshape_csv, read_wav, write_blendshape_csv, write_mask, write_wav};
use super::{savgol_smooth, synth_clip, ClipLabels, Dataset, FactorRanges, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "emotalk-dataset";
pub const MANIFEST_VERSION: u32 = 1;

/// Grid of factor cells with a number of clip repetitions per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub ranges: FactorRanges,
    /// Training repetitions per cell.
    pub clips_per_cell: usize,
    /// Extra held-out repetitions per cell.
    pub heldout_per_cell: usize,
    pub duration_s: f64,
    pub seed: u64,
    /// Apply Savitzky-Golay (5, 2) smoothing to the targets.
    pub smooth: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            ranges: FactorRanges::default(),
            clips_per_cell: 1,
            heldout_per_cell: 1,
            duration_s: 1.0,
            seed: 0,
            smooth: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub wav: String,
    pub csv: String,
    pub labels: ClipLabels,
    pub clip_index: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub spec: DatasetSpec,
    pub clips: Vec<ManifestEntry>,
}

fn clip_seed(base: u64, clip_index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(clip_index as u64)
}

fn cell_labels(ranges: &FactorRanges) -> Vec<ClipLabels> {
    let mut out = Vec::new();
    for speaker in 0..ranges.n_speakers {
        for level in 0..ranges.n_levels.min(2) {
            for content in 0..ranges.n_contents {
                for emotion in 0..ranges.n_emotions {
                    out.push(ClipLabels::new(content, emotion, level, speaker));
                }
            }
        }
    }
    out
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let r = &self.ranges;
        if r.n_contents == 0 || r.n_emotions == 0 || r.n_levels == 0 || r.n_speakers == 0 {
            return Err(Error::Config("every factor needs at least one value".into()));
        }
        if r.n_levels > 2 {
            return Err(Error::Config(format!("{} emotion levels, at most 2", r.n_levels)));
        }
        if self.clips_per_cell == 0 {
            return Err(Error::Config("clips_per_cell must be at least 1".into()));
        }
        if self.duration_s.is_nan() || self.duration_s <= 0.0 {
            return Err(Error::Config("duration_s must be positive".into()));
        }
        Ok(())
    }

    /// Builds every clip of the grid in memory.
    pub fn generate(&self) -> Result<SplitDataset> {
        Ok(self.generate_with_manifest()?.0)
    }

    fn generate_with_manifest(&self) -> Result<(SplitDataset, Vec<ManifestEntry>)> {
        self.validate()?;
        let mut out = SplitDataset::default();
        let mut entries = Vec::new();
        let total = self.clips_per_cell + self.heldout_per_cell;
        for labels in cell_labels(&self.ranges) {
            for k in 0..total {
                let (clip, mut target) = synth_clip(labels, self.duration_s, clip_seed(self.seed, k), &self.ranges)?;
                if self.smooth {
                    target = savgol_smooth(&target, 5, 2)?;
                }
                let split = if k < self.clips_per_cell {
                    Split::Train
                } else {
                    Split::Test
                };
                let stem = format!(
                    "c{}_e{}_l{}_s{}_k{}",
                    labels.content_id, labels.emotion_id, labels.level, labels.speaker_id, k
                );
                entries.push(ManifestEntry {
                    wav: format!("clips/{stem}.wav"),
                    csv: format!("clips/{stem}.csv"),
                    labels,
                    clip_index: k,
                    split,
                });
                let sample = Sample {
                    clip,
                    target,
                    clip_index: k,
                };
                match split {
                    Split::Train => out.train.samples.push(sample),
                    Split::Test => out.test.samples.push(sample),
                }
            }
        }
        Ok((out, entries))
    }

    /// Generates the grid and writes it under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        let (data, entries) = self.generate_with_manifest()?;
        fs::create_dir_all(dir.join("clips")).map_err(|e| Error::io(dir, e))?;
        fs::create_dir_all(dir.join("channel_masks")).map_err(|e| Error::io(dir, e))?;
        let mut train = data.train.samples.iter();
        let mut test = data.test.samples.iter();
        for entry in &entries {
            let sample = match entry.split {
                Split::Train => train.next(),
                Split::Test => test.next(),
            }
            .expect("manifest and samples are built together");
            write_wav(&dir.join(&entry.wav), &sample.clip)?;
            write_blendshape_csv(&dir.join(&entry.csv), &sample.target)?;
        }
        for (name, region) in [
            ("lip.txt", Region::Lip),
            ("brow_eye.txt", Region::BrowEye),
            ("other.txt", Region::Other),
        ] {
            let channels: Vec<usize> = region.channels().collect();
            write_mask(&dir.join("channel_masks").join(name), &channels)?;
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            spec: self.clone(),
            clips: entries,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Format {
            path,
            msg: format!("unknown format tag {:?}", manifest.format),
        });
    }
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version {
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }
    Ok(manifest)
}

/// Loads a dataset directory written by [`DatasetSpec::write`].
pub fn read_dataset(dir: &Path) -> Result<(Manifest, SplitDataset)> {
    let manifest = read_manifest(dir)?;
    let mut out = SplitDataset::default();
    for entry in &manifest.clips {
        let sample = Sample {
            clip: read_wav(&dir.join(&entry.wav), entry.labels)?,
            target: read_blendshape_csv(&dir.join(&entry.csv))?,
            clip_index: entry.clip_index,
        };
        match entry.split {
            Split::Train => out.train.samples.push(sample),
            Split::Test => out.test.samples.push(sample),
        }
    }
    Ok((manifest, out))
}
