use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use emotalk_core::data::corpus::DatasetSpec;
use emotalk_core::data::io::read_mask;
use emotalk_core::model::ModelConfig;
use emotalk_core::rig::{make_synthetic_rig, BlendMode, RigTemplateSet};
use emotalk_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Default output root when neither the config nor a flag names one.
pub const OUT_ENV: &str = "EMOTALK_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    /// Directory written by `gen-data` (or by hand). A synthetic rig is built when unset.
    pub dir: Option<PathBuf>,
    pub vertices: usize,
    pub seed: u64,
    pub mode: BlendMode,
    /// Vertex index files overriding the rig's own masks.
    pub lip_mask: Option<PathBuf>,
    pub eye_forehead_mask: Option<PathBuf>,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            dir: None,
            vertices: 1000,
            seed: 0,
            mode: BlendMode::Delta,
            lip_mask: None,
            eye_forehead_mask: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rig: RigConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.rig.validate_paths()
    }

    /// Output directory: flag, then config, then `$EMOTALK_OUT/<default_leaf>`.
    pub fn out_dir(&self, flag: Option<PathBuf>, default_leaf: &str) -> PathBuf {
        flag.or_else(|| self.out_dir.clone()).unwrap_or_else(|| {
            let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(default_leaf)
        })
    }
}

impl RigConfig {
    pub fn validate_paths(&self) -> Result<()> {
        for p in [&self.dir, &self.lip_mask, &self.eye_forehead_mask]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                bail!("referenced path {} does not exist", p.display());
            }
        }
        Ok(())
    }

    /// Explicit rig dir, then `<data_dir>/rig`, then a synthetic rig; mask files override.
    pub fn load(&self, data_dir: Option<&Path>) -> Result<RigTemplateSet> {
        let fallback = data_dir.map(|d| d.join("rig")).filter(|d| d.is_dir());
        let mut rig = match self.dir.clone().or(fallback) {
            Some(dir) => RigTemplateSet::read_dir(&dir).with_context(|| format!("reading rig {}", dir.display()))?,
            None => make_synthetic_rig(self.vertices, self.seed)?,
        };
        if self.lip_mask.is_some() || self.eye_forehead_mask.is_some() {
            let lip = match &self.lip_mask {
                Some(p) => read_mask(p)?,
                None => rig.lip_mask.clone(),
            };
            let eye = match &self.eye_forehead_mask {
                Some(p) => read_mask(p)?,
                None => rig.eye_forehead_mask.clone(),
            };
            rig = RigTemplateSet::new(
                rig.neutral.clone(),
                rig.templates.clone(),
                rig.faces.clone(),
                lip,
                eye,
                rig.other_mask.clone(),
            )?;
        }
        Ok(rig)
    }
}
