//! Experiment configuration loaded from TOML. See `docs/config.md` for the
//! schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, HeadConfig};
use crate::clip::ExternalConfig;
use crate::error::{Error, Result};
use crate::interaction::InteractionConfig;
use crate::isfc::IsfcConfig;
use crate::types::{TrainConfig, DEFAULT_RESOLUTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipBackendKind {
    Real,
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipConfig {
    pub backend: ClipBackendKind,
    /// Recorded embeddings; without one every embedding is synthesised.
    pub fixture: Option<PathBuf>,
    /// Embedding width when no fixture file supplies it.
    pub dim: usize,
    /// Synthesise embeddings missing from the fixture file instead of failing.
    pub synthesize_missing: bool,
    pub external: ExternalConfig,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            backend: ClipBackendKind::Fixture,
            fixture: None,
            dim: 512,
            synthesize_missing: true,
            external: ExternalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square input size after ingestion.
    pub resolution: usize,
    /// Coarse-mask side is `resolution / coarse_stride`.
    pub coarse_stride: usize,
    pub backbone: BackboneSpec,
    pub isfc: IsfcConfig,
    pub interaction: InteractionConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            coarse_stride: 16,
            backbone: BackboneSpec::default(),
            isfc: IsfcConfig::default(),
            interaction: InteractionConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn coarse_size(&self) -> (usize, usize) {
        let s = (self.resolution / self.coarse_stride).max(1);
        (s, s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub clip: ClipConfig,
    pub train_manifest: Option<PathBuf>,
    pub eval_manifests: Vec<PathBuf>,
    pub output_dir: PathBuf,
    /// Save an intermediate checkpoint every this many steps; 0 saves only
    /// the final one.
    pub checkpoint_every: usize,
    /// Images per evaluation set.
    pub n_eval: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            clip: ClipConfig::default(),
            train_manifest: None,
            eval_manifests: Vec::new(),
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
            n_eval: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `path` and resolves every relative path against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serialisable config")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.train_manifest.as_mut() {
            fix(p);
        }
        self.eval_manifests.iter_mut().for_each(fix);
        fix(&mut self.output_dir);
        if let Some(p) = self.clip.fixture.as_mut() {
            fix(p);
        }
        if let Some(p) = self.model.backbone.weights.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.backbone.validate()?;
        if self.model.resolution == 0 || self.model.coarse_stride == 0 {
            return Err(Error::Config("resolution and coarse_stride must be positive".into()));
        }
        if self.n_eval == 0 {
            return Err(Error::Config("n_eval must be positive".into()));
        }
        if self.clip.fixture.is_none() && self.clip.dim == 0 {
            return Err(Error::Config("clip.dim must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            "train_manifest = \"data/train.txt\"\noutput_dir = \"out\"\n[train]\nk = 3\nlambda1 = 0.5\n[model]\nresolution = 64\n[clip]\ndim = 32\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.train.k, 3);
        assert_eq!(cfg.train.lambda2, 1.0);
        assert_eq!(cfg.model.coarse_size(), (4, 4));
        assert_eq!(cfg.train_manifest.unwrap(), dir.path().join("data/train.txt"));
        assert_eq!(cfg.output_dir, dir.path().join("out"));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(ExperimentConfig::from_toml("[train]\nk = \"x\"").is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.train.k = 0;
        assert!(cfg.validate().is_err());
        cfg.train.k = 5;
        cfg.train.lambda2 = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shipped_example_parses() {
        let cfg = ExperimentConfig::from_toml(include_str!("../../../../configs/example.toml")).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.resolution, 64);
        assert_eq!(cfg.train.optimizer.lr(), 0.003);
    }
}
