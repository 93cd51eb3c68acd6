//! JSON run configuration shared by the command-line entry points.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::FrontendSettings;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Regime};
use crate::trainer::ScheduleConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub frontend: FrontendSettings,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub regime: Regime,
    /// Corpus manifests; relative paths are taken from the config's directory.
    pub manifests: Vec<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            frontend: FrontendSettings::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            seed: 0,
            regime: Regime::Scratch,
            manifests: Vec::new(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Parses, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for m in &mut cfg.manifests {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.model.validate()?;
        self.schedule.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the effective configuration as `dir/config.json`.
    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }
}
