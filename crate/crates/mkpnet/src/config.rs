//! Run configuration: one JSON file covering model, trainer, data, ablation
//! and enrichment settings. Unknown keys are rejected; omitted keys take the
//! documented defaults, and the fully resolved configuration is echoed so a
//! run is reproducible from its own output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SynthSpec, Task};
use crate::error::{Error, Result};
use crate::model::{AblationConfig, ModelConfig};
use crate::trainer::TrainerConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub ablation: AblationConfig,
    pub data: DataConfig,
    pub enrichment: EnrichmentConfig,
}

/// Where training/evaluation data comes from: a dataset manifest on disk,
/// or the synthetic generator when no manifest is given.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub synth: SynthSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnrichmentConfig {
    /// Tier name for graph views: "core", "high" or "full".
    pub tier: String,
    pub task: Task,
}

impl Default for EnrichmentConfig {
    fn default() -> Self {
        EnrichmentConfig { tier: "full".into(), task: Task::Ere }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.heads == 0 || m.d_model % m.heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model ({}) must be divisible by heads ({})",
                m.d_model, m.heads
            )));
        }
        if m.layers == 0 {
            return Err(Error::Invalid("layers must be >= 1".into()));
        }
        if m.max_len < 5 {
            return Err(Error::Invalid("max_len must be >= 5".into()));
        }
        if m.vocab_cap <= 4 {
            return Err(Error::Invalid("vocab_cap must exceed the 4 reserved tokens".into()));
        }
        self.trainer.validate()?;
        self.ablation.validate()?;
        crate::enrich::Tier::parse(&self.enrichment.tier)?;
        if !(0.0..0.5).contains(&self.data.synth.noise_rate) {
            return Err(Error::Invalid(format!(
                "noise_rate must be in [0, 0.5), got {}",
                self.data.synth.noise_rate
            )));
        }
        Ok(())
    }

    /// Fully resolved configuration as pretty JSON (every field present).
    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"trainer": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.trainer.epochs, 3);
        assert_eq!(cfg.trainer.batch_size, TrainerConfig::default().batch_size);
        assert_eq!(cfg.model.d_model, ModelConfig::default().d_model);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trainr": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"trainer": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn resolved_json_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_pretty_json();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.trainer.alpha, cfg.trainer.alpha);
        assert!(text.contains("\"lambda\""));
    }

    #[test]
    fn invalid_settings_rejected() {
        let mut cfg = RunConfig::default();
        cfg.model.heads = 3; // 64 % 3 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.enrichment.tier = "bogus".into();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.data.synth.noise_rate = 0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn load_reports_missing_file_as_data_error() {
        let err = RunConfig::load(Path::new("/nonexistent/config.json")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
