use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use super::policy::{PolicyKind, TrainingPolicy};
use crate::encoders::AdapterSpec;
use crate::error::{Error, Result};
use crate::model::{LossSettings, ViewMode};
use crate::objectives::{TaskMask, VlcMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSetting {
    #[default]
    Multi,
    Single,
}

/// Flat training configuration; one key per field, all optional in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub policy: PolicyKind,
    pub adapter_rank: usize,
    /// Defaults to `adapter_rank`, giving a net adapter scale of 1.
    pub adapter_alpha: Option<f64>,
    pub task_mask: TaskMask,
    pub view_mode: ViewSetting,
    pub single_view_index: usize,
    pub vlc_mode: VlcMode,
    pub vlc_temperature: f64,
    pub prefix_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 60,
            learning_rate: 5e-3,
            weight_decay: 5e-4,
            seed: 0,
            policy: PolicyKind::DomainAdapter,
            adapter_rank: 4,
            adapter_alpha: None,
            task_mask: TaskMask::ALL,
            view_mode: ViewSetting::Multi,
            single_view_index: 0,
            vlc_mode: VlcMode::Infonce,
            vlc_temperature: 0.07,
            prefix_tokens: 4,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Load {
            path: path.to_owned(),
            reason: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.prefix_tokens == 0 || self.adapter_rank == 0 {
            return Err(Error::Config(
                "batch_size, epochs, prefix_tokens, and adapter_rank must be positive".into(),
            ));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("vlc_temperature", self.vlc_temperature),
            ("adapter_alpha", self.alpha()),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        self.task_mask.validate()
    }

    pub fn alpha(&self) -> f64 {
        self.adapter_alpha.unwrap_or(self.adapter_rank as f64)
    }

    pub fn adapter(&self) -> AdapterSpec {
        AdapterSpec {
            rank: self.adapter_rank,
            alpha: self.alpha(),
        }
    }

    pub fn view_mode(&self) -> ViewMode {
        match self.view_mode {
            ViewSetting::Multi => ViewMode::Multi,
            ViewSetting::Single => ViewMode::Single(self.single_view_index),
        }
    }

    pub fn policy(&self) -> TrainingPolicy {
        TrainingPolicy::new(self.policy)
    }

    pub fn optimizer(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn losses(&self) -> LossSettings {
        LossSettings {
            mask: self.task_mask,
            vlc_mode: self.vlc_mode,
            vlc_temperature: self.vlc_temperature,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_key() {
        let text = r#"
batch_size = 32
epochs = 5
learning_rate = 0.001
weight_decay = 0.0
seed = 9
policy = "partial_param"
adapter_rank = 8
adapter_alpha = 16.0
task_mask = ["LGR", "VGC"]
view_mode = "single"
single_view_index = 2
vlc_mode = "literal"
vlc_temperature = 0.1
prefix_tokens = 2
"#;
        let c = TrainConfig::from_toml_str(text).unwrap();
        assert_eq!(c.policy, PolicyKind::Partial);
        assert_eq!(c.view_mode(), ViewMode::Single(2));
        assert_eq!(c.adapter().scale(), 2.0);
        assert!(c.task_mask.vgc && !c.task_mask.vlc);
        let back = TrainConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn defaults_and_rejections() {
        let c = TrainConfig::from_toml_str("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(c.alpha(), 4.0);
        assert!(TrainConfig::from_toml_str("bogus = 1").is_err());
        assert!(TrainConfig::from_toml_str("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml_str("task_mask = [\"VLC\"]").is_err());
        assert!(TrainConfig::from_toml_str("policy = \"half\"").is_err());
    }
}
