//! TOML run configuration. Precedence, lowest first: preset defaults, the
//! `--config` file, then command-line flags.

use std::path::Path;

use likenet_core::model::PresetOptions;
use likenet_core::{Error, Result, TrainConfig};
use serde::{Deserialize, Serialize};

/// Contents of a `--config` file.
///
/// ```toml
/// [train]
/// learning_rate = 0.01
/// epochs = 30
///
/// [model]
/// input_side = 64
/// ```
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default)]
    pub model: ModelOverrides,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }
}

/// Optimiser settings that may be overridden; unset fields keep the preset value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub l2: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub dropout_enabled: Option<bool>,
    pub shuffle: Option<bool>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f {
                    cfg.$f = v;
                }
            )*};
        }
        set!(
            learning_rate,
            momentum,
            l2,
            epochs,
            batch_size,
            dropout_enabled,
            shuffle
        );
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub input_side: Option<usize>,
    pub width_divisor: Option<usize>,
}

impl ModelOverrides {
    pub fn apply(&self, opts: &mut PresetOptions) {
        if let Some(s) = self.input_side {
            opts.input_side = s;
        }
        if let Some(d) = self.width_divisor {
            opts.width_divisor = d;
        }
    }
}

/// Resolves the optimiser settings for a run from its three layers.
pub fn resolve_train(
    base: TrainConfig,
    file: &FileConfig,
    flags: &TrainOverrides,
    seed: u64,
) -> Result<TrainConfig> {
    let mut cfg = base;
    file.train.apply(&mut cfg);
    flags.apply(&mut cfg);
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beats_preset() {
        let file: FileConfig =
            toml::from_str("[train]\nepochs = 7\nlearning_rate = 0.5\n[model]\ninput_side = 64\n")
                .unwrap();
        let flags = TrainOverrides {
            epochs: Some(3),
            ..Default::default()
        };
        let cfg = resolve_train(TrainConfig::gender(), &file, &flags, 9).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.learning_rate, 0.5);
        assert_eq!(cfg.batch_size, 50);
        assert_eq!(cfg.seed, 9);
        let mut opts = PresetOptions::default();
        file.model.apply(&mut opts);
        assert_eq!(opts.input_side, 64);
        assert_eq!(opts.width_divisor, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[train]\nlr = 1.0\n").is_err());
        assert!(toml::from_str::<FileConfig>("[optim]\n").is_err());
    }

    #[test]
    fn invalid_result_is_a_config_error() {
        let flags = TrainOverrides {
            batch_size: Some(0),
            ..Default::default()
        };
        let err =
            resolve_train(TrainConfig::default(), &FileConfig::default(), &flags, 0).unwrap_err();
        assert_eq!(err.kind(), "config");
    }
}
