//! Run configuration: one TOML file with `[synth]`, `[train]`, and
//! `[eval]` sections, every field optional, flags overriding file values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use reinpool_core::{Error, Result, SynthConfig, TrainConfig};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Overrides both the generator and trainer seeds when set.
    pub seed: Option<u64>,
    /// Rayon worker count (results are identical at any setting).
    pub threads: Option<usize>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub k: usize,
    pub methods: Vec<String>,
    pub threshold: f64,
    /// Cosine scoring: L2-normalize pooled vectors before ranking.
    pub normalize: bool,
    pub format: String,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            k: 3,
            methods: vec![
                "full-mean".into(),
                "full-max".into(),
                "static-mean".into(),
                "static-max".into(),
                "reinpool-mean".into(),
                "reinpool-max".into(),
            ],
            threshold: 0.5,
            normalize: false,
            format: "table".into(),
        }
    }
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => AppConfig::default(),
        };
        if let Some(seed) = cfg.seed {
            cfg.synth.seed = seed;
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(seed) = seed {
            self.seed = Some(seed);
            self.synth.seed = seed;
            self.train.seed = seed;
        }
    }
}
