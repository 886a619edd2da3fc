use std::path::PathBuf;

use paec::model::{ModelConfig, Selection};
use paec::train::TrainConfig;
use serde::Deserialize;

use crate::args::{Global, Preset};
use crate::Failure;

/// Optional overrides read from `--config`. Command-line flags win.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelConfig>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub segment_s: Option<f64>,
    pub max_epochs: Option<usize>,
    pub plateau_patience: Option<usize>,
    pub lr_factor: Option<f64>,
    pub shuffle: Option<bool>,
    pub val_fraction: Option<f64>,
    pub duration_s: Option<f64>,
    pub min_enroll_s: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub preset: Preset,
    pub file: FileConfig,
}

pub const DEFAULT_DURATION_S: f64 = 8.0;
pub const DEFAULT_MIN_ENROLL_S: f64 = 10.0;

impl Settings {
    pub fn load(g: &Global) -> Result<Self, Failure> {
        let file = match &g.config {
            None => FileConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
            }
        };
        Ok(Self {
            seed: g.seed,
            out_dir: g.out_dir.clone(),
            preset: g.preset,
            file,
        })
    }

    pub fn model(&self, selection: Selection) -> ModelConfig {
        let base = match &self.file.model {
            Some(m) => m.clone(),
            None => match self.preset {
                Preset::Desk => ModelConfig::desk(selection),
                Preset::Full => ModelConfig::full(selection),
            },
        };
        ModelConfig {
            selection,
            init_seed: self.seed,
            ..base
        }
    }

    pub fn train_config(&self, selection: Selection) -> TrainConfig {
        let f = &self.file;
        let mut c = TrainConfig::new(self.model(selection));
        c.seed = self.seed;
        c.lr = f.lr.unwrap_or(c.lr);
        c.batch_size = f.batch_size.unwrap_or(c.batch_size);
        c.segment_s = f.segment_s.unwrap_or(c.segment_s);
        c.max_epochs = f.max_epochs.unwrap_or(c.max_epochs);
        c.plateau_patience = f.plateau_patience.unwrap_or(c.plateau_patience);
        c.lr_factor = f.lr_factor.unwrap_or(c.lr_factor);
        c.shuffle = f.shuffle.unwrap_or(c.shuffle);
        c.val_fraction = f.val_fraction.unwrap_or(c.val_fraction);
        c
    }

    pub fn duration_s(&self, flag: Option<f64>) -> f64 {
        flag.or(self.file.duration_s).unwrap_or(DEFAULT_DURATION_S)
    }

    pub fn min_enroll_s(&self, flag: Option<f64>) -> f64 {
        flag.or(self.file.min_enroll_s).unwrap_or(DEFAULT_MIN_ENROLL_S)
    }

    pub fn ensure_out_dir(&self) -> Result<(), Failure> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", self.out_dir.display())))
    }
}
