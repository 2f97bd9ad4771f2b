//! Run manifests: the effective configuration of a command, written next to
//! every artifact it produces and accepted back through `--config`.

use std::path::{Path, PathBuf};

use fmpestf::data::{make_windows, split_chronological, split_sizes, Series, SynthConfig};
use fmpestf::{Ablation, ModelConfig, Normalizer, SampleWindow, TrainConfig};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub series: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    /// Train, validation and test fractions of the window sequence.
    pub split: [f64; 3],
    /// Window stride inside the train and validation ranges. Test always uses every window.
    pub stride: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            series: None,
            adjacency: None,
            split: [0.6, 0.2, 0.2],
            stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// Master seed; copied into the model, training and synthesis seeds.
    pub seed: u64,
    pub threads: usize,
    pub ablate: Option<Ablation>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
    pub synth: Option<SynthConfig>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            threads: 1,
            ablate: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataSpec::default(),
            synth: None,
            checkpoint: None,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    fmpestf::Error::Io {
        path: path.to_path_buf(),
        source,
    }
    .into()
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(fmpestf::Error::from)?;
        std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
    }

    /// Pushes the master seed into every seeded component.
    pub fn propagate_seed(&mut self) {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        if let Some(s) = &mut self.synth {
            s.seed = self.seed;
        }
    }

    pub fn series_path(&self) -> Result<&Path> {
        self.data
            .series
            .as_deref()
            .ok_or_else(|| CliError::Config("no series file given (use --series or a config with data.series)".into()))
    }

    /// Model config for `series`: shape fields come from the data, the
    /// ablation (if any) is applied, and the result is validated.
    pub fn model_for(&self, series: &Series) -> Result<ModelConfig> {
        let mut cfg = self.model.clone();
        cfg.nodes = series.nodes();
        cfg.in_channels = series.channels();
        cfg.slots_per_day = series.slots_per_day;
        cfg.seed = self.seed;
        if let Some(a) = self.ablate {
            cfg = a.apply(&cfg);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.stride == 0 {
            return Err(CliError::Config("data.stride must be positive".into()));
        }
        self.train.validate()?;
        Ok(())
    }
}

pub fn canonical(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| io_err(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Normalized train, validation and test windows.
pub struct Windows {
    pub train: Vec<SampleWindow>,
    pub val: Vec<SampleWindow>,
    pub test: Vec<SampleWindow>,
    pub normalizer: Normalizer,
    /// First step after the last training target.
    pub train_end: usize,
}

/// Chronological split of all stride-1 windows. Histories are normalized with
/// `fixed` when given (a checkpoint's statistics), else with statistics of the
/// training range.
pub fn prepare_windows(
    series: &Series,
    cfg: &ModelConfig,
    data: &DataSpec,
    fixed: Option<&Normalizer>,
) -> Result<Windows> {
    let raw = make_windows(series, cfg.history, cfg.horizon, 1)?;
    let ratios = (data.split[0], data.split[1], data.split[2]);
    let (n_train, n_val, _) = split_sizes(raw.len(), ratios);
    let normalizer = match fixed {
        Some(n) => n.clone(),
        None => {
            let split = split_chronological(raw.clone(), ratios)?;
            for w in &split.warnings {
                warn!("{w}");
            }
            split.normalizer
        }
    };
    if n_train == 0 || n_val == 0 || n_train + n_val >= raw.len() {
        return Err(fmpestf::Error::Contract(format!(
            "{} windows cannot be split {:?} into nonempty train, validation and test ranges",
            raw.len(),
            data.split
        ))
        .into());
    }
    let norm = |w: &SampleWindow| {
        let mut w = w.clone();
        w.history = normalizer.normalize(&w.history);
        w
    };
    let stride = data.stride;
    let train_end = raw[n_train - 1].start + cfg.history + cfg.horizon;
    Ok(Windows {
        train: raw[..n_train].iter().step_by(stride).map(norm).collect(),
        val: raw[n_train..n_train + n_val].iter().step_by(stride).map(norm).collect(),
        test: raw[n_train + n_val..].iter().map(norm).collect(),
        normalizer,
        train_end,
    })
}
