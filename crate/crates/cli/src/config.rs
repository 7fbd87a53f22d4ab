//! Experiment configuration: a JSON document plus command line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use octmh_core::byol::ByolConfig;
use octmh_core::fsutil::read_json;
use octmh_core::synth::{SyntheticConfig, SyntheticPreset};
use octmh_core::tabular::CvConfig;
use octmh_core::train::{TrainConfig, VisionPreset};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const DEFAULT_RUNS: usize = 10;
pub const DEFAULT_GRADCHECK_TRIALS: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    SynthGen,
    PretrainByol,
    TrainVision,
    TrainRegression,
    Fuse,
    Evaluate,
    Report,
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SynthGen => "synth-gen",
            Command::PretrainByol => "pretrain-byol",
            Command::TrainVision => "train-vision",
            Command::TrainRegression => "train-regression",
            Command::Fuse => "fuse",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
            Command::Gradcheck => "gradcheck",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A model preset: one of the nine vision configurations, or a tabular model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelPreset {
    Vision(VisionPreset),
    Regression,
    Fusion,
}

impl FromStr for ModelPreset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "regression" => Ok(Self::Regression),
            "fusion" => Ok(Self::Fusion),
            _ => s.parse::<VisionPreset>().map(Self::Vision).map_err(|_| {
                let mut known: Vec<&str> = VisionPreset::ALL.iter().map(|p| p.key()).collect();
                known.extend(["regression", "fusion"]);
                CliError::Config(format!("unknown preset {s:?}; known: {}", known.join(", ")))
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset manifest (CSV).
    pub dataset: Option<PathBuf>,
    /// Model preset, or the synthetic preset for `synth-gen`.
    pub preset: Option<String>,
    pub runs: usize,
    pub seed: u64,
    pub jobs: usize,
    pub out: Option<PathBuf>,
    /// Command inputs: the BYOL corpus directory, vision run directories,
    /// result directories or an evaluation file.
    pub inputs: Vec<PathBuf>,
    pub train: TrainConfig,
    /// `cv.seed` is replaced by the base seed.
    pub cv: CvConfig,
    pub byol: ByolConfig,
    /// Encoder architecture for BYOL.
    pub architecture: Option<String>,
    /// Field overrides applied to the synthetic preset.
    pub synth: Option<serde_json::Value>,
    /// Unlabeled corpus images written by `synth-gen` next to the dataset.
    pub corpus_size: usize,
    /// Random trials per gradient check case.
    pub trials: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            preset: None,
            runs: DEFAULT_RUNS,
            seed: 0,
            jobs: 1,
            out: None,
            inputs: Vec::new(),
            train: TrainConfig::default(),
            cv: CvConfig::default(),
            byol: ByolConfig::default(),
            architecture: None,
            synth: None,
            corpus_size: 0,
            trials: DEFAULT_GRADCHECK_TRIALS,
        }
    }
}

/// Flag values; each one set replaces the config field.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else replaces.
pub fn merge_json(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(CliError::MissingInput(format!("config file {}", path.display())));
        }
        read_json(path).map_err(|e| match e {
            // a malformed config is a config error, not an I/O failure
            octmh_core::Error::Json { .. } => CliError::Config(e.to_string()),
            e => e.into(),
        })
    }

    pub fn apply(&mut self, o: Overrides) {
        if o.preset.is_some() {
            self.preset = o.preset;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(r) = o.runs {
            self.runs = r;
        }
        if let Some(j) = o.jobs {
            self.jobs = j;
        }
        if o.out.is_some() {
            self.out = o.out;
        }
        if o.dataset.is_some() {
            self.dataset = o.dataset;
        }
        if !o.inputs.is_empty() {
            self.inputs = o.inputs;
        }
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("an output directory is required (--out)".into()))
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        let p = self
            .dataset
            .as_deref()
            .ok_or_else(|| CliError::Usage("a dataset manifest is required (--dataset)".into()))?;
        if !p.is_file() {
            return Err(CliError::MissingInput(format!("dataset manifest {}", p.display())));
        }
        Ok(p)
    }

    pub fn model_preset(&self) -> Result<Option<ModelPreset>> {
        self.preset.as_deref().map(str::parse).transpose()
    }

    /// The synthetic generator config: preset defaults overlaid with `synth`.
    pub fn synthetic_config(&self) -> Result<SyntheticConfig> {
        let preset: SyntheticPreset = match self.preset.as_deref() {
            Some(p) => p.parse()?,
            None => SyntheticPreset::Table2,
        };
        let mut value = serde_json::to_value(preset.config()).expect("config serializes");
        if let Some(patch) = &self.synth {
            merge_json(&mut value, patch);
        }
        let cfg: SyntheticConfig =
            serde_json::from_value(value).map_err(|e| CliError::Config(format!("synth: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-validation config with the seed tied to the base seed.
    pub fn cv_config(&self) -> Result<CvConfig> {
        let cv = CvConfig {
            seed: self.seed,
            ..self.cv.clone()
        };
        cv.validate()?;
        Ok(cv)
    }

    /// Checks what every command needs, then the command-specific parts.
    pub fn validate(&self, cmd: Command) -> Result<()> {
        if self.runs == 0 {
            return Err(CliError::Config("runs must be at least 1".into()));
        }
        if self.jobs == 0 {
            return Err(CliError::Config("jobs must be at least 1".into()));
        }
        if cmd != Command::Gradcheck {
            self.out_dir()?;
        }
        let preset = if cmd == Command::SynthGen {
            None
        } else {
            self.model_preset()?
        };
        match cmd {
            Command::SynthGen => {
                self.synthetic_config()?;
            }
            Command::PretrainByol => {
                self.byol.validate()?;
                self.single_input("BYOL corpus directory")?;
                if let Some(a) = &self.architecture {
                    a.parse::<octmh_core::ArchitectureName>()?;
                }
            }
            Command::TrainVision => {
                self.dataset_path()?;
                match preset {
                    Some(ModelPreset::Vision(p)) => {
                        let mut t = self.train.clone();
                        p.apply(&mut t)?;
                        t.validate()?;
                    }
                    Some(other) => {
                        return Err(CliError::Config(format!("train-vision needs a vision preset, got {other:?}")));
                    }
                    None => return Err(CliError::Usage("train-vision needs --preset".into())),
                }
            }
            Command::TrainRegression | Command::Fuse => {
                self.dataset_path()?;
                let want = if cmd == Command::Fuse {
                    ModelPreset::Fusion
                } else {
                    ModelPreset::Regression
                };
                if preset.is_some_and(|p| p != want) {
                    return Err(CliError::Config(format!("{cmd} does not take preset {:?}", self.preset)));
                }
                self.cv_config()?;
                if cmd == Command::Fuse {
                    self.single_input("vision run directory")?;
                }
            }
            Command::Evaluate => {
                if self.inputs.is_empty() {
                    return Err(CliError::Usage("evaluate needs at least one --input directory".into()));
                }
                for p in &self.inputs {
                    if !p.is_dir() {
                        return Err(CliError::MissingInput(format!("results directory {}", p.display())));
                    }
                }
            }
            Command::Report => {
                let p = self.single_input("evaluation file")?;
                if !p.is_file() {
                    return Err(CliError::MissingInput(format!("evaluation file {}", p.display())));
                }
            }
            Command::Gradcheck => {
                if self.trials == 0 {
                    return Err(CliError::Config("trials must be at least 1".into()));
                }
            }
        }
        Ok(())
    }

    fn single_input(&self, what: &str) -> Result<&Path> {
        match self.inputs.as_slice() {
            [p] => {
                if !p.exists() {
                    return Err(CliError::MissingInput(format!("{what} {}", p.display())));
                }
                Ok(p)
            }
            [] => Err(CliError::Usage(format!("missing --input ({what})"))),
            _ => Err(CliError::Usage(format!("expected one --input ({what})"))),
        }
    }
}
