use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use skelkit::{load_model, make_toy_model, FitConfig, InitPolicy, ModelDefinition, ToyModelSpec};

/// Contents of a `--config` TOML file. Every key is optional; anything
/// missing falls back to the built-in default.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<PathBuf>,
    pub toy_model: Option<bool>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub init_noise: Option<f64>,
    pub policy: Option<InitPolicy>,
    pub rounds: Option<u32>,
    pub thresholds: Option<Vec<f64>>,
    pub pck_thresholds: Option<Vec<f64>>,
    pub residual_threshold: Option<f64>,
    pub fit: Option<FitConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelSource {
    Toy,
    File(PathBuf),
}

impl ModelSource {
    pub fn load(&self) -> anyhow::Result<ModelDefinition> {
        match self {
            ModelSource::Toy => Ok(make_toy_model(&ToyModelSpec::default())),
            ModelSource::File(p) => load_model(p).with_context(|| format!("loading model {}", p.display())),
        }
    }
}

/// The settings a subcommand actually runs with, after merging flags, the
/// config file and defaults. Printed to stderr before any work starts.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSource>,
    pub seed: u64,
    /// Worker threads; zero lets the thread pool pick.
    pub jobs: usize,
    pub inputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub init_noise: f64,
    pub policy: InitPolicy,
    pub rounds: u32,
    pub thresholds: Vec<f64>,
    pub pck_thresholds: Vec<f64>,
    pub residual_threshold: f64,
    pub fit: FitConfig,
}

pub const DEFAULT_THRESHOLDS: [f64; 3] = [10.0, 20.0, 30.0];
pub const DEFAULT_PCK_THRESHOLDS: [f64; 2] = [0.05, 0.1];
pub const DEFAULT_RESIDUAL_THRESHOLD: f64 = 1e-3;

/// Values given on the command line; `None` means not given.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub model: Option<PathBuf>,
    pub toy_model: bool,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub init_noise: Option<f64>,
    pub policy: Option<InitPolicy>,
    pub rounds: Option<u32>,
    pub thresholds: Option<Vec<f64>>,
    pub pck_thresholds: Option<Vec<f64>>,
    pub residual_threshold: Option<f64>,
}

impl RunConfig {
    pub fn merge(
        command: &str,
        flags: Overrides,
        file: FileConfig,
        inputs: Vec<PathBuf>,
        output: Option<PathBuf>,
    ) -> anyhow::Result<Self> {
        if flags.toy_model && flags.model.is_some() {
            bail!("--model and --toy-model are mutually exclusive");
        }
        let model = if flags.toy_model {
            Some(ModelSource::Toy)
        } else if let Some(p) = flags.model {
            Some(ModelSource::File(p))
        } else if file.toy_model == Some(true) {
            if file.model.is_some() {
                bail!("config sets both model and toy_model");
            }
            Some(ModelSource::Toy)
        } else {
            file.model.map(ModelSource::File)
        };
        let config = RunConfig {
            command: command.to_string(),
            model,
            seed: flags.seed.or(file.seed).unwrap_or(0),
            jobs: flags.jobs.or(file.jobs).unwrap_or(0),
            inputs,
            output,
            init_noise: flags.init_noise.or(file.init_noise).unwrap_or(0.0),
            policy: flags.policy.or(file.policy).unwrap_or_default(),
            rounds: flags.rounds.or(file.rounds).unwrap_or(1),
            thresholds: flags
                .thresholds
                .or(file.thresholds)
                .unwrap_or(DEFAULT_THRESHOLDS.to_vec()),
            pck_thresholds: flags
                .pck_thresholds
                .or(file.pck_thresholds)
                .unwrap_or(DEFAULT_PCK_THRESHOLDS.to_vec()),
            residual_threshold: flags
                .residual_threshold
                .or(file.residual_threshold)
                .unwrap_or(DEFAULT_RESIDUAL_THRESHOLD),
            fit: file.fit.unwrap_or_default(),
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> anyhow::Result<()> {
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            bail!(
                "init noise must be a finite non-negative number, got {}",
                self.init_noise
            );
        }
        if !(self.residual_threshold > 0.0) {
            bail!("residual threshold must be positive, got {}", self.residual_threshold);
        }
        if self.rounds == 0 {
            bail!("rounds must be at least 1");
        }
        if self.pck_thresholds.iter().any(|t| !(*t >= 0.0)) {
            bail!("PCK thresholds must be non-negative");
        }
        for p in &self.inputs {
            if !p.is_file() {
                bail!("input {} does not exist or is not a file", p.display());
            }
        }
        if let Some(ModelSource::File(p)) = &self.model {
            if !p.is_file() {
                bail!("model {} does not exist or is not a file", p.display());
            }
        }
        if let Some(dir) = self.output.as_deref().and_then(Path::parent) {
            if !dir.as_os_str().is_empty() && !dir.is_dir() {
                bail!("output directory {} does not exist", dir.display());
            }
        }
        self.fit.validate()?;
        Ok(())
    }

    pub fn model(&self) -> anyhow::Result<ModelDefinition> {
        match &self.model {
            Some(m) => m.load(),
            None => bail!(
                "{} needs a body model: pass --model <file> or --toy-model",
                self.command
            ),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# could not render configuration: {e}\n"))
    }
}
