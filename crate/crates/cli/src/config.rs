use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use timesync_core::io::content_hash;
use timesync_core::journey::GeneratorConfig;
use timesync_core::model::ModelConfig;
use timesync_core::pipeline::PipelineConfig;
use timesync_core::train::TrainConfig;

/// Problems with the configuration itself; the binary exits with code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Training seeds are `seed, seed + 1, …, seed + n_seeds − 1`.
    pub n_seeds: usize,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_seeds: 5,
            ks: vec![1, 5, 10],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub generator: GeneratorConfig,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |section: &str, r: timesync_core::Result<()>| r.map_err(|e| ConfigError(format!("[{section}] {e}")));
        wrap("generator", self.generator.validate())?;
        wrap("pipeline", self.pipeline.validate())?;
        wrap("model", self.model.validate())?;
        wrap("train", self.train.validate())?;
        if self.eval.n_seeds == 0 {
            return Err(ConfigError("[eval] n_seeds must be at least 1".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(ConfigError("[eval] ks must be a nonempty list of positive integers".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.eval.n_seeds as u64).map(|i| self.seed + i).collect()
    }

    /// Hash of every setting that shapes an artifact; the output location
    /// is excluded so a run can be moved or redirected with `--out`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        content_hash(&c).expect("config serializes")
    }
}

/// Recall cutoffs given on the command line.
#[derive(Clone, Debug, PartialEq)]
pub struct Ks(pub Vec<usize>);

/// Parses `--k 1,5,10`.
pub fn parse_ks(s: &str) -> Result<Ks, String> {
    let ks: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad k {p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err("k values must be positive".into());
    }
    Ok(Ks(ks))
}
