use std::path::{Path, PathBuf};

use anyhow::Context;
use groundprobe::probe::{ProbeConfig, DEFAULT_LAYER};
use groundprobe::selective::DEFAULT_ABSTAIN_THRESHOLD;
use groundprobe::synth::SynthConfig;
use serde::Deserialize;

use crate::{Format, UsageError};

pub const SEED_ENV: &str = "GROUNDPROBE_SEED";

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub layer: Option<usize>,
    pub threshold: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub format: Option<Format>,
    pub probe: ProbeSection,
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub lambda: Option<f64>,
    pub max_iter: Option<usize>,
    pub tolerance: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
    }
}

/// Values shared by every subcommand after applying
/// flags > config file > environment (seed only) > defaults.
#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub layer: usize,
    pub threshold: f64,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
    pub format: Format,
    pub probe: ProbeConfig,
    pub synth: SynthConfig,
}

pub struct Flags {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub format: Option<Format>,
}

pub fn env_seed() -> Result<Option<u64>, UsageError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| UsageError(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

impl Settings {
    pub fn resolve(flags: Flags, file: FileConfig) -> anyhow::Result<Self> {
        let seed = flags
            .seed
            .or(file.seed)
            .or(env_seed()?)
            .unwrap_or(groundprobe::DEFAULT_SEED);
        let defaults = ProbeConfig::default();
        let probe = ProbeConfig {
            lambda: file.probe.lambda.unwrap_or(defaults.lambda),
            max_iter: file.probe.max_iter.unwrap_or(defaults.max_iter),
            tolerance: file.probe.tolerance.unwrap_or(defaults.tolerance),
            seed,
            standardize: true,
        };
        Ok(Self {
            seed,
            layer: file.layer.unwrap_or(DEFAULT_LAYER),
            threshold: file.threshold.unwrap_or(DEFAULT_ABSTAIN_THRESHOLD),
            out_dir: flags.out_dir.or(file.out_dir).unwrap_or_else(|| PathBuf::from(".")),
            threads: flags.threads.or(file.threads),
            format: flags.format.or(file.format).unwrap_or(Format::Csv),
            probe,
            synth: file.synth.unwrap_or_default(),
        })
    }

    /// Creates the output directory and returns the path of `name` in it.
    pub fn out(&self, name: &str) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(self.out_dir.join(name))
    }
}
