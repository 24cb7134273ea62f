//! Run configuration: one TOML file, every key optional, with `key=value`
//! overrides on top.

use std::path::{Path, PathBuf};

use metatrack::metalearn::{AdamConfig, MetaConfig};
use metatrack::network::Architecture;
use metatrack::pruning::{PrunerShape, PrunerTrainConfig, ThresholdPolicy};
use metatrack::simworld::SimConfig;
use metatrack::tracker::TrackerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "METATRACK_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub arch: Architecture,
    pub train_videos: SimConfig,
    pub train_seed: u64,
    /// Videos for tuning the baseline learning rate.
    pub validation_videos: SimConfig,
    pub validation_seed: u64,
    pub heldout_videos: SimConfig,
    pub heldout_seed: u64,
    pub meta: MetaConfig,
    pub outer: AdamConfig,
    /// Total simulated episodes for meta-training.
    pub meta_episodes: usize,
    pub meta_batch: usize,
    /// Steps between held-out loss evaluations (0 disables them).
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub tracker: TrackerConfig,
    /// Tracking seeds averaged in evaluations.
    pub eval_seeds: usize,
    /// Tracking seeds used when tuning the baseline learning rate.
    pub tuning_seeds: usize,
    /// Grid for the fixed scalar learning rate of the non-meta baseline.
    pub baseline_lrs: Vec<f64>,
    pub pruner: PrunerTrainConfig,
    pub pruner_shape: PrunerShape,
    pub threshold: ThresholdPolicy,
    pub lambda_grid: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let heldout = SimConfig {
            num_videos: 30,
            num_frames: 20,
            ..SimConfig::default()
        };
        RunConfig {
            seed: 0,
            arch: Architecture::compact(),
            train_videos: SimConfig {
                num_videos: 100,
                ..SimConfig::default()
            },
            train_seed: 1,
            validation_videos: SimConfig {
                num_videos: 10,
                ..heldout.clone()
            },
            validation_seed: 2,
            heldout_videos: heldout,
            heldout_seed: 99,
            meta: MetaConfig {
                rate_lr_scale: 0.1,
                initial_lr: 0.03,
                ..MetaConfig::default()
            },
            outer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            meta_episodes: 1200,
            meta_batch: 4,
            eval_interval: 50,
            eval_episodes: 16,
            tracker: TrackerConfig::default(),
            eval_seeds: 5,
            tuning_seeds: 2,
            baseline_lrs: vec![0.001, 0.003, 0.01, 0.03, 0.1],
            pruner: PrunerTrainConfig {
                steps: 60,
                batch: 4,
                adam: AdamConfig {
                    lr: 0.01,
                    ..AdamConfig::default()
                },
                ..PrunerTrainConfig::default()
            },
            pruner_shape: PrunerShape::default(),
            threshold: ThresholdPolicy::default(),
            lambda_grid: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Applies `a.b.c=value` overrides; values parse as TOML and fall back
    /// to bare strings.
    pub fn with_overrides(&self, overrides: &[String]) -> CliResult<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| CliError::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{item}` is not of the form key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields one part");
            let mut node = &mut table;
            for p in parents {
                node = node
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| CliError::Config(format!("`{p}` in `{key}` is not a table")))?;
            }
            node.insert(last.to_string(), value);
        }
        let cfg = Self::from_toml(&toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))?)?;
        // nested tables ignore unknown keys, so check each override survived
        let applied: toml::Table = toml::from_str(&cfg.to_toml()?).map_err(|e| CliError::Config(e.to_string()))?;
        for item in overrides {
            let key = item.split_once('=').map_or(item.as_str(), |(k, _)| k).trim();
            let mut node = Some(&applied);
            let mut found = false;
            for (i, p) in key.split('.').enumerate() {
                let Some(v) = node.and_then(|t| t.get(p)) else { break };
                found = i == key.split('.').count() - 1;
                node = v.as_table();
            }
            if !found {
                return Err(CliError::Config(format!("unknown config key `{key}`")));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.arch.validate()?;
        self.train_videos.validate()?;
        self.validation_videos.validate()?;
        self.heldout_videos.validate()?;
        if self.meta_batch == 0 {
            return Err(CliError::Config("meta_batch must be positive".into()));
        }
        if self.meta.sampling.patch != (self.arch.input_height, self.arch.input_width) {
            return Err(CliError::Config(format!(
                "meta.sampling.patch {:?} differs from the architecture input {}x{}",
                self.meta.sampling.patch, self.arch.input_height, self.arch.input_width
            )));
        }
        if self.tracker.sampling.patch != self.meta.sampling.patch {
            return Err(CliError::Config("tracker.sampling.patch must equal meta.sampling.patch".into()));
        }
        if self.baseline_lrs.is_empty() {
            return Err(CliError::Config("baseline_lrs must not be empty".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization, ignoring where outputs go.
    pub fn hash(&self) -> [u8; 32] {
        let canonical = RunConfig {
            output_dir: None,
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        Sha256::digest(json.as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    /// Explicit directory, then the config's, then `$METATRACK_OUT`, then
    /// `./metatrack-out`.
    pub fn output_root(&self, explicit: Option<&Path>) -> PathBuf {
        explicit
            .map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("metatrack-out"))
    }

    pub fn meta_steps(&self) -> usize {
        self.meta_episodes / self.meta_batch
    }
}
