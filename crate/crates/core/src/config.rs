//! Config file loading, command-line overrides, and the per-run manifest.
//!
//! Precedence per key: command-line flag > config file > built-in default.

use crate::error::{Error, Result};
use crate::eval::EvalSettings;
use crate::losses::Eq7Sign;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the output root used when `--out` is absent.
pub const OUT_ROOT_ENV: &str = "FACEFORGE_OUT_ROOT";

/// Image sizes the CLI accepts.
pub const ALLOWED_SIZES: [usize; 3] = [32, 64, 108];

/// Parse a TOML config file into a full TrainConfig; missing keys fall back
/// to the defaults.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_to_toml(config: &TrainConfig) -> Result<String> {
    toml::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))
}

/// Values supplied on the command line; `None` leaves the config untouched.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub size: Option<usize>,
    pub iters: Option<u64>,
    pub lambda_cyc: Option<f64>,
    pub lambda_dp: Option<f64>,
    pub lambda_c: Option<f64>,
    pub lambda_id: Option<f64>,
    pub eq7_sign: Option<Eq7Sign>,
}

impl Overrides {
    pub fn apply(&self, config: &mut TrainConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            config.seed = seed;
            config.data.seed = seed;
        }
        if let Some(size) = self.size {
            if !ALLOWED_SIZES.contains(&size) {
                return Err(Error::Config(format!(
                    "--size must be one of {ALLOWED_SIZES:?}, got {size}"
                )));
            }
            config.data.image_size = size;
        }
        if let Some(iters) = self.iters {
            config.total_iters = iters;
        }
        if let Some(v) = self.lambda_cyc {
            config.loss_weights.lambda_cyc = v;
        }
        if let Some(v) = self.lambda_dp {
            config.loss_weights.lambda_dp = v;
        }
        if let Some(v) = self.lambda_c {
            config.loss_weights.lambda_c = v;
        }
        if let Some(v) = self.lambda_id {
            config.loss_weights.lambda_id = v;
        }
        if let Some(s) = self.eq7_sign {
            config.identity.sign = s;
        }
        config.validate()
    }
}

/// Flag > file > default resolution for one run.
pub fn resolve_config(config_path: Option<&Path>, overrides: &Overrides) -> Result<TrainConfig> {
    let mut config = match config_path {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut config)?;
    Ok(config)
}

/// The output directory for a run: `--out`, else the output-root variable,
/// else `runs/`, the latter two suffixed with the command name.
pub fn resolve_out_dir(out_flag: Option<&Path>, command: &str) -> PathBuf {
    match out_flag {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "runs".to_string());
            Path::new(&root).join(command)
        }
    }
}

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Record of one CLI run, written into the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: TrainConfig,
    pub eval: EvalSettings,
    pub seed: u64,
    pub artifact_paths: Vec<String>,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
}

impl RunManifest {
    pub fn begin(command: &str, config: TrainConfig, eval: EvalSettings) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            seed: config.seed,
            config,
            eval,
            artifact_paths: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: None,
        }
    }

    pub fn record(&mut self, path: &Path) {
        self.artifact_paths.push(path.display().to_string());
    }

    /// Write (or rewrite) the single manifest of the run directory.
    pub fn finish(&mut self, dir: &Path) -> Result<()> {
        self.finished_at = Some(chrono::Utc::now().to_rfc3339());
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<RunManifest> {
        Ok(serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
    }
}
