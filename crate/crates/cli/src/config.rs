use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use irc_core::autoencoder::{AeTrainConfig, AutoencoderConfig};
use irc_core::datasets::{LjpConfig, ToyConfig};
use irc_core::dynamics::{InConfig, SimTrainConfig};
use irc_core::Precision;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const CONFIG_FILE: &str = "config.json";

/// Everything a run depends on. `seed` is copied into every section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub shapes: ToyConfig,
    pub ljp: LjpConfig,
    pub autoencoder: AutoencoderConfig,
    pub train_ae: AeTrainConfig,
    pub simulator: InConfig,
    pub train_sim: SimTrainConfig,
    /// Dataset directory written by `gen-data`.
    pub data: Option<PathBuf>,
    /// Output directory of the `train-ae` run whose encoder feeds `train-sim`.
    pub ae_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::Double,
            shapes: ToyConfig::default(),
            ljp: LjpConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            train_ae: AeTrainConfig::default(),
            simulator: InConfig::default(),
            train_sim: SimTrainConfig::default(),
            data: None,
            ae_dir: None,
            out: None,
        }
    }
}

/// Flags shared by the config-driven commands; each overrides its key.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())).into())
    }

    /// Loads the config, applies flags and `IRC_PRECISION`, and syncs seeds.
    pub fn resolve(o: &Overrides) -> Result<Self> {
        let mut c = match &o.config {
            Some(p) => Self::read(p)?,
            None => Self::default(),
        };
        if let Some(out) = &o.out {
            c.out = Some(out.clone());
        }
        if let Some(s) = o.seed {
            c.seed = s;
        }
        if let Ok(p) = std::env::var("IRC_PRECISION") {
            c.precision = p
                .parse()
                .map_err(|e| UsageError(format!("IRC_PRECISION: {e}")))?;
        }
        c.shapes.seed = c.seed;
        c.ljp.lj.seed = c.seed;
        c.train_ae.seed = c.seed;
        c.train_sim.seed = c.seed;
        irc_core::precision::set(c.precision);
        Ok(c)
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| {
            UsageError("no output directory; pass --out or set \"out\"".into()).into()
        })
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| UsageError("no dataset; pass --data or set \"data\"".into()).into())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(
            dir.join(CONFIG_FILE),
            serde_json::to_string_pretty(self)? + "\n",
        )?;
        Ok(())
    }

    /// Config stored beside a checkpoint or inside a run directory.
    pub fn beside(path: &Path) -> Result<Self> {
        let dir = if path.is_dir() {
            path
        } else {
            path.parent().unwrap_or(Path::new("."))
        };
        Self::read(&dir.join(CONFIG_FILE))
    }
}
