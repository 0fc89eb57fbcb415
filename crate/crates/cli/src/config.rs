//! Flat TOML run configuration.
//!
//! Every key of [`TrainConfig`] may appear at top level, plus `dataset`
//! (required) and `output_dir`. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use linkpat_core::TrainConfig;
use sha2::{Digest, Sha256};

pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output_dir: Option<PathBuf>,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Relative dataset and output paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut table: toml::Table = text.parse().context("config is not valid TOML")?;
        let dataset = match table.remove("dataset") {
            Some(toml::Value::String(s)) => base.join(s),
            Some(_) => bail!("`dataset` must be a string"),
            None => bail!("config is missing the required key `dataset`"),
        };
        let output_dir = match table.remove("output_dir") {
            Some(toml::Value::String(s)) => Some(base.join(s)),
            Some(_) => bail!("`output_dir` must be a string"),
            None => None,
        };
        let train: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| anyhow!("invalid config: {e}"))?;
        train.validate()?;
        Ok(Self {
            dataset,
            output_dir,
            train,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("in config {}", path.display()))
    }

    /// Every key with its effective value, sorted.
    pub fn snapshot(&self) -> Result<String> {
        let mut table = toml::Table::try_from(&self.train)?;
        table.insert("dataset".into(), self.dataset.display().to_string().into());
        if let Some(dir) = &self.output_dir {
            table.insert("output_dir".into(), dir.display().to_string().into());
        }
        Ok(toml::to_string(&table)?)
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(&self.train)?;
        v["dataset"] = self.dataset.display().to_string().into();
        Ok(v)
    }

    /// `<first 12 hex digits of sha256(snapshot)>-seed<seed>`.
    pub fn run_name(&self) -> Result<String> {
        let digest = Sha256::digest(self.snapshot()?.as_bytes());
        let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        Ok(format!("{hex}-seed{}", self.train.seed))
    }

    /// `override_root`, else `output_dir`, else [`DEFAULT_OUTPUT_ROOT`].
    pub fn run_dir(&self, override_root: Option<&Path>) -> Result<PathBuf> {
        let root = override_root
            .map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
        Ok(root.join(self.run_name()?))
    }
}
