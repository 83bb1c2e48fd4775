//! Run configuration file and its provenance hash.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use alliance_core::promptkit::EvalSetting;

pub const DEFAULT_RUNS: u32 = 3;
pub const DEFAULT_CONCURRENCY: usize = 4;
pub const DEFAULT_OUT: &str = "out";

/// Mock rater settings: hidden truth plus clipped Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockSection {
    pub truth: PathBuf,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub misbehave_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

/// Paths are kept as written; they resolve against the config file's
/// directory, or the working directory for command-line values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcripts: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rubric: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setting: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concurrency_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_retries: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockSection>,
    #[serde(skip)]
    base_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn is_from_file(&self) -> bool {
        self.base_dir.is_some()
    }

    /// Resolves a path that came from the config file.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn setting(&self) -> Result<EvalSetting> {
        let raw = self.setting.as_deref().unwrap_or("detailed");
        let mut s: EvalSetting = raw
            .parse()
            .map_err(|e: String| anyhow::anyhow!("invalid setting `{raw}`: {e}"))?;
        if self.cot == Some(true) {
            s.cot = true;
        }
        Ok(s)
    }

    pub fn runs(&self) -> u32 {
        self.runs.unwrap_or(DEFAULT_RUNS)
    }

    pub fn concurrency(&self) -> usize {
        self.concurrency_limit.unwrap_or(DEFAULT_CONCURRENCY)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == Some(0) {
            bail!("runs must be at least 1");
        }
        if self.concurrency_limit == Some(0) {
            bail!("concurrency_limit must be at least 1");
        }
        if self.provider.is_some() && self.mock.is_some() {
            bail!("config sets both `provider` and `[mock]`; choose one backend");
        }
        self.setting()?;
        Ok(())
    }

    /// Canonical TOML of the effective configuration.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`RunConfig::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_content_only() {
        let a: RunConfig = toml::from_str("runs = 3\nsetting = \"general\"").unwrap();
        let b: RunConfig = toml::from_str("setting = \"general\"\nruns = 3").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c: RunConfig = toml::from_str("runs = 2\nsetting = \"general\"").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn cot_flag_upgrades_setting() {
        let c: RunConfig = toml::from_str("setting = \"detailed\"\ncot = true").unwrap();
        assert_eq!(c.setting().unwrap(), EvalSetting::DETAILED_COT);
        let bad: RunConfig = toml::from_str("setting = \"verbose\"").unwrap();
        assert!(bad.validate().is_err());
        assert!(toml::from_str::<RunConfig>("api_key = \"x\"").is_err());
    }
}
