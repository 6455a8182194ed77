//! Run manifests: what produced a checkpoint, as `key = value` lines.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use crate::binio::sha256_hex;
use crate::config::Config;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub entries: BTreeMap<String, String>,
}

impl RunManifest {
    /// Records the config hash, code version and resolved loss weights.
    pub fn for_config(cfg: &Config) -> Self {
        let mut m = Self::default();
        let e = &cfg.experiment;
        let w = e.rung.weights(e.train.weights);
        m.set("code_version", CODE_VERSION);
        m.set("config_sha256", sha256_hex(cfg.to_text().as_bytes()));
        m.set("rung", e.rung.as_str());
        m.set("fusion", crate::checkpoint::fusion_name(e.rung.fusion()));
        m.set("lambda_wm", w.wm);
        m.set("lambda_mllm", w.mllm);
        m.set("lambda_jbo", w.jbo);
        m.set("gamma", w.gamma);
        m.set("expert_reference", "proportional controller");
        m
    }

    pub fn set(&mut self, k: &str, v: impl ToString) {
        self.entries.insert(k.to_string(), v.to_string());
    }

    pub fn get(&self, k: &str) -> Option<&str> {
        self.entries.get(k).map(String::as_str)
    }

    pub fn set_dataset_hash(&mut self, embodiment: &str, bytes: &[u8]) {
        self.set(&format!("dataset.{embodiment}"), sha256_hex(bytes));
    }

    /// Fails when the manifest recorded a different dataset for
    /// `embodiment`.
    pub fn check_dataset(&self, embodiment: &str, bytes: &[u8]) -> Result<()> {
        let key = format!("dataset.{embodiment}");
        match self.get(&key) {
            Some(h) if h == sha256_hex(bytes) => Ok(()),
            Some(h) => bail!(
                "dataset for `{embodiment}` does not match the one this checkpoint was trained on \
                 (recorded {h}); pass --allow-dataset-mismatch to evaluate anyway"
            ),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| anyhow!("manifest line {}: expected `key = value`", i + 1))?;
            m.set(k, v);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        Self::parse(&text)
    }
}
