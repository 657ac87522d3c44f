//! Run configuration: one TOML document covering the network, simulator,
//! agents, model and trainer, with dotted `key=value` overrides.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/grid"
//!
//! [network]
//! rows = 2
//! cols = 3
//!
//! [sim.demand]
//! demand_multiplier = 0.5
//!
//! [train]
//! total_cycles = 4
//! ```
//!
//! Every section and key is optional; omitted values take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::AgentConfig;
use crate::error::{Error, Result};
use crate::net::{build_grid, NetworkSpec};
use crate::nn::ModelConfig;
use crate::sim::SimConfig;
use crate::train::TrainConfig;

/// Where the road network comes from: a network file, or a generated grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSource {
    /// Network file; when set, the grid fields are ignored.
    pub file: Option<PathBuf>,
    pub rows: usize,
    pub cols: usize,
    pub link_length: f64,
    pub lanes: usize,
}

impl Default for NetworkSource {
    fn default() -> Self {
        Self { file: None, rows: 2, cols: 3, link_length: 300.0, lanes: 2 }
    }
}

impl NetworkSource {
    pub fn build(&self) -> Result<NetworkSpec> {
        match &self.file {
            Some(path) => NetworkSpec::load(path),
            None => build_grid(self.rows, self.cols, self.link_length, self.lanes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Argmax actions instead of sampling.
    pub greedy: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 4, greedy: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub network: NetworkSource,
    pub sim: SimConfig,
    pub agents: AgentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            network: NetworkSource::default(),
            sim: SimConfig::default(),
            agents: AgentConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Read `path` (or start from defaults) and apply `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let origin = path.map_or_else(|| PathBuf::from("<defaults>"), Path::to_path_buf);
        Self::from_toml(&text, overrides).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse { path: origin, message },
            other => other,
        })
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let parse_err = |message: String| Error::Parse { path: PathBuf::from("<config>"), message };
        let mut table: toml::Table = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        for kv in overrides {
            apply_override(&mut table, kv)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.agents.validate()?;
        self.train.validate()?;
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::net::hex(&Sha256::digest(json))
    }

    /// Metadata lines heading every output file.
    pub fn header_lines(&self, seed: u64) -> Vec<String> {
        vec![
            format!("config_hash={} seed={seed}", self.hash()),
            format!("config: {}", serde_json::to_string(self).expect("config serializes")),
        ]
    }
}

/// Set a dotted key, e.g. `sim.demand.cav_rate=0.5`. The value is read as a
/// TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, kv: &str) -> Result<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {kv:?} is not of the form key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let again = RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = RunConfig::from_toml(
            "[sim.demand]\ncav_rate = 0.3\n",
            &["sim.demand.demand_multiplier=0.5".into(), "seed=9".into(), "output_dir=out/x".into()],
        )
        .unwrap();
        assert_eq!(cfg.sim.demand.cav_rate, 0.3);
        assert_eq!(cfg.sim.demand.demand_multiplier, 0.5);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("bogus = 1", &[]), Err(Error::Parse { .. })));
        assert!(matches!(RunConfig::from_toml("", &["train.gamma=2.0".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("", &["noequals".into()]), Err(Error::Config(_))));
    }
}
