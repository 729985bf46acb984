//! Experiment configuration: a TOML file plus dotted-path overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use fedapt_core::{EncoderConfig, FedConfig, PartitionConfig, TrainingConfig, WorldConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub partition: PartitionConfig,
    pub encoder: EncoderConfig,
    pub fed: FedConfig,
    pub training: TrainingConfig,
    pub output_dir: PathBuf,
    /// Number of seeds; repeat `r` runs with `fed.seed + r`.
    pub repeats: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            partition: PartitionConfig::default(),
            encoder: EncoderConfig::default(),
            fed: FedConfig::default(),
            training: TrainingConfig::default(),
            output_dir: PathBuf::from("runs/latest"),
            repeats: 1,
        }
    }
}

/// A configuration problem, located in the source text when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub source: String,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "{}:{l}:{c}: {}", self.source, self.message),
            (Some(l), None) => write!(f, "{}:{l}: {}", self.source, self.message),
            _ => write!(f, "{}: {}", self.source, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// One `path=value` override, e.g. `fed.rounds=50`.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: String,
    pub value: String,
}

impl Override {
    pub fn new(path: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            value: value.into(),
        }
    }

    /// Parses `path=value`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        match text.split_once('=') {
            Some((p, v)) if !p.trim().is_empty() => Ok(Self::new(p.trim(), v.trim())),
            _ => Err(ConfigError {
                source: "command line".into(),
                line: None,
                column: None,
                message: format!("override {text:?} is not of the form path=value"),
            }),
        }
    }

    /// TOML literal if it parses as one, otherwise a bare string.
    fn toml_value(&self) -> Value {
        toml::from_str::<Table>(&format!("v = {}", self.value))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(self.value.clone()))
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

/// Line of `key` inside table `section` (`""` for the root), if written in `text`.
fn find_key_line(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        if let Some((k, _)) = line.split_once('=') {
            let k = k.trim();
            let full = if current.is_empty() { k.to_string() } else { format!("{current}.{k}") };
            let wanted = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            if full == wanted {
                return Some(i + 1);
            }
        }
    }
    None
}

fn set_path(table: &mut Table, path: &str, value: Value) -> Result<(), String> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("malformed path {path:?}"));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let next = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match next {
            Value::Table(t) => t,
            _ => return Err(format!("{path}: {p} is not a table")),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn has_path(table: &Table, section: &str, key: &str) -> bool {
    table
        .get(section)
        .and_then(Value::as_table)
        .is_some_and(|t| t.contains_key(key))
}

impl ExperimentConfig {
    /// Parses `text`, applies `overrides` in order, and validates.
    ///
    /// `encoder.num_classes` and `encoder.input_dim` follow the world unless
    /// set explicitly.
    pub fn from_toml_str(text: &str, source: &str, overrides: &[Override]) -> Result<Self, ConfigError> {
        let err = |line: Option<usize>, column: Option<usize>, message: String| ConfigError {
            source: source.to_string(),
            line,
            column,
            message,
        };
        let mut table: Table = toml::from_str(text).map_err(|e| {
            let (l, c) = e.span().map(|s| line_col(text, s.start)).unzip();
            err(l, c, e.message().to_string())
        })?;
        for o in overrides {
            set_path(&mut table, &o.path, o.toml_value()).map_err(|m| ConfigError {
                source: "command line".into(),
                line: None,
                column: None,
                message: m,
            })?;
        }
        let explicit_classes = has_path(&table, "encoder", "num_classes");
        let explicit_input = has_path(&table, "encoder", "input_dim");
        let mut cfg: ExperimentConfig = Self::deserialize(Value::Table(table)).map_err(|e| {
            let message = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            // Errors from the value tree carry no span; point at the first key
            // the message names.
            let line = message.split('`').skip(1).step_by(2).find_map(|k| match k.rsplit_once('.') {
                Some((section, key)) => find_key_line(text, section, key),
                None => locate_any(text, k),
            });
            err(line, None, message)
        })?;
        if !explicit_classes {
            cfg.encoder.num_classes = cfg.world.num_classes;
        }
        if !explicit_input {
            cfg.encoder.input_dim = cfg.world.input_dim;
        }
        cfg.validate().map_err(|(section, key, message)| {
            let path = dotted(section, key);
            let line = if key.is_empty() {
                find_named_key(text, section, &message)
            } else {
                find_key_line(text, section, key)
            };
            let overridden = overrides
                .iter()
                .any(|o| o.path == path || (key.is_empty() && o.path.starts_with(&format!("{section}."))));
            if overridden {
                ConfigError {
                    source: "command line".into(),
                    line: None,
                    column: None,
                    message: format!("{path}: {message}"),
                }
            } else {
                err(line, None, format!("{path}: {message}"))
            }
        })?;
        Ok(cfg)
    }

    /// Reads and parses a config file.
    pub fn load(path: &Path, overrides: &[Override]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            source: path.display().to_string(),
            line: None,
            column: None,
            message: format!("cannot read: {e}"),
        })?;
        Self::from_toml_str(&text, &path.display().to_string(), overrides)
    }

    /// Checks every section and the cross-section constraints. Errors name
    /// `(section, key, message)`.
    pub fn validate(&self) -> Result<(), (&'static str, &'static str, String)> {
        let core = |section: &'static str, key: &'static str| move |e: fedapt_core::Error| (section, key, e.to_string());
        self.world.validate().map_err(core("world", ""))?;
        self.partition.validate().map_err(core("partition", ""))?;
        self.encoder.validate().map_err(core("encoder", ""))?;
        self.fed.validate().map_err(core("fed", ""))?;
        self.training.validate().map_err(core("training", ""))?;
        if self.encoder.num_classes != self.world.num_classes {
            return Err((
                "encoder",
                "num_classes",
                format!("{} disagrees with world.num_classes = {}", self.encoder.num_classes, self.world.num_classes),
            ));
        }
        if self.encoder.input_dim != self.world.input_dim {
            return Err((
                "encoder",
                "input_dim",
                format!("{} disagrees with world.input_dim = {}", self.encoder.input_dim, self.world.input_dim),
            ));
        }
        if self.repeats < 1 {
            return Err(("", "repeats", "must be at least 1".into()));
        }
        let last_seed = self.fed.seed.checked_add(self.repeats as u64 - 1);
        if last_seed.is_none_or(|s| s > i64::MAX as u64) {
            return Err(("fed", "seed", "seed + repeats overflows the config format".into()));
        }
        Ok(())
    }

    /// Canonical TOML of the whole config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    /// SHA-256 over the canonical TOML with `output_dir` cleared, so that the
    /// same plan hashes the same wherever it is written.
    pub fn plan_hash(&self) -> String {
        let mut plan = self.clone();
        plan.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(plan.to_toml().as_bytes()))
    }

    /// Seed of repeat `r`.
    pub fn seed_of(&self, r: usize) -> u64 {
        self.fed.seed + r as u64
    }
}

fn dotted(section: &str, key: &str) -> String {
    match (section.is_empty(), key.is_empty()) {
        (true, _) => key.to_string(),
        (false, true) => section.to_string(),
        (false, false) => format!("{section}.{key}"),
    }
}

/// Line of a key of `section` that `message` mentions.
fn find_named_key(text: &str, section: &str, message: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        if current != section {
            continue;
        }
        if let Some((k, _)) = line.split_once('=') {
            let k = k.trim();
            if !k.is_empty() && message.split(|c: char| !(c.is_alphanumeric() || c == '_')).any(|w| w == k) {
                return Some(i + 1);
            }
        }
    }
    None
}

/// Line of the first `key = ...` assignment whose key is `name`, in any table.
fn locate_any(text: &str, name: &str) -> Option<usize> {
    text.lines().position(|l| l.split_once('=').is_some_and(|(k, _)| k.trim() == name)).map(|i| i + 1)
}

/// Maps a named flag to its dotted config path.
pub fn flag_path(flag: &str) -> Option<&'static str> {
    Some(match flag {
        "mode" => "fed.mode",
        "supervision" => "fed.supervision",
        "rounds" => "fed.rounds",
        "seed" => "fed.seed",
        "beta" => "partition.beta",
        "domains" => "world.num_domains",
        "clients-per-domain" => "partition.clients_per_domain",
        "tau-q" => "fed.tau_q",
        "key-scheme" => "fed.key_scheme",
        "out" => "output_dir",
        "repeats" => "repeats",
        _ => return None,
    })
}
