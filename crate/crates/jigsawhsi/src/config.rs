//! Run configuration: a strict INI dialect mapping one file to a full
//! pipeline setup (data paths, decomposition, network shape, training
//! hyperparameters, output directory).
//!
//! Section headers are organizational; keys are globally unique and
//! case-insensitive. Unknown or duplicate keys are hard errors so a typo
//! in a hyperparameter name can never silently fall back to a default.

use std::collections::HashMap;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::decompose::Method;
use crate::graph::NetworkSpec;
use crate::trainer::{Monitor, OptimizerKind, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key '{key}'")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid value for '{key}': {msg}")]
    BadValue {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("missing required key '{0}'")]
    MissingKey(&'static str),
    #[error("{0}")]
    Constraint(String),
}

/// Whether the decomposition is fit on every pixel or only on training
/// pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitScope {
    Full,
    Train,
}

impl FitScope {
    pub fn name(self) -> &'static str {
        match self {
            FitScope::Full => "full",
            FitScope::Train => "train",
        }
    }
}

impl FromStr for FitScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(FitScope::Full),
            "train" => Ok(FitScope::Train),
            other => Err(format!("unknown fit scope '{other}' (expected full or train)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub cube_path: PathBuf,
    pub labels_path: PathBuf,
    pub window_size: usize,
    pub decomposition: Method,
    pub input_channels: usize,
    pub fit_scope: FitScope,
    pub hsi_filters: Option<usize>,
    pub module_a: Vec<usize>,
    pub filter_size: usize,
    pub branch_units: usize,
    pub nin_before: Option<usize>,
    pub nin_after: Option<usize>,
    pub avg_pool_size: usize,
    pub crop: bool,
    pub dense_units: (usize, usize),
    pub dropout: f64,
    pub l2: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub train_frac: f64,
    pub stratified: bool,
    pub val_fraction: f64,
    pub monitor: Monitor,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn network_spec(&self, num_classes: usize) -> NetworkSpec {
        NetworkSpec {
            input_size: self.window_size,
            input_channels: self.input_channels,
            hsi_filters: self.hsi_filters,
            module_a: self.module_a.clone(),
            max_filter_size: self.filter_size,
            branch_units: self.branch_units,
            nin_before: self.nin_before,
            nin_after: self.nin_after,
            avg_pool_size: self.avg_pool_size,
            crop_enabled: self.crop,
            dense_units: self.dense_units,
            dropout_rate: self.dropout,
            l2_coeff: self.l2,
            num_classes,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            val_fraction: self.val_fraction,
            seed: self.seed,
            monitor: self.monitor,
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let err = |msg: String| Err(ConfigError::Constraint(msg));
        if self.window_size % 2 == 0 {
            return err("window_size must be odd".into());
        }
        if self.filter_size % 2 == 0 {
            return err("filter_size must be odd".into());
        }
        if self.filter_size >= self.window_size {
            return err(format!(
                "filter_size {} must be smaller than window_size {}",
                self.filter_size, self.window_size
            ));
        }
        if self.input_channels == 0 {
            return err("input_channels must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.train_frac) || self.train_frac == 0.0 {
            return err(format!("train_frac {} not in (0, 1)", self.train_frac));
        }
        // The class count is unknown until the labels load; validate the
        // rest of the network shape with a placeholder.
        self.network_spec(2)
            .validate()
            .map_err(|e| ConfigError::Constraint(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| ConfigError::Constraint(e.to_string()))?;
        Ok(())
    }

    /// Canonical INI rendering; `parse_config` accepts its own output.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str("[data]\n");
        out.push_str(&format!("cube = {}\n", self.cube_path.display()));
        out.push_str(&format!("labels = {}\n", self.labels_path.display()));
        out.push_str("\n[decomposition]\n");
        out.push_str(&format!("decomposition = {}\n", self.decomposition.name()));
        out.push_str(&format!("input_channels = {}\n", self.input_channels));
        out.push_str(&format!("fit_scope = {}\n", self.fit_scope.name()));
        out.push_str("\n[network]\n");
        out.push_str(&format!("window_size = {}\n", self.window_size));
        if let Some(f) = self.hsi_filters {
            out.push_str(&format!("hsi_filters = {f}\n"));
        }
        if !self.module_a.is_empty() {
            let list: Vec<String> = self.module_a.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("module_a = {}\n", list.join(",")));
        }
        out.push_str(&format!("filter_size = {}\n", self.filter_size));
        out.push_str(&format!("branch_units = {}\n", self.branch_units));
        if let Some(f) = self.nin_before {
            out.push_str(&format!("nin_before = {f}\n"));
        }
        if let Some(f) = self.nin_after {
            out.push_str(&format!("nin_after = {f}\n"));
        }
        out.push_str(&format!("avg_pool_size = {}\n", self.avg_pool_size));
        out.push_str(&format!("crop = {}\n", self.crop));
        out.push_str(&format!(
            "dense_units = {},{}\n",
            self.dense_units.0, self.dense_units.1
        ));
        out.push_str(&format!("dropout = {}\n", self.dropout));
        out.push_str(&format!("l2 = {}\n", self.l2));
        out.push_str("\n[training]\n");
        out.push_str(&format!("optimizer = {}\n", self.optimizer.name()));
        out.push_str(&format!("learning_rate = {}\n", self.learning_rate));
        out.push_str(&format!("batch_size = {}\n", self.batch_size));
        out.push_str(&format!("max_epochs = {}\n", self.max_epochs));
        out.push_str(&format!("patience = {}\n", self.patience));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("train_frac = {}\n", self.train_frac));
        out.push_str(&format!("stratified = {}\n", self.stratified));
        out.push_str(&format!("val_fraction = {}\n", self.val_fraction));
        let monitor = match self.monitor {
            Monitor::ValAccuracy => "val",
            Monitor::TrainLoss => "train_loss",
        };
        out.push_str(&format!("monitor = {monitor}\n"));
        out.push_str("\n[output]\n");
        out.push_str(&format!("output_dir = {}\n", self.output_dir.display()));
        out
    }
}

const KNOWN_KEYS: &[&str] = &[
    "cube",
    "labels",
    "window_size",
    "decomposition",
    "input_channels",
    "fit_scope",
    "hsi_filters",
    "module_a",
    "filter_size",
    "branch_units",
    "nin_before",
    "nin_after",
    "avg_pool_size",
    "crop",
    "dense_units",
    "dropout",
    "l2",
    "optimizer",
    "learning_rate",
    "batch_size",
    "max_epochs",
    "patience",
    "seed",
    "train_frac",
    "stratified",
    "val_fraction",
    "monitor",
    "output_dir",
];

struct Entries {
    values: HashMap<String, (usize, String)>,
}

impl Entries {
    fn take(&mut self, key: &'static str) -> Option<(usize, String)> {
        self.values.remove(key)
    }

    fn parse<T>(&mut self, key: &'static str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some((line, raw)) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| ConfigError::BadValue {
                    line,
                    key: key.into(),
                    msg: e.to_string(),
                }),
        }
    }

    fn parse_or<T>(&mut self, key: &'static str, default: T) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn require(&mut self, key: &'static str) -> Result<String, ConfigError> {
        self.take(key)
            .map(|(_, v)| v)
            .ok_or(ConfigError::MissingKey(key))
    }
}

fn lex(text: &str) -> Result<Entries, ConfigError> {
    let mut values = HashMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let mut content = raw_line;
        if let Some(pos) = content.find(['#', ';']) {
            content = &content[..pos];
        }
        let content = content.trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            if !content.ends_with(']') || content.len() < 3 {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("malformed section header '{content}'"),
                });
            }
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("expected 'key = value', got '{content}'"),
            });
        };
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey { line, key });
        }
        if values.contains_key(&key) {
            return Err(ConfigError::DuplicateKey { line, key });
        }
        values.insert(key, (line, value));
    }
    Ok(Entries { values })
}

fn parse_pair(line: usize, key: &'static str, raw: &str) -> Result<(usize, usize), ConfigError> {
    let bad = |msg: String| ConfigError::BadValue {
        line,
        key: key.into(),
        msg,
    };
    let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(bad(format!("expected two comma-separated values, got '{raw}'")));
    }
    let a = parts[0].parse().map_err(|e| bad(format!("{e}")))?;
    let b = parts[1].parse().map_err(|e| bad(format!("{e}")))?;
    Ok((a, b))
}

fn parse_list(line: usize, key: &'static str, raw: &str) -> Result<Vec<usize>, ConfigError> {
    raw.split(',')
        .map(str::trim)
        .map(|p| {
            p.parse().map_err(|e| ConfigError::BadValue {
                line,
                key: key.into(),
                msg: format!("{e}"),
            })
        })
        .collect()
}

/// Parses and fully validates a configuration; every constraint violation
/// surfaces here rather than mid-training.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut e = lex(text)?;

    let cube_path = PathBuf::from(e.require("cube")?);
    let labels_path = PathBuf::from(e.require("labels")?);

    let module_a = match e.take("module_a") {
        None => Vec::new(),
        Some((line, raw)) => parse_list(line, "module_a", &raw)?,
    };
    let dense_units = match e.take("dense_units") {
        None => (256, 128),
        Some((line, raw)) => parse_pair(line, "dense_units", &raw)?,
    };

    let cfg = RunConfig {
        cube_path,
        labels_path,
        window_size: e.parse_or("window_size", 25)?,
        decomposition: e.parse_or("decomposition", Method::Fa)?,
        input_channels: e.parse_or("input_channels", 9)?,
        fit_scope: e.parse_or("fit_scope", FitScope::Full)?,
        hsi_filters: e.parse("hsi_filters")?,
        module_a,
        filter_size: e.parse_or("filter_size", 9)?,
        branch_units: e.parse_or("branch_units", 64)?,
        nin_before: e.parse("nin_before")?,
        nin_after: e.parse("nin_after")?,
        avg_pool_size: e.parse_or("avg_pool_size", 2)?,
        crop: e.parse_or("crop", true)?,
        dense_units,
        dropout: e.parse_or("dropout", 0.4)?,
        l2: e.parse_or("l2", 1e-4)?,
        optimizer: e.parse_or("optimizer", OptimizerKind::Adadelta)?,
        learning_rate: e.parse_or("learning_rate", 0.1)?,
        batch_size: e.parse_or("batch_size", 128)?,
        max_epochs: e.parse_or("max_epochs", 500)?,
        patience: e.parse_or("patience", 20)?,
        seed: e.parse_or("seed", 1337)?,
        train_frac: e.parse_or("train_frac", 0.3)?,
        stratified: e.parse_or("stratified", true)?,
        val_fraction: e.parse_or("val_fraction", 0.1)?,
        monitor: e.parse_or("monitor", Monitor::ValAccuracy)?,
        output_dir: PathBuf::from(e.parse_or("output_dir", String::from("out"))?),
    };
    debug_assert!(e.values.is_empty(), "lexer admitted an unconsumed key");
    cfg.validate()?;
    Ok(cfg)
}
