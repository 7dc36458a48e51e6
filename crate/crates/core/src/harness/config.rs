use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::error::{Result, UrclError};
use crate::model::ModelConfig;
use crate::replay::{MixupConfig, RmirSizes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Urcl,
    OneFitAll,
    Finetune,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Urcl, Strategy::OneFitAll, Strategy::Finetune];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Urcl => "urcl",
            Strategy::OneFitAll => "one_fit_all",
            Strategy::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = UrclError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "urcl" => Ok(Strategy::Urcl),
            "one_fit_all" => Ok(Strategy::OneFitAll),
            "finetune" => Ok(Strategy::Finetune),
            other => Err(UrclError::config(format!(
                "unknown strategy '{other}' (expected urcl, one_fit_all or finetune)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = UrclError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(UrclError::config(format!("unknown optimizer '{other}'"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

/// Everything needed to reproduce one streaming run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: Option<PathBuf>,
    pub input_len: usize,
    pub output_len: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub grad_clip: f64,
    pub buffer_capacity: usize,
    pub mixup_alpha: f64,
    pub tau: f64,
    /// `None` means `4 * batch_size`.
    pub pool_size: Option<usize>,
    /// `None` means `batch_size`.
    pub sample_size: Option<usize>,
    pub ssl_weight: f64,
    pub augment: AugmentConfig,
    pub dilations: Vec<usize>,
    pub diffusion_steps: usize,
    pub embedding_dim: usize,
    pub base_fraction: f64,
    pub incremental_segments: usize,
    pub seed: u64,
    pub strategy: Strategy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: None,
            input_len: 12,
            output_len: 1,
            batch_size: 64,
            max_epochs: 100,
            patience: 15,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            grad_clip: 5.0,
            buffer_capacity: 256,
            mixup_alpha: 0.5,
            tau: 0.5,
            pool_size: None,
            sample_size: None,
            ssl_weight: 1.0,
            augment: AugmentConfig::default(),
            dilations: vec![1, 2, 1, 2, 4],
            diffusion_steps: 2,
            embedding_dim: 10,
            base_fraction: 0.3,
            incremental_segments: 4,
            seed: 0,
            strategy: Strategy::Urcl,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| UrclError::config(format!("invalid value '{value}' for {key}")))
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn auto_str<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), |x| x.to_string())
}

/// Shortest decimal form that parses back to the same bits.
fn float_str(v: f64) -> String {
    format!("{v:?}")
}

impl ExperimentConfig {
    /// Parses `key = value` lines; blank lines and `#` comments are ignored.
    /// Missing keys keep their defaults; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(UrclError::config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(UrclError::config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| UrclError::config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.augment;
        match key {
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "input_len" => self.input_len = parse_num(key, value)?,
            "output_len" => self.output_len = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "max_epochs" => self.max_epochs = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "grad_clip" => self.grad_clip = parse_num(key, value)?,
            "buffer_capacity" => self.buffer_capacity = parse_num(key, value)?,
            "mixup_alpha" => self.mixup_alpha = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "pool_size" => self.pool_size = parse_auto(key, value)?,
            "sample_size" => self.sample_size = parse_auto(key, value)?,
            "ssl_weight" => self.ssl_weight = parse_num(key, value)?,
            "drop_node_ratio" => a.drop_node_ratio = parse_num(key, value)?,
            "drop_edge_ratio" => a.drop_edge_ratio = parse_num(key, value)?,
            "drop_edge_threshold" => a.drop_edge_threshold = parse_auto(key, value)?,
            "subgraph_coverage" => a.subgraph_coverage = parse_num(key, value)?,
            "add_edge_ratio" => a.add_edge_ratio = parse_num(key, value)?,
            "add_edge_min_hops" => a.add_edge_min_hops = parse_num(key, value)?,
            "slice_len" => a.slice_len = parse_auto(key, value)?,
            "dilations" => {
                self.dilations = value
                    .split(',')
                    .map(|d| parse_num(key, d.trim()))
                    .collect::<Result<_>>()?
            }
            "diffusion_steps" => self.diffusion_steps = parse_num(key, value)?,
            "embedding_dim" => self.embedding_dim = parse_num(key, value)?,
            "base_fraction" => self.base_fraction = parse_num(key, value)?,
            "incremental_segments" => self.incremental_segments = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "strategy" => self.strategy = value.parse()?,
            other => return Err(UrclError::config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Canonical text form; [`parse`](Self::parse) inverts it exactly.
    pub fn to_config_string(&self) -> String {
        let a = &self.augment;
        let data = self
            .data
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let dilations: Vec<String> = self.dilations.iter().map(|d| d.to_string()).collect();
        let rows: Vec<(&str, String)> = vec![
            ("data", data),
            ("input_len", self.input_len.to_string()),
            ("output_len", self.output_len.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("learning_rate", float_str(self.learning_rate)),
            ("optimizer", self.optimizer.to_string()),
            ("grad_clip", float_str(self.grad_clip)),
            ("buffer_capacity", self.buffer_capacity.to_string()),
            ("mixup_alpha", float_str(self.mixup_alpha)),
            ("tau", float_str(self.tau)),
            ("pool_size", auto_str(&self.pool_size)),
            ("sample_size", auto_str(&self.sample_size)),
            ("ssl_weight", float_str(self.ssl_weight)),
            ("drop_node_ratio", float_str(a.drop_node_ratio)),
            ("drop_edge_ratio", float_str(a.drop_edge_ratio)),
            ("drop_edge_threshold", auto_str(&a.drop_edge_threshold.map(float_str))),
            ("subgraph_coverage", float_str(a.subgraph_coverage)),
            ("add_edge_ratio", float_str(a.add_edge_ratio)),
            ("add_edge_min_hops", a.add_edge_min_hops.to_string()),
            ("slice_len", auto_str(&a.slice_len)),
            ("dilations", dilations.join(",")),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("base_fraction", float_str(self.base_fraction)),
            ("incremental_segments", self.incremental_segments.to_string()),
            ("seed", self.seed.to_string()),
            ("strategy", self.strategy.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.to_config_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size.unwrap_or(4 * self.batch_size)
    }

    pub fn sample_size(&self) -> usize {
        self.sample_size.unwrap_or(self.batch_size)
    }

    pub fn rmir_sizes(&self) -> RmirSizes {
        RmirSizes {
            pool: self.pool_size(),
            sample: self.sample_size(),
        }
    }

    pub fn mixup(&self) -> MixupConfig {
        MixupConfig {
            alpha: self.mixup_alpha,
            rng_seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_len", self.input_len),
            ("output_len", self.output_len),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("diffusion_steps", self.diffusion_steps),
            ("embedding_dim", self.embedding_dim),
            ("incremental_segments", self.incremental_segments),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(UrclError::config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("grad_clip", self.grad_clip),
            ("mixup_alpha", self.mixup_alpha),
            ("tau", self.tau),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(UrclError::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.ssl_weight >= 0.0 && self.ssl_weight.is_finite()) {
            return Err(UrclError::config("ssl_weight must be non-negative"));
        }
        if self.sample_size() == 0 || self.sample_size() > self.pool_size() {
            return Err(UrclError::config(format!(
                "need 0 < sample_size ({}) <= pool_size ({})",
                self.sample_size(),
                self.pool_size()
            )));
        }
        if self.dilations.len() != 5 || self.dilations.contains(&0) {
            return Err(UrclError::config("dilations must list 5 positive values"));
        }
        if !(self.base_fraction > 0.0 && self.base_fraction < 1.0) {
            return Err(UrclError::config("base_fraction must lie in (0, 1)"));
        }
        self.augment.validate(self.input_len)
    }

    pub fn model_config(&self, node_count: usize, channels: usize, directed: bool) -> ModelConfig {
        let mut m = ModelConfig::new(node_count, channels, directed);
        m.input_len = self.input_len;
        m.output_len = self.output_len;
        m.dilations = self.dilations.clone();
        m.diffusion_steps = self.diffusion_steps;
        m.embedding_dim = self.embedding_dim;
        m
    }
}
