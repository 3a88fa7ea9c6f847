//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, list values are comma separated.
//! Every key is optional (defaults are the desk-scale micro setup); unknown
//! keys are rejected. The canonical rendering written into checkpoints lists
//! every key in a fixed order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::router::RoutingPolicy;
use crate::trainer::data::DataSpec;
use crate::trainer::TrainConfig;

/// Options of the analysis commands.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    pub min_occurrences: u64,
    pub sweep_p: Vec<f64>,
    /// Validation tokens read per source for evaluation.
    pub eval_tokens: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            min_occurrences: 100,
            sweep_p: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            eval_tokens: 32_768,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    /// Both routing knobs are kept so switching modes keeps the other value.
    pub k: usize,
    pub p: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::micro(),
            train: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
            k: 2,
            p: 0.4,
        }
    }
}

pub const KEYS: &[&str] = &[
    "layers",
    "hidden_dim",
    "heads",
    "head_dim",
    "vocab_size",
    "context_length",
    "experts",
    "routing",
    "k",
    "p",
    "ffn_dim",
    "init_std",
    "steps",
    "batch_size",
    "seq_len",
    "lr_peak",
    "lr_final",
    "warmup_steps",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "weight_decay",
    "grad_clip",
    "alpha",
    "beta",
    "seed",
    "checkpoint_interval",
    "stats_interval",
    "val_fraction",
    "data",
    "min_occurrences",
    "sweep_p",
    "eval_tokens",
];

/// Parses `key = value` lines into a map, rejecting unknown and repeated keys.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(line, format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(Error::config(
                key,
                format!("line {}: unknown key", lineno + 1),
            ));
        }
        if out
            .insert(key.to_string(), value.trim().to_string())
            .is_some()
        {
            return Err(Error::config(
                key,
                format!("line {}: key given twice", lineno + 1),
            ));
        }
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("`{v}` is not a valid number")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(&parse_flat(text)?)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies `key = value` settings on top of the current values, then
    /// re-validates the whole configuration.
    pub fn apply(&mut self, settings: &BTreeMap<String, String>) -> Result<()> {
        let mut routing: Option<String> = None;
        for (key, v) in settings {
            let k = key.as_str();
            let m = &mut self.model;
            let t = &mut self.train;
            match k {
                "layers" => m.layers = num(k, v)?,
                "hidden_dim" => m.hidden = num(k, v)?,
                "heads" => m.heads = num(k, v)?,
                "head_dim" => m.head_dim = num(k, v)?,
                "vocab_size" => m.vocab = num(k, v)?,
                "context_length" => m.context = num(k, v)?,
                "experts" => m.experts = num(k, v)?,
                "routing" => routing = Some(v.clone()),
                "k" => self.k = num(k, v)?,
                "p" => self.p = num(k, v)?,
                "ffn_dim" => m.ffn_dim = num(k, v)?,
                "init_std" => m.init_std = num(k, v)?,
                "steps" => t.steps = num(k, v)?,
                "batch_size" => t.batch_size = num(k, v)?,
                "seq_len" => t.seq_len = num(k, v)?,
                "lr_peak" => t.lr_peak = num(k, v)?,
                "lr_final" => t.lr_final = num(k, v)?,
                "warmup_steps" => t.warmup_steps = num(k, v)?,
                "adam_beta1" => t.adam.beta1 = num(k, v)?,
                "adam_beta2" => t.adam.beta2 = num(k, v)?,
                "adam_eps" => t.adam.eps = num(k, v)?,
                "weight_decay" => t.adam.weight_decay = num(k, v)?,
                "grad_clip" => t.grad_clip = num(k, v)?,
                "alpha" => t.weights.alpha = num(k, v)?,
                "beta" => t.weights.beta = num(k, v)?,
                "seed" => t.seed = num(k, v)?,
                "checkpoint_interval" => t.checkpoint_interval = num(k, v)?,
                "stats_interval" => t.stats_interval = num(k, v)?,
                "val_fraction" => t.val_fraction = num(k, v)?,
                "data" => {
                    t.data = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(str::parse)
                        .collect::<Result<Vec<DataSpec>>>()?
                }
                "min_occurrences" => self.analysis.min_occurrences = num(k, v)?,
                "sweep_p" => self.analysis.sweep_p = list(k, v)?,
                "eval_tokens" => self.analysis.eval_tokens = num(k, v)?,
                other => return Err(Error::config(other, "unknown key")),
            }
        }
        let mode = routing.unwrap_or_else(|| self.routing_name().to_string());
        self.model.policy = match mode.as_str() {
            "top-k" => RoutingPolicy::TopK { k: self.k },
            "top-p" => RoutingPolicy::TopP { threshold: self.p },
            other => {
                return Err(Error::config(
                    "routing",
                    format!("`{other}` is not one of top-k, top-p"),
                ))
            }
        };
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::config(key, "unknown key"));
        }
        let mut m = BTreeMap::new();
        m.insert(key.to_string(), value.to_string());
        self.apply(&m)
    }

    pub fn routing_name(&self) -> &'static str {
        match self.model.policy {
            RoutingPolicy::TopK { .. } => "top-k",
            RoutingPolicy::TopP { .. } => "top-p",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.model.experts {
            return Err(Error::config(
                "k",
                format!("must lie in 1..={}, got {}", self.model.experts, self.k),
            ));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::config(
                "p",
                format!("must lie in (0, 1), got {}", self.p),
            ));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seq_len > self.model.context {
            return Err(Error::config(
                "seq_len",
                format!("exceeds context_length ({})", self.model.context),
            ));
        }
        if self.analysis.min_occurrences == 0 {
            return Err(Error::config("min_occurrences", "must be at least 1"));
        }
        if let Some(bad) = self
            .analysis
            .sweep_p
            .iter()
            .find(|p| !(**p > 0.0 && **p < 1.0))
        {
            return Err(Error::config("sweep_p", format!("{bad} is outside (0, 1)")));
        }
        Ok(())
    }

    /// Canonical text form listing every key.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let a = &self.analysis;
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let data = t
            .data
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let values: Vec<(&str, String)> = vec![
            ("layers", m.layers.to_string()),
            ("hidden_dim", m.hidden.to_string()),
            ("heads", m.heads.to_string()),
            ("head_dim", m.head_dim.to_string()),
            ("vocab_size", m.vocab.to_string()),
            ("context_length", m.context.to_string()),
            ("experts", m.experts.to_string()),
            ("routing", self.routing_name().to_string()),
            ("k", self.k.to_string()),
            ("p", self.p.to_string()),
            ("ffn_dim", m.ffn_dim.to_string()),
            ("init_std", m.init_std.to_string()),
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seq_len", t.seq_len.to_string()),
            ("lr_peak", t.lr_peak.to_string()),
            ("lr_final", t.lr_final.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("adam_beta1", t.adam.beta1.to_string()),
            ("adam_beta2", t.adam.beta2.to_string()),
            ("adam_eps", t.adam.eps.to_string()),
            ("weight_decay", t.adam.weight_decay.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("alpha", t.weights.alpha.to_string()),
            ("beta", t.weights.beta.to_string()),
            ("seed", t.seed.to_string()),
            ("checkpoint_interval", t.checkpoint_interval.to_string()),
            ("stats_interval", t.stats_interval.to_string()),
            ("val_fraction", t.val_fraction.to_string()),
            ("data", data),
            ("min_occurrences", a.min_occurrences.to_string()),
            ("sweep_p", join(&a.sweep_p)),
            ("eval_tokens", a.eval_tokens.to_string()),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
