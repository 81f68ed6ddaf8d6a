//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys are
//! rejected; later assignments (command line overrides) win.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::{ModelConfig, TrainConfig};
use crate::reconcile::Baseline;

/// Which method produces the forecast ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reconciler {
    Cnf,
    Linear(Baseline),
}

impl FromStr for Reconciler {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "cnf" {
            Ok(Self::Cnf)
        } else {
            s.parse().map(Self::Linear)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub hierarchy: Option<PathBuf>,
    pub panel: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub reconciler: Reconciler,
    /// Calendar covariate period and seasonal-naive period.
    pub season_length: usize,
    /// Forecast horizon; defaults to `prediction_length`.
    pub horizon: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            hierarchy: None,
            panel: None,
            checkpoint: None,
            output_dir: PathBuf::from("."),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            reconciler: Reconciler::Cnf,
            season_length: 12,
            horizon: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "hierarchy",
    "panel",
    "checkpoint",
    "output_dir",
    "d_model",
    "n_heads",
    "d_ff",
    "n_enc_layers",
    "n_dec_layers",
    "dropout",
    "pre_norm",
    "flow_layers",
    "flow_hidden",
    "flow_scale_bound",
    "context_length",
    "prediction_length",
    "epochs",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "clip_norm",
    "sample_count",
    "seed",
    "patience",
    "reconciler",
    "season_length",
    "horizon",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (a, f, t) = (&mut self.model.attention, &mut self.model.flow, &mut self.train);
        match key {
            "hierarchy" => self.hierarchy = Some(value.into()),
            "panel" => self.panel = Some(value.into()),
            "checkpoint" => self.checkpoint = Some(value.into()),
            "output_dir" => self.output_dir = value.into(),
            "d_model" => a.d_model = parse(key, value)?,
            "n_heads" => a.n_heads = parse(key, value)?,
            "d_ff" => a.d_ff = parse(key, value)?,
            "n_enc_layers" => a.n_enc_layers = parse(key, value)?,
            "n_dec_layers" => a.n_dec_layers = parse(key, value)?,
            "dropout" => a.dropout = parse(key, value)?,
            "pre_norm" => a.pre_norm = parse(key, value)?,
            "flow_layers" => f.n_layers = parse(key, value)?,
            "flow_hidden" => f.hidden = parse(key, value)?,
            "flow_scale_bound" => f.scale_bound = parse(key, value)?,
            "context_length" => t.context_length = parse(key, value)?,
            "prediction_length" => t.prediction_length = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.adam.lr = parse(key, value)?,
            "beta1" => t.adam.beta1 = parse(key, value)?,
            "beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "sample_count" => t.sample_count = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "reconciler" => self.reconciler = value.parse()?,
            "season_length" => self.season_length = parse(key, value)?,
            "horizon" => self.horizon = Some(parse(key, value)?),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`, returning the keys set.
    pub fn apply_text(&mut self, text: &str) -> Result<Vec<String>> {
        let mut keys = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", no + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, strip(&e))))?;
            keys.push(k.trim().to_string());
        }
        Ok(keys)
    }

    /// Reads a config file, returning it with the keys it set.
    pub fn from_file(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        let keys = cfg.apply_text(&text)?;
        Ok((cfg, keys))
    }

    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or(self.train.prediction_length)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.attention.validate()?;
        self.train.validate()?;
        if self.model.flow.n_layers == 0 || self.model.flow.hidden == 0 || !(self.model.flow.scale_bound > 0.0) {
            return Err(Error::Config("flow needs flow_layers, flow_hidden and flow_scale_bound > 0".into()));
        }
        if self.season_length == 0 || self.horizon == Some(0) {
            return Err(Error::Config("season_length and horizon must be at least 1".into()));
        }
        Ok(())
    }

    /// Fails unless every given path exists.
    pub fn require_paths(paths: &[(&str, Option<&Path>)]) -> Result<()> {
        for (name, p) in paths {
            match p {
                None => return Err(Error::Config(format!("missing required '{name}'"))),
                Some(p) if !p.exists() => {
                    return Err(Error::Config(format!("{name} path '{}' does not exist", p.display())))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
