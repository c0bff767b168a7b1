use std::path::{Path, PathBuf};

use crate::ggnn::{GnnConfig, DEFAULT_MAX_SIZE, DEFAULT_MIN_COUNT};
use crate::objective::TrainConfig;
use crate::pygraph::EdgeLabel;
use crate::typemap::PredictionConfig;

use super::{HarnessError, Result};

/// Everything a training run needs, read from a flat `key = value` file.
/// Blank lines and `#` comments are ignored; relative paths resolve against
/// the file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: PathBuf,
    pub valid: Option<PathBuf>,
    pub output: PathBuf,
    pub log: Option<PathBuf>,
    pub gnn: GnnConfig,
    pub objective: TrainConfig,
    pub lr: f64,
    pub clip: Option<f64>,
    pub vocab_min_count: usize,
    pub vocab_max_size: usize,
    pub prediction: PredictionConfig,
    /// Validate every this many epochs; the last epoch is always validated.
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: PathBuf::from("train.jsonl"),
            valid: None,
            output: PathBuf::from("model.ckpt"),
            log: None,
            gnn: GnnConfig::default(),
            objective: TrainConfig::default(),
            lr: 1e-3,
            clip: Some(5.0),
            vocab_min_count: DEFAULT_MIN_COUNT,
            vocab_max_size: DEFAULT_MAX_SIZE,
            prediction: PredictionConfig::default(),
            eval_every: 1,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| HarnessError::Usage(format!("config key {key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(HarnessError::Usage(format!("config key {key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        let path = |v: &str| base.join(v);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| HarnessError::Usage(format!("config line {}: expected key = value", n + 1)))?;
            match key {
                "train" => c.train = path(v),
                "valid" => c.valid = Some(path(v)),
                "output" => c.output = path(v),
                "log" => c.log = Some(path(v)),
                "dim" => c.gnn.dim = num(key, v)?,
                "steps" => c.gnn.steps = num(key, v)?,
                "inverse_edges" => c.gnn.use_inverse_edges = flag(key, v)?,
                "no_edge" => {
                    let drop: Vec<EdgeLabel> = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse().map_err(HarnessError::Usage))
                        .collect::<Result<_>>()?;
                    c.gnn = c.gnn.clone().without(&drop);
                }
                "loss" => c.objective.loss = v.parse().map_err(HarnessError::Usage)?,
                "margin" => c.objective.margin = num(key, v)?,
                "lambda" => c.objective.lambda = num(key, v)?,
                "batch_symbols" => c.objective.batch_symbols = num(key, v)?,
                "class_min_count" => c.objective.class_min_count = num(key, v)?,
                "epochs" => c.objective.epochs = num(key, v)?,
                "seed" => c.objective.seed = num(key, v)?,
                "lr" => c.lr = num(key, v)?,
                "clip" => c.clip = if v == "none" { None } else { Some(num(key, v)?) },
                "vocab_min_count" => c.vocab_min_count = num(key, v)?,
                "vocab_max_size" => c.vocab_max_size = num(key, v)?,
                "k" => c.prediction.k = num(key, v)?,
                "p" => c.prediction.p = num(key, v)?,
                "eval_every" => c.eval_every = num(key, v)?,
                _ => return Err(HarnessError::Usage(format!("config line {}: unknown key {key:?}", n + 1))),
            }
        }
        c.check()?;
        Ok(c)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Usage(m.to_string()));
        if self.gnn.dim == 0 || self.gnn.steps == 0 {
            return bad("dim and steps must be positive");
        }
        if self.objective.margin <= 0.0 || self.objective.lambda < 0.0 {
            return bad("margin must be positive and lambda non-negative");
        }
        if self.prediction.k == 0 || self.prediction.p < 0.0 {
            return bad("k must be at least 1 and p non-negative");
        }
        if self.lr <= 0.0 || self.eval_every == 0 {
            return bad("lr and eval_every must be positive");
        }
        Ok(())
    }
}
