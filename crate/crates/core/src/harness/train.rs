use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::diffkernel::{Adam, AdamConfig, Tape};
use crate::ggnn::{HeadConfig, Model, Vocabulary};
use crate::objective::{batch_loss, make_batches, ClassVocabulary, LossKind};
use crate::pygraph::CodeGraph;
use crate::typemap::build_map;

use super::eval::{evaluate, type_counts, Predictor};
use super::{HarnessError, Result, RunConfig};

/// Per-epoch training record; written as one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    /// Mean over batches of each term; absent when the objective lacks it.
    pub space: Option<f64>,
    pub class: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub valid_exact: Option<f64>,
    pub seconds: f64,
}

impl EpochLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("epoch logs always serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation parameters rounded to storage precision. Only the
    /// class-only variant keeps its classifier head.
    pub model: Model,
    pub best_epoch: usize,
    pub best_valid: Option<f64>,
    /// Loss of the first batch before any update.
    pub initial_loss: f64,
    pub log: Vec<EpochLog>,
}

fn predictor_for(model: &Model, train: &[CodeGraph], cfg: &RunConfig) -> Result<Predictor> {
    Ok(match cfg.objective.loss {
        LossKind::Class => Predictor::Classifier {
            model: model.clone(),
            kind: LossKind::Class,
        },
        _ => Predictor::Map {
            model: model.clone(),
            map: build_map(model, train)?,
            config: cfg.prediction,
        },
    })
}

/// Trains under `cfg`, validating on `valid` and keeping the best epoch by
/// validation exact match (the last epoch when `valid` has no annotations).
/// `hook` sees every epoch and may stop training early.
pub fn train(
    cfg: &RunConfig,
    train: &[CodeGraph],
    valid: &[CodeGraph],
    mut hook: impl FnMut(&EpochLog, &Model) -> Control,
) -> Result<TrainOutcome> {
    cfg.check()?;
    let obj = &cfg.objective;
    let annotated: Vec<String> = train
        .iter()
        .flat_map(|g| g.annotated_symbols().map(|(_, s)| obj.loss.class_label(s.annotation.as_ref().expect("annotated"))))
        .collect();
    if annotated.is_empty() {
        return Err(HarnessError::Data("the training corpus has no annotated symbols".into()));
    }
    let vocab = Vocabulary::build(train.iter(), cfg.vocab_min_count, cfg.vocab_max_size);
    let classes = if obj.loss.uses_classes() {
        ClassVocabulary::build(annotated.iter().map(String::as_str), obj.class_min_count)
            .labels()
            .to_vec()
    } else {
        Vec::new()
    };
    let heads = HeadConfig {
        classes,
        projection: obj.loss == LossKind::Typilus,
    };
    let mut model = Model::new(cfg.gnn.clone(), vocab, heads, obj.seed)?;
    model.extra.insert("loss".into(), obj.loss.to_string());
    model.extra.insert("seed".into(), obj.seed.to_string());
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        clip_norm: cfg.clip,
        ..AdamConfig::default()
    });
    let mut log_file = match &cfg.log {
        Some(p) => Some(std::fs::File::create(p)?),
        None => None,
    };
    let has_valid = valid.iter().any(|g| g.annotated_symbols().next().is_some());
    let train_counts = type_counts(train);

    let mut best: Option<(usize, f64, Model)> = None;
    let mut initial_loss = f64::NAN;
    let mut log = Vec::new();
    for epoch in 0..obj.epochs {
        let start = Instant::now();
        let batches = make_batches(train, obj.batch_symbols, obj.seed, epoch);
        let (mut space, mut class, mut total, mut norm) = (0.0, 0.0, 0.0, 0.0);
        for (bi, batch) in batches.iter().enumerate() {
            let refs: Vec<&CodeGraph> = batch.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let Some(terms) = batch_loss(&model, &mut tape, &refs, obj)? else { continue };
            let value = tape.value(terms.total).item()?;
            let diverged = |detail: String| HarnessError::Divergence { epoch, batch: bi, detail };
            if !value.is_finite() {
                return Err(diverged(format!("loss is {value}")));
            }
            if epoch == 0 && bi == 0 {
                initial_loss = value;
            }
            total += value;
            if let Some(s) = terms.space {
                space += tape.value(s.total).item()?;
            }
            if let Some(c) = terms.class {
                class += tape.value(c).item()?;
            }
            model.store.zero_grads();
            tape.backward(terms.total, &mut model.store)?;
            let g = adam.step(&mut model.store);
            if !g.is_finite() {
                return Err(diverged(format!("gradient norm is {g}")));
            }
            norm += g;
        }
        let nb = batches.len().max(1) as f64;
        let validate = has_valid && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == obj.epochs);
        let valid_exact = if validate {
            let mut snapshot = model.clone();
            snapshot.round_to_f32();
            let records = evaluate(&predictor_for(&snapshot, train, cfg)?, valid, &train_counts)?;
            let hits = records.iter().filter(|r| r.exact).count();
            Some(hits as f64 / records.len().max(1) as f64)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            batches: batches.len(),
            space: (obj.loss != LossKind::Class).then_some(space / nb),
            class: (obj.loss != LossKind::Space && !(obj.loss == LossKind::Typilus && obj.lambda == 0.0))
                .then_some(class / nb),
            total: total / nb,
            grad_norm: norm / nb,
            valid_exact,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("{}", entry.to_json());
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", entry.to_json())?;
        }
        if let Some(v) = valid_exact {
            if best.as_ref().is_none_or(|b| v > b.1) {
                best = Some((epoch, v, model.clone()));
            }
        }
        let stop = hook(&entry, &model) == Control::Stop;
        log.push(entry);
        if stop {
            break;
        }
    }
    let (best_epoch, best_valid, mut chosen) = match best {
        Some((e, v, m)) => (e, Some(v), m),
        None => (log.len().saturating_sub(1), None, model),
    };
    chosen.round_to_f32();
    if obj.loss != LossKind::Class {
        chosen = chosen.without_heads()?;
    }
    Ok(TrainOutcome {
        model: chosen,
        best_epoch,
        best_valid,
        initial_loss,
        log,
    })
}
