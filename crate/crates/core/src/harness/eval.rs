use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::ggnn::Model;
use crate::objective::{class_probabilities, LossKind};
use crate::pygraph::{CodeGraph, SymbolKind};
use crate::typeexpr::{build_type_lattice, check_neutral, erase_type_parameters, parse_type, TypeExpr};
use crate::typemap::{build_map, Prediction, PredictionConfig, TypeMap, TypeMapError};

use super::{HarnessError, Result};

/// Types with fewer training annotations than this are rare.
pub const RARE_CUTOFF: usize = 100;

pub const DEFAULT_THRESHOLDS: [f64; 21] = [
    0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8,
    0.85, 0.9, 0.95, 1.0,
];

/// Ranked candidates for one symbol of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolSuggestion {
    pub symbol: usize,
    pub candidates: Vec<Prediction>,
}

/// Turns symbol embeddings into ranked types: through the type map, or
/// through the classifier head for the class-only variant.
#[derive(Debug, Clone)]
pub enum Predictor {
    Map {
        model: Model,
        map: TypeMap,
        config: PredictionConfig,
    },
    Classifier {
        model: Model,
        kind: LossKind,
    },
}

impl Predictor {
    pub fn model(&self) -> &Model {
        match self {
            Predictor::Map { model, .. } | Predictor::Classifier { model, .. } => model,
        }
    }

    /// Ranked candidates for one embedding; an empty map yields none.
    pub fn candidates(&self, embedding: &[f64]) -> Result<Vec<Prediction>> {
        match self {
            Predictor::Map { map, config, .. } => match map.knn_predict(embedding, config) {
                Ok(p) => Ok(p),
                Err(TypeMapError::Empty) => Ok(Vec::new()),
                Err(e) => Err(e.into()),
            },
            Predictor::Classifier { model, kind } => class_probabilities(model, *kind, embedding)?
                .into_iter()
                .map(|(label, probability)| {
                    let ty = parse_type(&label).map_err(|e| HarnessError::Data(format!("class {label:?}: {e}")))?;
                    Ok(Prediction { ty, probability })
                })
                .collect(),
        }
    }

    /// One entry per symbol of `g`, in symbol-table order.
    pub fn suggest(&self, g: &CodeGraph) -> Result<Vec<SymbolSuggestion>> {
        self.model()
            .symbol_embeddings(g)?
            .into_iter()
            .map(|e| {
                Ok(SymbolSuggestion {
                    symbol: e.symbol,
                    candidates: self.candidates(&e.vector)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub file_id: String,
    pub symbol: usize,
    pub name: String,
    pub kind: SymbolKind,
    pub truth: TypeExpr,
    pub predicted: Option<TypeExpr>,
    /// Probability of the top type; 0 without a prediction.
    pub confidence: f64,
    pub exact: bool,
    pub up_to_parametric: bool,
    pub neutral: bool,
    pub rare: bool,
}

/// Annotation counts per type.
pub fn type_counts(graphs: &[CodeGraph]) -> BTreeMap<TypeExpr, usize> {
    let mut out = BTreeMap::new();
    for g in graphs {
        for (_, s) in g.annotated_symbols() {
            *out.entry(s.annotation.clone().expect("annotated")).or_insert(0) += 1;
        }
    }
    out
}

/// Scores the top prediction of every annotated symbol in `test`. Rarity
/// uses `train_counts`; neutrality uses the lattice over all truths and
/// predictions.
pub fn evaluate(
    predictor: &Predictor,
    test: &[CodeGraph],
    train_counts: &BTreeMap<TypeExpr, usize>,
) -> Result<Vec<EvalRecord>> {
    let per_file: Vec<Vec<EvalRecord>> = test
        .par_iter()
        .map(|g| -> Result<Vec<EvalRecord>> {
            let suggestions = predictor.suggest(g)?;
            let mut out = Vec::new();
            for s in suggestions {
                let info = &g.symbols[s.symbol];
                let Some(truth) = info.annotation.clone() else { continue };
                let top = s.candidates.first();
                let predicted = top.map(|p| p.ty.clone());
                let exact = predicted.as_ref() == Some(&truth);
                let up_to_parametric = predicted
                    .as_ref()
                    .is_some_and(|p| erase_type_parameters(p) == erase_type_parameters(&truth));
                out.push(EvalRecord {
                    file_id: g.file_id.clone(),
                    symbol: s.symbol,
                    name: info.name.clone(),
                    kind: info.kind,
                    rare: train_counts.get(&truth).copied().unwrap_or(0) < RARE_CUTOFF,
                    truth,
                    predicted,
                    confidence: top.map_or(0.0, |p| p.probability),
                    exact,
                    up_to_parametric,
                    neutral: false,
                })
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut records: Vec<EvalRecord> = per_file.into_iter().flatten().collect();
    let lattice = build_type_lattice(records.iter().flat_map(|r| std::iter::once(&r.truth).chain(r.predicted.as_ref())));
    for r in &mut records {
        r.neutral = r.predicted.as_ref().is_some_and(|p| check_neutral(p, &r.truth, &lattice));
    }
    Ok(records)
}

/// Leave-one-out exact match over a corpus: each annotated symbol is
/// predicted from the map of all the other annotated symbols.
pub fn self_exact_match(model: &Model, graphs: &[CodeGraph], config: &PredictionConfig) -> Result<f64> {
    let map = build_map(model, graphs)?;
    if map.len() < 2 {
        return Ok(0.0);
    }
    let hits: usize = (0..map.len())
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let m = &map.markers()[i];
            let mut nn = map.neighbours(&m.vector, config.k + 1)?;
            nn.retain(|n| n.marker != i);
            nn.truncate(config.k);
            let dist = map.distribution(&nn, config.p);
            Ok(usize::from(dist.first().is_some_and(|p| p.ty == m.ty)))
        })
        .sum::<Result<usize>>()?;
    Ok(hits as f64 / map.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub n: usize,
    pub exact: usize,
    pub up_to_parametric: usize,
    pub neutral: usize,
}

fn rate(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

impl Counts {
    fn add(&mut self, r: &EvalRecord) {
        self.n += 1;
        self.exact += usize::from(r.exact);
        self.up_to_parametric += usize::from(r.up_to_parametric);
        self.neutral += usize::from(r.neutral);
    }

    pub fn exact_rate(&self) -> f64 {
        rate(self.exact, self.n)
    }

    pub fn up_to_parametric_rate(&self) -> f64 {
        rate(self.up_to_parametric, self.n)
    }

    pub fn neutral_rate(&self) -> f64 {
        rate(self.neutral, self.n)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub all: Counts,
    pub common: Counts,
    pub rare: Counts,
    pub by_kind: BTreeMap<SymbolKind, Counts>,
}

impl Metrics {
    pub fn from_records(records: &[EvalRecord]) -> Metrics {
        let mut m = Metrics::default();
        for r in records {
            m.all.add(r);
            if r.rare {
                m.rare.add(r);
            } else {
                m.common.add(r);
            }
            m.by_kind.entry(r.kind).or_default().add(r);
        }
        m
    }

    /// `group.field = value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut group = |name: &str, c: &Counts| {
            let _ = writeln!(s, "{name}.symbols = {}", c.n);
            let _ = writeln!(s, "{name}.exact = {:.6}", c.exact_rate());
            let _ = writeln!(s, "{name}.up_to_parametric = {:.6}", c.up_to_parametric_rate());
            let _ = writeln!(s, "{name}.neutral = {:.6}", c.neutral_rate());
        };
        group("all", &self.all);
        group("common", &self.common);
        group("rare", &self.rare);
        for kind in [SymbolKind::Variable, SymbolKind::Parameter, SymbolKind::Return] {
            group(kind.as_str(), &self.by_kind.get(&kind).copied().unwrap_or_default());
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    /// Symbols with a prediction at or above the threshold.
    pub emitted: usize,
    pub recall: f64,
    /// Neutral rate among emitted predictions; `None` when nothing is emitted.
    pub precision: Option<f64>,
}

/// Whether `r` is emitted at `threshold`.
pub fn emitted_at(r: &EvalRecord, threshold: f64) -> bool {
    r.predicted.is_some() && r.confidence >= threshold
}

/// One point per threshold, in ascending threshold order.
pub fn pr_curve(records: &[EvalRecord], thresholds: &[f64]) -> Vec<PrPoint> {
    let mut ts = thresholds.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.into_iter()
        .map(|threshold| {
            let kept: Vec<&EvalRecord> = records.iter().filter(|r| emitted_at(r, threshold)).collect();
            let neutral = kept.iter().filter(|r| r.neutral).count();
            PrPoint {
                threshold,
                emitted: kept.len(),
                recall: rate(kept.len(), records.len()),
                precision: (!kept.is_empty()).then(|| rate(neutral, kept.len())),
            }
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `metrics.txt`, `pr_curve.csv` and `records.csv` into `dir`.
pub fn write_report(dir: &Path, records: &[EvalRecord], thresholds: &[f64]) -> Result<Metrics> {
    std::fs::create_dir_all(dir)?;
    let metrics = Metrics::from_records(records);
    std::fs::write(dir.join("metrics.txt"), metrics.to_text())?;
    let mut pr = String::from("threshold,emitted,recall,precision\n");
    for p in pr_curve(records, thresholds) {
        let precision = p.precision.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(pr, "{:.4},{},{:.6},{precision}", p.threshold, p.emitted, p.recall);
    }
    std::fs::write(dir.join("pr_curve.csv"), pr)?;
    let mut rec = String::from("file,symbol,name,kind,truth,predicted,confidence,exact,up_to_parametric,neutral,rare\n");
    for r in records {
        let _ = writeln!(
            rec,
            "{},{},{},{},{},{},{:.6},{},{},{},{}",
            csv_field(&r.file_id),
            r.symbol,
            csv_field(&r.name),
            r.kind.as_str(),
            csv_field(&r.truth.to_string()),
            csv_field(&r.predicted.as_ref().map(|t| t.to_string()).unwrap_or_default()),
            r.confidence,
            r.exact,
            r.up_to_parametric,
            r.neutral,
            r.rare
        );
    }
    std::fs::write(dir.join("records.csv"), rec)?;
    Ok(metrics)
}
