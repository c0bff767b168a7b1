//! Training objectives over symbol embeddings: classification against
//! type prototypes, the triplet hinge, the batch similarity loss, and their
//! combination; plus minibatch grouping.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{KernelError, Result, Tape, Tensor, Var};
use crate::ggnn::{GraphBatch, Model};
use crate::pygraph::CodeGraph;
use crate::typeexpr::{erase_type_parameters, TypeExpr};

pub const DEFAULT_MARGIN: f64 = 2.0;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_CLASS_MIN_COUNT: usize = 10;
pub const UNK_CLASS: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Classification over full types read directly from r_s.
    Class,
    /// Similarity loss alone.
    Space,
    /// Similarity loss plus classification of W·r_s over erased types.
    Typilus,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Class => "class",
            LossKind::Space => "space",
            LossKind::Typilus => "typilus",
        }
    }

    pub fn uses_classes(self) -> bool {
        self != LossKind::Space
    }

    /// Class label of a ground-truth type under this objective.
    pub fn class_label(self, t: &TypeExpr) -> String {
        match self {
            LossKind::Typilus => erase_type_parameters(t).to_string(),
            _ => t.to_string(),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "class" => Ok(LossKind::Class),
            "space" => Ok(LossKind::Space),
            "typilus" => Ok(LossKind::Typilus),
            _ => Err(format!("unknown loss {s:?}; expected class, space or typilus")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub margin: f64,
    pub lambda: f64,
    /// A batch closes once it holds at least this many annotated symbols.
    pub batch_symbols: usize,
    pub class_min_count: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Typilus,
            margin: DEFAULT_MARGIN,
            lambda: DEFAULT_LAMBDA,
            batch_symbols: 256,
            class_min_count: DEFAULT_CLASS_MIN_COUNT,
            epochs: 50,
            seed: 0,
        }
    }
}

/// Class labels with the unknown class at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl ClassVocabulary {
    /// Labels seen at least `min_count` times, ordered by count then text.
    pub fn build<'a>(labels: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for l in labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        let mut kept: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(l, c)| c >= min_count && l != UNK_CLASS).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut all = vec![UNK_CLASS.to_string()];
        all.extend(kept.into_iter().map(|(l, _)| l.to_string()));
        ClassVocabulary::from_labels(all)
    }

    /// Wraps a stored label list whose first entry is the unknown class.
    pub fn from_labels(labels: Vec<String>) -> Self {
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        ClassVocabulary { labels, index }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.len() <= 1
    }

    pub fn lookup(&self, label: &str) -> usize {
        self.index.get(label).copied().unwrap_or(0)
    }
}

/// Mean over rows of −log softmax(r·P̃ᵀ + b)[class].
pub fn classification_loss(tape: &mut Tape, r: Var, classes: &[usize], proto: Var, bias: Var) -> Result<Var> {
    let logits = tape.matmul_t(r, proto)?;
    let logits = tape.add(logits, bias)?;
    let per_row = tape.softmax_xent(logits, classes.to_vec())?;
    Ok(tape.mean(per_row))
}

/// Mean over rows of h(‖s−pos‖₁ − ‖s−neg‖₁, m) with h(x, m) = max(x + m, 0).
///
/// The printed form h(‖s−neg‖₁ − ‖s−pos‖₁, m) grows as the negative moves
/// away, which contradicts the stated aim of keeping s closer to the positive
/// than to the negative by the margin; this uses the orientation that
/// matches that aim. Both agree at equal distances, where the loss is m.
pub fn triplet_loss(tape: &mut Tape, s: Var, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let dp = tape.l1_rows(s, pos)?;
    let dn = tape.l1_rows(s, neg)?;
    let x = tape.sub(dp, dn)?;
    let h = tape.hinge(x, margin);
    Ok(tape.mean(h))
}

/// Per-symbol quantities of the similarity loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceSets {
    /// Largest distance to a same-typed symbol; `None` when there is none.
    pub d_pos_max: Option<f64>,
    /// Smallest distance to a differently typed symbol.
    pub d_neg_min: Option<f64>,
    /// Same-typed symbols farther than d⁻min − m.
    pub pull: Vec<usize>,
    /// Differently typed symbols closer than d⁺max + m.
    pub push: Vec<usize>,
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Evaluates the selection sets for every row of `r` given per-row type ids.
/// Sets are empty unless the symbol has both a same-typed and a differently
/// typed partner.
pub fn space_sets(r: &Tensor, types: &[usize], margin: f64) -> Vec<SpaceSets> {
    let n = r.rows();
    (0..n)
        .map(|s| {
            let dist: Vec<f64> = (0..n).map(|j| l1(r.row(s), r.row(j))).collect();
            let pos: Vec<usize> = (0..n).filter(|&j| j != s && types[j] == types[s]).collect();
            let neg: Vec<usize> = (0..n).filter(|&j| types[j] != types[s]).collect();
            let d_pos_max = pos.iter().map(|&j| dist[j]).reduce(f64::max);
            let d_neg_min = neg.iter().map(|&j| dist[j]).reduce(f64::min);
            let (pull, push) = match (d_pos_max, d_neg_min) {
                (Some(dp), Some(dn)) => (
                    pos.iter().copied().filter(|&j| dist[j] > dn - margin).collect(),
                    neg.iter().copied().filter(|&j| dist[j] < dp + margin).collect(),
                ),
                _ => (Vec::new(), Vec::new()),
            };
            SpaceSets {
                d_pos_max,
                d_neg_min,
                pull,
                push,
            }
        })
        .collect()
}

/// The similarity loss and its two averaged components.
#[derive(Debug, Clone, Copy)]
pub struct SpaceLoss {
    /// pull − push; may be negative.
    pub total: Var,
    pub pull: Var,
    pub push: Var,
}

/// Batch mean over symbols of mean-distance-to-P₊ minus mean-distance-to-P₋.
pub fn space_loss(tape: &mut Tape, r: Var, types: &[usize], margin: f64) -> Result<SpaceLoss> {
    let n = tape.shape(r).0;
    if types.len() != n {
        return Err(KernelError::ShapeMismatch {
            op: "space_loss",
            left: tape.shape(r),
            right: (types.len(), 1),
        });
    }
    let sets = space_sets(tape.value(r), types, margin);
    let scale = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let term = |tape: &mut Tape, pick: fn(&SpaceSets) -> &Vec<usize>| -> Result<Var> {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut w = Vec::new();
        for (s, set) in sets.iter().enumerate() {
            let members = pick(set);
            for &j in members {
                a.push(s);
                b.push(j);
                w.push(scale / members.len() as f64);
            }
        }
        if a.is_empty() {
            let zero = tape.constant(Tensor::zeros(1, 1));
            return Ok(tape.sum(zero));
        }
        let ra = tape.gather_rows(r, a)?;
        let rb = tape.gather_rows(r, b)?;
        let d = tape.l1_rows(ra, rb)?;
        let wv = tape.constant(Tensor::new(w.len(), 1, w)?);
        let wd = tape.mul(d, wv)?;
        Ok(tape.sum(wd))
    };
    let pull = term(tape, |s| &s.pull)?;
    let push = term(tape, |s| &s.push)?;
    let total = tape.sub(pull, push)?;
    Ok(SpaceLoss { total, pull, push })
}

/// Loss value and its parts for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub space: Option<SpaceLoss>,
    pub class: Option<Var>,
}

/// space + λ·class(W·r, erased classes). With λ = 0 the class term is not
/// evaluated and the result is the space loss itself.
#[allow(clippy::too_many_arguments)]
pub fn typilus_loss(
    tape: &mut Tape,
    r: Var,
    types: &[usize],
    classes: &[usize],
    proj: Var,
    proto: Var,
    bias: Var,
    margin: f64,
    lambda: f64,
) -> Result<LossTerms> {
    let space = space_loss(tape, r, types, margin)?;
    if lambda == 0.0 {
        return Ok(LossTerms {
            total: space.total,
            space: Some(space),
            class: None,
        });
    }
    let projected = tape.matmul_t(r, proj)?;
    let class = classification_loss(tape, projected, classes, proto, bias)?;
    let weighted = tape.scale(class, lambda);
    let total = tape.add(space.total, weighted)?;
    Ok(LossTerms {
        total,
        space: Some(space),
        class: Some(class),
    })
}

/// Shuffles the graphs that carry annotations and groups whole graphs until
/// each batch holds at least `batch_symbols` annotated symbols. The order
/// depends only on `seed` and `epoch`.
pub fn make_batches(graphs: &[CodeGraph], batch_symbols: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..graphs.len())
        .filter(|&i| graphs[i].annotated_symbols().next().is_some())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut count = 0;
    for i in order {
        cur.push(i);
        count += graphs[i].annotated_symbols().count();
        if count >= batch_symbols.max(1) {
            out.push(std::mem::take(&mut cur));
            count = 0;
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Evaluated loss of one batch of graphs under `config`; `None` if the batch
/// holds no annotated symbol.
pub fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    graphs: &[&CodeGraph],
    config: &TrainConfig,
) -> Result<Option<LossTerms>> {
    let batch = GraphBatch::new(graphs, &model.vocab, &model.config);
    let mut rows = Vec::new();
    let mut truths: Vec<&TypeExpr> = Vec::new();
    for (k, &(gi, si)) in batch.symbols.iter().enumerate() {
        if let Some(t) = &graphs[gi].symbols[si].annotation {
            rows.push(k);
            truths.push(t);
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let bound = model.bind(tape);
    let all = model.encode(tape, &bound, &batch)?;
    let r = tape.gather_rows(all, rows)?;

    let mut ids: HashMap<&TypeExpr, usize> = HashMap::new();
    let types: Vec<usize> = truths
        .iter()
        .map(|t| {
            let next = ids.len();
            *ids.entry(t).or_insert(next)
        })
        .collect();
    let classes = ClassVocabulary::from_labels(model.heads.classes.clone());
    let class_ids: Vec<usize> = truths
        .iter()
        .map(|t| classes.lookup(&config.loss.class_label(t)))
        .collect();
    let head = |tape: &mut Tape, name: &str| -> Result<Var> {
        let id = model.param(name)?;
        Ok(tape.param(&model.store, id))
    };
    let terms = match config.loss {
        LossKind::Class => {
            let (proto, bias) = (head(tape, "head.proto")?, head(tape, "head.bias")?);
            let class = classification_loss(tape, r, &class_ids, proto, bias)?;
            LossTerms {
                total: class,
                space: None,
                class: Some(class),
            }
        }
        LossKind::Space => {
            let space = space_loss(tape, r, &types, config.margin)?;
            LossTerms {
                total: space.total,
                space: Some(space),
                class: None,
            }
        }
        LossKind::Typilus => {
            let (proj, proto, bias) = (
                head(tape, "head.proj")?,
                head(tape, "head.proto")?,
                head(tape, "head.bias")?,
            );
            typilus_loss(tape, r, &types, &class_ids, proj, proto, bias, config.margin, config.lambda)?
        }
    };
    Ok(Some(terms))
}

/// Classifier distribution over known classes for one embedding, highest
/// first. The unknown class is dropped and the rest renormalized, so a type
/// outside the class vocabulary always has probability zero.
pub fn class_probabilities(model: &Model, kind: LossKind, r: &[f64]) -> Result<Vec<(String, f64)>> {
    let get = |name: &str| -> Result<&Tensor> { Ok(model.store.value(model.param(name)?)) };
    let (proto, bias) = (get("head.proto")?, get("head.bias")?);
    let x: Vec<f64> = if kind == LossKind::Typilus {
        let w = get("head.proj")?;
        (0..w.rows()).map(|i| l1_dot(w.row(i), r)).collect()
    } else {
        r.to_vec()
    };
    let logits: Vec<f64> = (0..proto.rows()).map(|c| l1_dot(proto.row(c), &x) + bias.get(0, c)).collect();
    let m = logits[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits[1..].iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut out: Vec<(String, f64)> = model.heads.classes[1..]
        .iter()
        .cloned()
        .zip(exps.into_iter().map(|e| e / z))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

fn l1_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
