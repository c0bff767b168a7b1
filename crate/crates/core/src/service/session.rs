use std::collections::{BTreeMap, BTreeSet};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ApiError, ApiResult, AppState};
use crate::harness::CheckOutcome;
use crate::pygraph::{AnnotationSite, Extraction};
use crate::typeexpr::{parse_normalized, TypeExpr};
use crate::typemap::{Prediction, Provenance, TypeMap, TypeMapError};

/// One symbol of a served file with its cached embedding.
#[derive(Debug, Clone)]
pub struct SymbolEntry {
    pub id: String,
    pub name: String,
    pub kind: &'static str,
    pub line: Option<usize>,
    pub annotated: bool,
    pub site: Option<AnnotationSite>,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FileEntry {
    pub id: String,
    pub source: String,
    pub symbols: Vec<SymbolEntry>,
}

impl FileEntry {
    pub fn new(id: String, source: String, ex: Extraction, embeddings: Vec<crate::ggnn::TypeEmbedding>) -> Self {
        let mut vectors: BTreeMap<usize, Vec<f64>> = embeddings.into_iter().map(|e| (e.symbol, e.vector)).collect();
        let symbols = ex
            .graph
            .symbols
            .iter()
            .zip(ex.sites)
            .enumerate()
            .map(|(i, (s, site))| {
                let line = site.as_ref().map(|st| {
                    let at = st.replace.as_ref().map_or(st.insert_at, |r| r.start);
                    source[..at].matches('\n').count() + 1
                });
                SymbolEntry {
                    id: format!("{id}:{i}"),
                    name: s.name.clone(),
                    kind: s.kind.as_str(),
                    line,
                    annotated: s.annotation.is_some(),
                    site,
                    embedding: vectors.remove(&i).unwrap_or_default(),
                }
            })
            .collect();
        FileEntry { id, source, symbols }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: usize,
    pub action: Decision,
    pub symbol_id: String,
    #[serde(rename = "type")]
    pub ty: String,
    /// Checker verdict at accept time, when a checker is configured.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checker: Option<String>,
    /// Seconds since the Unix epoch.
    pub at: u64,
}

/// One reviewer's working state: a private copy of the map plus decisions.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub map: TypeMap,
    pub accepted: BTreeMap<String, TypeExpr>,
    pub rejected: BTreeMap<String, BTreeSet<TypeExpr>>,
    pub log: Vec<LogEntry>,
}

fn find<'a>(st: &'a AppState, symbol_id: &str) -> ApiResult<(&'a FileEntry, &'a SymbolEntry)> {
    let (file, idx) = symbol_id
        .rsplit_once(':')
        .and_then(|(f, i)| Some((f, i.parse::<usize>().ok()?)))
        .ok_or_else(|| ApiError::not_found(format!("unknown symbol {symbol_id:?}")))?;
    st.files
        .get(file)
        .and_then(|f| f.symbols.get(idx).map(|s| (f, s)))
        .ok_or_else(|| ApiError::not_found(format!("unknown symbol {symbol_id:?}")))
}

fn parse_decision_type(text: &str) -> ApiResult<TypeExpr> {
    let ty = parse_normalized(text).map_err(|e| ApiError::unprocessable(format!("type {text:?}: {e}")))?;
    if ty.is_top() {
        return Err(ApiError::unprocessable("Any carries no information and cannot be accepted"));
    }
    Ok(ty)
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn candidate_json(c: &Prediction) -> Value {
    json!({ "type": c.ty.to_string(), "probability": c.probability })
}

impl Session {
    pub fn new(id: String, map: TypeMap) -> Self {
        Session {
            id,
            map,
            accepted: BTreeMap::new(),
            rejected: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    fn is_pending(&self, s: &SymbolEntry) -> bool {
        !s.annotated && !self.accepted.contains_key(&s.id)
    }

    /// Map candidates for `s` with rejected types removed. Probabilities are
    /// left as computed.
    pub fn candidates(&self, st: &AppState, s: &SymbolEntry) -> ApiResult<Vec<Prediction>> {
        let all = match self.map.knn_predict(&s.embedding, &st.config) {
            Ok(p) => p,
            Err(TypeMapError::Empty) => Vec::new(),
            Err(e) => return Err(ApiError::internal(e.to_string())),
        };
        let rejected = self.rejected.get(&s.id);
        Ok(all
            .into_iter()
            .filter(|c| rejected.is_none_or(|r| !r.contains(&c.ty)))
            .collect())
    }

    fn top1(&self, st: &AppState) -> ApiResult<BTreeMap<String, Option<TypeExpr>>> {
        let mut out = BTreeMap::new();
        for f in st.files.values() {
            for s in f.symbols.iter().filter(|s| self.is_pending(s)) {
                out.insert(s.id.clone(), self.candidates(st, s)?.into_iter().next().map(|c| c.ty));
            }
        }
        Ok(out)
    }

    pub fn files(&self, st: &AppState) -> Value {
        let files: Vec<Value> = st
            .files
            .values()
            .map(|f| {
                let pending = f.symbols.iter().filter(|s| self.is_pending(s)).count();
                json!({ "file": f.id, "symbols": f.symbols.len(), "pending": pending })
            })
            .collect();
        json!({ "session": self.id, "files": files })
    }

    /// Pending symbols of `file`, most confident first.
    pub fn suggestions(&self, st: &AppState, file: &str) -> ApiResult<Value> {
        let f = st
            .files
            .get(file)
            .ok_or_else(|| ApiError::not_found(format!("unknown file {file:?}")))?;
        let mut rows = Vec::new();
        for s in f.symbols.iter().filter(|s| self.is_pending(s)) {
            let cands = self.candidates(st, s)?;
            let conf = cands.first().map_or(0.0, |c| c.probability);
            rows.push((conf, s, cands));
        }
        rows.sort_by(|a, b| b.0.total_cmp(&a.0));
        let suggestions: Vec<Value> = rows
            .into_iter()
            .map(|(conf, s, cands)| {
                json!({
                    "symbol_id": s.id,
                    "name": s.name,
                    "kind": s.kind,
                    "line": s.line,
                    "confidence": conf,
                    "needs_manual_type": cands.is_empty(),
                    "candidates": cands.iter().map(candidate_json).collect::<Vec<_>>(),
                })
            })
            .collect();
        Ok(json!({ "session": self.id, "file": f.id, "source": f.source, "suggestions": suggestions }))
    }

    fn check_pending(&self, s: &SymbolEntry) -> ApiResult<()> {
        if s.annotated {
            return Err(ApiError::conflict(format!("{} already carries an annotation", s.id)));
        }
        if self.accepted.contains_key(&s.id) {
            return Err(ApiError::conflict(format!("{} was already decided", s.id)));
        }
        Ok(())
    }

    /// Binds `ty` at the symbol's embedding and reports every other pending
    /// symbol whose top candidate changed as a result.
    pub fn accept(&mut self, st: &AppState, symbol_id: &str, ty: &str) -> ApiResult<Value> {
        let (file, s) = find(st, symbol_id)?;
        self.check_pending(s)?;
        let ty = parse_decision_type(ty)?;
        let checker = match (&st.checker, &s.site) {
            (Some(c), Some(site)) if c.is_configured() => Some(match c.check(&file.source, site, &ty) {
                CheckOutcome::Accept => "accept".to_string(),
                CheckOutcome::Reject => "reject".to_string(),
                CheckOutcome::Skip(why) => format!("skip: {why}"),
            }),
            _ => None,
        };
        let before = self.top1(st)?;
        let marker = self
            .map
            .add_binding(&s.embedding, ty.clone(), Provenance::Accepted)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        self.accepted.insert(s.id.clone(), ty.clone());
        let after = self.top1(st)?;
        let changed: Vec<Value> = after
            .iter()
            .filter(|(id, top)| before.get(*id) != Some(*top))
            .map(|(id, top)| {
                json!({
                    "symbol_id": id,
                    "before": before.get(id).cloned().flatten().map(|t| t.to_string()),
                    "after": top.as_ref().map(|t| t.to_string()),
                })
            })
            .collect();
        self.log.push(LogEntry {
            seq: self.log.len(),
            action: Decision::Accept,
            symbol_id: s.id.clone(),
            ty: ty.to_string(),
            checker: checker.clone(),
            at: now(),
        });
        Ok(json!({
            "symbol_id": s.id,
            "type": ty.to_string(),
            "marker": marker,
            "checker": checker,
            "changed": changed,
        }))
    }

    /// Drops `ty` from the symbol's candidates.
    pub fn reject(&mut self, st: &AppState, symbol_id: &str, ty: &str) -> ApiResult<Value> {
        let (_, s) = find(st, symbol_id)?;
        self.check_pending(s)?;
        let ty = parse_decision_type(ty)?;
        if !self.candidates(st, s)?.iter().any(|c| c.ty == ty) {
            return Err(ApiError::conflict(format!("{ty} is not a current candidate of {}", s.id)));
        }
        self.rejected.entry(s.id.clone()).or_default().insert(ty.clone());
        self.log.push(LogEntry {
            seq: self.log.len(),
            action: Decision::Reject,
            symbol_id: s.id.clone(),
            ty: ty.to_string(),
            checker: None,
            at: now(),
        });
        let cands = self.candidates(st, s)?;
        Ok(json!({
            "symbol_id": s.id,
            "needs_manual_type": cands.is_empty(),
            "candidates": cands.iter().map(candidate_json).collect::<Vec<_>>(),
        }))
    }

    pub fn neighbors(&self, st: &AppState, symbol_id: &str, k: usize) -> ApiResult<Value> {
        let (_, s) = find(st, symbol_id)?;
        let nn = match self.map.neighbours(&s.embedding, k) {
            Ok(nn) => nn,
            Err(TypeMapError::Empty) => Vec::new(),
            Err(e) => return Err(ApiError::internal(e.to_string())),
        };
        let rows: Vec<Value> = nn
            .iter()
            .map(|n| {
                let m = &self.map.markers()[n.marker];
                json!({
                    "marker": n.marker,
                    "type": m.ty.to_string(),
                    "distance": n.distance,
                    "provenance": m.provenance.as_str(),
                })
            })
            .collect();
        Ok(json!({ "symbol_id": s.id, "neighbors": rows }))
    }

    /// Re-applies a decision log in order, without consulting the checker.
    pub fn replay(&mut self, st: &AppState, log: &[LogEntry]) -> ApiResult<()> {
        for e in log {
            match e.action {
                Decision::Accept => {
                    let (_, s) = find(st, &e.symbol_id)?;
                    self.check_pending(s)?;
                    let ty = parse_decision_type(&e.ty)?;
                    self.map
                        .add_binding(&s.embedding, ty.clone(), Provenance::Accepted)
                        .map_err(|err| ApiError::internal(err.to_string()))?;
                    self.accepted.insert(s.id.clone(), ty);
                }
                Decision::Reject => {
                    self.reject(st, &e.symbol_id, &e.ty)?;
                    self.log.pop();
                }
            }
            self.log.push(LogEntry {
                seq: self.log.len(),
                ..e.clone()
            });
        }
        Ok(())
    }
}
