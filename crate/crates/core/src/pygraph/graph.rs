use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::typeexpr::{parse_type, TypeExpr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeCategory {
    Token,
    Nonterminal,
    Vocabulary,
    Symbol,
}

impl NodeCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeCategory::Token => "token",
            NodeCategory::Nonterminal => "nonterminal",
            NodeCategory::Vocabulary => "vocabulary",
            NodeCategory::Symbol => "symbol",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Node {
    pub category: NodeCategory,
    pub label: String,
}

impl Node {
    pub fn new(category: NodeCategory, label: impl Into<String>) -> Self {
        Node {
            category,
            label: label.into(),
        }
    }
}

/// The closed set of edge relations, in a fixed canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeLabel {
    NextToken,
    Child,
    NextMayUse,
    NextLexicalUse,
    AssignedFrom,
    ReturnsTo,
    OccurrenceOf,
    SubtokenOf,
}

impl EdgeLabel {
    pub const ALL: [EdgeLabel; 8] = [
        EdgeLabel::NextToken,
        EdgeLabel::Child,
        EdgeLabel::NextMayUse,
        EdgeLabel::NextLexicalUse,
        EdgeLabel::AssignedFrom,
        EdgeLabel::ReturnsTo,
        EdgeLabel::OccurrenceOf,
        EdgeLabel::SubtokenOf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeLabel::NextToken => "NEXT_TOKEN",
            EdgeLabel::Child => "CHILD",
            EdgeLabel::NextMayUse => "NEXT_MAY_USE",
            EdgeLabel::NextLexicalUse => "NEXT_LEXICAL_USE",
            EdgeLabel::AssignedFrom => "ASSIGNED_FROM",
            EdgeLabel::ReturnsTo => "RETURNS_TO",
            EdgeLabel::OccurrenceOf => "OCCURRENCE_OF",
            EdgeLabel::SubtokenOf => "SUBTOKEN_OF",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EdgeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EdgeLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EdgeLabel::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown edge label {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolKind {
    Variable,
    Parameter,
    Return,
}

impl SymbolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SymbolKind::Variable => "variable",
            SymbolKind::Parameter => "parameter",
            SymbolKind::Return => "return",
        }
    }
}

impl FromStr for SymbolKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "variable" => Ok(SymbolKind::Variable),
            "parameter" => Ok(SymbolKind::Parameter),
            "return" => Ok(SymbolKind::Return),
            _ => Err(format!("unknown symbol kind {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolInfo {
    pub node: usize,
    pub kind: SymbolKind,
    pub name: String,
    /// Ground-truth annotation, already normalized. Never `Any` or `None`.
    pub annotation: Option<TypeExpr>,
}

/// A file's graph: nodes, forward edges per label, and symbol table entries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CodeGraph {
    pub file_id: String,
    pub nodes: Vec<Node>,
    /// Sorted, duplicate-free edge lists. Labels without edges are absent.
    pub edges: BTreeMap<EdgeLabel, Vec<(usize, usize)>>,
    pub symbols: Vec<SymbolInfo>,
}

#[derive(Debug, Error)]
pub enum GraphFormatError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: invalid graph: {message}")]
    Invalid { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CodeGraph {
    pub fn edges_of(&self, label: EdgeLabel) -> &[(usize, usize)] {
        self.edges.get(&label).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(Vec::len).sum()
    }

    pub fn annotated_symbols(&self) -> impl Iterator<Item = (usize, &SymbolInfo)> {
        self.symbols
            .iter()
            .enumerate()
            .filter(|(_, s)| s.annotation.is_some())
    }

    /// Drops the given labels from the edge map.
    pub fn without_labels(&self, labels: &[EdgeLabel]) -> CodeGraph {
        let mut g = self.clone();
        for l in labels {
            g.edges.remove(l);
        }
        g
    }

    /// Checks the structural invariants; returns a description of the first
    /// violation.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.nodes.len();
        for (label, list) in &self.edges {
            for &(s, d) in list {
                if s >= n || d >= n {
                    return Err(format!("{label} edge ({s}, {d}) out of range for {n} nodes"));
                }
                if *label == EdgeLabel::OccurrenceOf && s == d {
                    return Err(format!("OCCURRENCE_OF self-loop on node {s}"));
                }
            }
        }
        for sym in &self.symbols {
            match self.nodes.get(sym.node) {
                Some(node) if node.category == NodeCategory::Symbol => {}
                Some(_) => return Err(format!("symbol {:?} points at a non-symbol node", sym.name)),
                None => return Err(format!("symbol {:?} node {} out of range", sym.name, sym.node)),
            }
            if let Some(t) = &sym.annotation {
                if t.is_top() || t.is_none() {
                    return Err(format!("symbol {:?} carries a dropped annotation {t}", sym.name));
                }
            }
        }
        Ok(())
    }

    /// One JSON object on a single line. Keys and edge labels are emitted in
    /// a fixed order.
    pub fn to_json_line(&self) -> String {
        let edges: serde_json::Map<String, Value> = self
            .edges
            .iter()
            .map(|(l, list)| {
                let pairs: Vec<Value> = list
                    .iter()
                    .map(|&(s, d)| Value::Array(vec![s.into(), d.into()]))
                    .collect();
                (l.as_str().to_string(), Value::Array(pairs))
            })
            .collect();
        let record = GraphRecordOut {
            file_id: &self.file_id,
            nodes: self
                .nodes
                .iter()
                .map(|n| (n.category.as_str(), n.label.as_str()))
                .collect(),
            edges: OrderedEdges(self.edges.keys().copied().collect(), edges),
            symbols: self
                .symbols
                .iter()
                .map(|s| {
                    (
                        s.node,
                        s.kind.as_str(),
                        s.name.as_str(),
                        s.annotation.as_ref().map(|t| t.to_string()),
                    )
                })
                .collect(),
        };
        serde_json::to_string(&record).expect("graph records always serialize")
    }

    /// Inverse of [`CodeGraph::to_json_line`]; `line` is used for error
    /// messages only.
    pub fn from_json_line(text: &str, line: usize) -> Result<CodeGraph, GraphFormatError> {
        let malformed = |message: String| GraphFormatError::Malformed { line, message };
        let rec: GraphRecordIn =
            serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
        let nodes = rec
            .nodes
            .into_iter()
            .map(|(c, label)| Node { category: c, label })
            .collect();
        let mut edges = BTreeMap::new();
        for (name, pairs) in rec.edges {
            let label: EdgeLabel = name.parse().map_err(malformed)?;
            let mut list: Vec<(usize, usize)> = pairs.into_iter().map(|[s, d]| (s, d)).collect();
            list.sort_unstable();
            list.dedup();
            edges.insert(label, list);
        }
        let mut symbols = Vec::with_capacity(rec.symbols.len());
        for (node, kind, name, ann) in rec.symbols {
            let kind: SymbolKind = kind.parse().map_err(malformed)?;
            let annotation = match ann {
                Some(text) => Some(parse_type(&text).map_err(|e| malformed(e.to_string()))?),
                None => None,
            };
            symbols.push(SymbolInfo {
                node,
                kind,
                name,
                annotation,
            });
        }
        let g = CodeGraph {
            file_id: rec.file_id,
            nodes,
            edges,
            symbols,
        };
        g.validate()
            .map_err(|message| GraphFormatError::Invalid { line, message })?;
        Ok(g)
    }
}

#[derive(Serialize)]
struct GraphRecordOut<'a> {
    file_id: &'a str,
    nodes: Vec<(&'static str, &'a str)>,
    edges: OrderedEdges,
    symbols: Vec<(usize, &'static str, &'a str, Option<String>)>,
}

// serde_json's Map is sorted by key; edges keep the canonical label order.
struct OrderedEdges(Vec<EdgeLabel>, serde_json::Map<String, Value>);

impl Serialize for OrderedEdges {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = serializer.serialize_map(Some(self.0.len()))?;
        for l in &self.0 {
            m.serialize_entry(l.as_str(), &self.1[l.as_str()])?;
        }
        m.end()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecordIn {
    file_id: String,
    nodes: Vec<(NodeCategory, String)>,
    edges: BTreeMap<String, Vec<[usize; 2]>>,
    symbols: Vec<(usize, String, String, Option<String>)>,
}

/// Reads a JSON-lines graph corpus, skipping blank lines.
pub fn read_corpus<R: std::io::BufRead>(reader: R) -> Result<Vec<CodeGraph>, GraphFormatError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(CodeGraph::from_json_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn write_corpus<W: std::io::Write>(mut w: W, graphs: &[CodeGraph]) -> std::io::Result<()> {
    for g in graphs {
        writeln!(w, "{}", g.to_json_line())?;
    }
    Ok(())
}
