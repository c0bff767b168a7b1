//! Python source to code graph: token, syntax, vocabulary and symbol nodes
//! joined by eight labelled relations, plus the ground-truth annotations
//! that were stripped from the source.

mod extract;
mod flow;
mod graph;
mod subtoken;
mod syntax;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use extract::{extract, AnnotationSite, Extraction};
pub use graph::{
    read_corpus, write_corpus, CodeGraph, EdgeLabel, GraphFormatError, Node, NodeCategory,
    SymbolInfo, SymbolKind,
};
pub use subtoken::subtokenize;

pub const DEFAULT_NODE_CAP: usize = 50_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtractError {
    #[error("parse failure: {0}")]
    Parse(String),
    #[error("graph has {nodes} nodes, over the cap of {cap}")]
    TooLarge { nodes: usize, cap: usize },
}

#[derive(Debug, Clone)]
pub struct ExtractOptions {
    pub disabled_edges: BTreeSet<EdgeLabel>,
    pub node_cap: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            disabled_edges: BTreeSet::new(),
            node_cap: DEFAULT_NODE_CAP,
        }
    }
}

/// Builds the graph of `source`, dropping its extraction sites.
pub fn extract_graph(source: &str, options: &ExtractOptions) -> Result<CodeGraph, ExtractError> {
    extract("", source, options).map(|e| e.graph)
}

/// SHA-256 over the file with all whitespace runs collapsed.
pub fn content_hash(source: &str) -> String {
    let normalized: Vec<&str> = source.split_whitespace().collect();
    let digest = Sha256::digest(normalized.join(" ").as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct Diagnostic {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct CorpusExtraction {
    pub graphs: Vec<CodeGraph>,
    pub skipped: Vec<Diagnostic>,
    pub duplicates: usize,
}

/// Extracts every `.py` file below `root`, in path order. Files whose
/// normalized content hash was already seen are dropped; files that fail to
/// parse or exceed the node cap are skipped with a diagnostic.
pub fn extract_dir(root: &Path, options: &ExtractOptions) -> std::io::Result<CorpusExtraction> {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "py"))
        .map(|e| e.into_path())
        .collect();
    files.sort();

    let mut seen = BTreeSet::new();
    let mut unique = Vec::new();
    let mut out = CorpusExtraction::default();
    for path in files {
        let bytes = std::fs::read(&path)?;
        let text = String::from_utf8_lossy(&bytes).into_owned();
        if seen.insert(content_hash(&text)) {
            unique.push((path, text));
        } else {
            out.duplicates += 1;
        }
    }

    let results: Vec<(PathBuf, Result<CodeGraph, ExtractError>)> = unique
        .par_iter()
        .map(|(path, text)| {
            let id = path
                .strip_prefix(root)
                .unwrap_or(path)
                .to_string_lossy()
                .replace('\\', "/");
            (path.clone(), extract(&id, text, options).map(|e| e.graph))
        })
        .collect();
    for (path, r) in results {
        match r {
            Ok(g) => out.graphs.push(g),
            Err(e) => out.skipped.push(Diagnostic {
                path,
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}
