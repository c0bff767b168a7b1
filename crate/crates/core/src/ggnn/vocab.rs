use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::pygraph::{subtokenize, CodeGraph};

pub const DEFAULT_MIN_COUNT: usize = 2;
pub const DEFAULT_MAX_SIZE: usize = 10_000;

/// Subtoken vocabulary; index 0 is the unknown-subtoken entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const UNK: usize = 0;
    pub const UNK_TOKEN: &'static str = "<unk>";

    /// Keeps subtokens seen at least `min_count` times over all node labels,
    /// the `max_size` most frequent first (ties by subtoken text).
    pub fn build<'a>(graphs: impl IntoIterator<Item = &'a CodeGraph>, min_count: usize, max_size: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for g in graphs {
            for n in &g.nodes {
                for s in subtokenize(&n.label) {
                    *counts.entry(s).or_insert(0) += 1;
                }
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        kept.truncate(max_size);
        Vocabulary::from_tokens(kept.into_iter().map(|(s, _)| s))
    }

    /// Builds from known subtokens; the unknown entry is prepended.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all = vec![Self::UNK_TOKEN.to_string()];
        all.extend(tokens.into_iter().filter(|t| t != Self::UNK_TOKEN));
        Vocabulary::from(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn lookup(&self, subtoken: &str) -> usize {
        self.index.get(subtoken).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    /// Vocabulary ids of the subtokens of a node label; never empty.
    pub fn encode_label(&self, label: &str) -> Vec<usize> {
        let ids: Vec<usize> = subtokenize(label).iter().map(|s| self.lookup(s)).collect();
        if ids.is_empty() {
            vec![Self::UNK]
        } else {
            ids
        }
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}
