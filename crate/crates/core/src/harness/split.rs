use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::pygraph::CodeGraph;

#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<CodeGraph>,
    pub valid: Vec<CodeGraph>,
    pub test: Vec<CodeGraph>,
}

fn fingerprint(g: &CodeGraph) -> Vec<u8> {
    let mut anon = g.clone();
    anon.file_id.clear();
    Sha256::digest(anon.to_json_line().as_bytes()).to_vec()
}

/// File-level 70/10/20 split: train gets ⌊0.7n⌋, valid ⌊0.1n⌋, test the
/// rest. Graphs identical up to their file id are kept once (first in
/// file-id order). The assignment depends only on the set of graphs and
/// the seed.
pub fn split_corpus(mut graphs: Vec<CodeGraph>, seed: u64) -> Split {
    graphs.sort_by(|a, b| a.file_id.cmp(&b.file_id));
    let mut seen = BTreeSet::new();
    graphs.retain(|g| seen.insert(fingerprint(g)));
    graphs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = graphs.len();
    let n_train = n * 7 / 10;
    let n_valid = n / 10;
    let test = graphs.split_off(n_train + n_valid);
    let valid = graphs.split_off(n_train);
    Split {
        train: graphs,
        valid,
        test,
    }
}
