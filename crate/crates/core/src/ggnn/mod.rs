//! Gated graph neural network encoder: subtoken-mean initial states, T
//! rounds of per-label message passing with max aggregation and a shared
//! GRU update, and readout at symbol nodes.

mod batch;
mod vocab;

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{
    load_checkpoint, save_checkpoint, CheckpointHeader, Gru, KernelError, ParamId, ParamStore,
    Result, Tape, Tensor, Var,
};
use crate::pygraph::{CodeGraph, EdgeLabel};

pub use batch::GraphBatch;
pub use vocab::{Vocabulary, DEFAULT_MAX_SIZE, DEFAULT_MIN_COUNT};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_STEPS: usize = 8;
pub const INIT_SCALE: f64 = 0.1;

/// One message-passing relation: an edge label, forward or inverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct EdgeKey {
    pub label: EdgeLabel,
    pub inverse: bool,
}

impl EdgeKey {
    fn param_name(self) -> String {
        if self.inverse {
            format!("edge.{}.inv", self.label)
        } else {
            format!("edge.{}", self.label)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub dim: usize,
    pub steps: usize,
    /// Labels that carry messages, kept in canonical order.
    pub labels: Vec<String>,
    pub use_inverse_edges: bool,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            dim: DEFAULT_DIM,
            steps: DEFAULT_STEPS,
            labels: EdgeLabel::ALL.iter().map(|l| l.as_str().to_string()).collect(),
            use_inverse_edges: true,
        }
    }
}

impl GnnConfig {
    pub fn active_labels(&self) -> Vec<EdgeLabel> {
        let mut out: Vec<EdgeLabel> = EdgeLabel::ALL
            .into_iter()
            .filter(|l| self.labels.iter().any(|s| s.eq_ignore_ascii_case(l.as_str())))
            .collect();
        out.dedup();
        out
    }

    /// Drops the given labels from the active set.
    pub fn without(mut self, labels: &[EdgeLabel]) -> Self {
        self.labels.retain(|s| !labels.iter().any(|l| s.eq_ignore_ascii_case(l.as_str())));
        self
    }

    pub fn edge_keys(&self) -> Vec<EdgeKey> {
        let mut keys = Vec::new();
        for label in self.active_labels() {
            keys.push(EdgeKey { label, inverse: false });
            if self.use_inverse_edges {
                keys.push(EdgeKey { label, inverse: true });
            }
        }
        keys
    }

    fn validate(&self) -> Result<()> {
        let bad = |message: String| KernelError::Contract { op: "gnn config", message };
        if self.steps == 0 {
            return Err(bad("steps must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(bad("dim must be at least 1".into()));
        }
        for s in &self.labels {
            s.parse::<EdgeLabel>().map_err(bad)?;
        }
        Ok(())
    }
}

/// Embedding of one symbol: the final state of its symbol node.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeEmbedding {
    pub vector: Vec<f64>,
    /// Index into the graph's symbol table.
    pub symbol: usize,
}

/// Parameter layout of the training heads that sit on top of the encoder.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Class labels; index 0 is the unknown class. Empty means no classifier.
    pub classes: Vec<String>,
    /// Whether the classifier reads a learned linear projection of r_s.
    pub projection: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    gnn: GnnConfig,
    heads: HeadConfig,
    vocabulary: Vocabulary,
    extra: BTreeMap<String, String>,
}

/// Encoder parameters plus optional classifier/projection heads.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: GnnConfig,
    pub heads: HeadConfig,
    pub vocab: Vocabulary,
    /// Free-form key/value pairs stored with the checkpoint.
    pub extra: BTreeMap<String, String>,
    pub store: ParamStore,
    embed: ParamId,
    edges: BTreeMap<EdgeKey, ParamId>,
    gru: Gru,
}

/// Encoder parameters bound to one tape.
pub struct Bound {
    embed: Var,
    edges: BTreeMap<EdgeKey, Var>,
    gru: crate::diffkernel::GruVars,
}

impl Model {
    /// Fresh parameters drawn uniformly from ±[`INIT_SCALE`]; biases start at
    /// zero.
    pub fn new(config: GnnConfig, vocab: Vocabulary, heads: HeadConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let mut store = ParamStore::new();
        let embed = store.add_uniform("embed", vocab.len(), d, INIT_SCALE, &mut rng)?;
        let mut edges = BTreeMap::new();
        for key in config.edge_keys() {
            edges.insert(key, store.add_uniform(&key.param_name(), d, d, INIT_SCALE, &mut rng)?);
        }
        let gru = Gru::new(&mut store, "gru", d, INIT_SCALE, &mut rng)?;
        if !heads.classes.is_empty() {
            store.add_uniform("head.proto", heads.classes.len(), d, INIT_SCALE, &mut rng)?;
            store.add_zeros("head.bias", 1, heads.classes.len())?;
        }
        if heads.projection {
            store.add_uniform("head.proj", d, d, INIT_SCALE, &mut rng)?;
        }
        Ok(Model {
            config,
            heads,
            vocab,
            extra: BTreeMap::new(),
            store,
            embed,
            edges,
            gru,
        })
    }

    fn from_parts(meta: Metadata, store: ParamStore) -> Result<Model> {
        meta.gnn.validate()?;
        let embed = store.id("embed")?;
        let mut edges = BTreeMap::new();
        for key in meta.gnn.edge_keys() {
            edges.insert(key, store.id(&key.param_name())?);
        }
        let gru = Gru::from_store(&store, "gru")?;
        let d = meta.gnn.dim;
        if store.value(embed).shape() != (meta.vocabulary.len(), d) || gru.dim != d {
            return Err(KernelError::Format("parameter shapes disagree with the header".into()));
        }
        Ok(Model {
            config: meta.gnn,
            heads: meta.heads,
            vocab: meta.vocabulary,
            extra: meta.extra,
            store,
            embed,
            edges,
            gru,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn param(&self, name: &str) -> Result<ParamId> {
        self.store.id(name)
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            embed: tape.param(&self.store, self.embed),
            edges: self
                .edges
                .iter()
                .map(|(&k, &id)| (k, tape.param(&self.store, id)))
                .collect(),
            gru: self.gru.bind(tape, &self.store),
        }
    }

    /// h⁰ of every node: the mean of its subtoken embeddings.
    pub fn init_node_states(&self, tape: &mut Tape, bound: &Bound, batch: &GraphBatch) -> Result<Var> {
        let rows = tape.gather_rows(bound.embed, batch.subtokens.clone())?;
        let sums = tape.segment_sum(rows, batch.subtoken_owner.clone(), batch.num_nodes)?;
        let d = self.dim();
        let mut w = Tensor::zeros(batch.num_nodes, d);
        for (i, &c) in batch.inv_counts.iter().enumerate() {
            w.row_mut(i).iter_mut().for_each(|v| *v = c);
        }
        let w = tape.constant(w);
        tape.mul(sums, w)
    }

    /// T rounds of message passing from `h0`.
    pub fn propagate(&self, tape: &mut Tape, bound: &Bound, batch: &GraphBatch, h0: Var) -> Result<Var> {
        let n = batch.num_nodes;
        let mut h = h0;
        for _ in 0..self.config.steps {
            let agg = if batch.num_messages() == 0 {
                tape.constant(Tensor::zeros(n, self.dim()))
            } else {
                let mut parts = Vec::with_capacity(batch.sources.len());
                for (key, src) in &batch.sources {
                    let rows = tape.gather_rows(h, src.clone())?;
                    parts.push(tape.matmul_t(rows, bound.edges[key])?);
                }
                let msgs = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
                tape.segment_max(msgs, batch.receivers.clone(), n)?
            };
            h = bound.gru.cell(tape, agg, h)?;
        }
        Ok(h)
    }

    /// Symbol embeddings of the batch, one row per symbol in batch order.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, batch: &GraphBatch) -> Result<Var> {
        let h0 = self.init_node_states(tape, bound, batch)?;
        let h = self.propagate(tape, bound, batch, h0)?;
        tape.gather_rows(h, batch.symbol_nodes.clone())
    }

    /// Final node states of a single graph (for inspection and tests).
    pub fn node_states(&self, g: &CodeGraph) -> Result<Tensor> {
        let batch = GraphBatch::new(&[g], &self.vocab, &self.config);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let h0 = self.init_node_states(&mut tape, &bound, &batch)?;
        let h = self.propagate(&mut tape, &bound, &batch, h0)?;
        Ok(tape.value(h).clone())
    }

    pub fn symbol_embeddings(&self, g: &CodeGraph) -> Result<Vec<TypeEmbedding>> {
        if g.symbols.is_empty() {
            return Ok(Vec::new());
        }
        let batch = GraphBatch::new(&[g], &self.vocab, &self.config);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let r = self.encode(&mut tape, &bound, &batch)?;
        let r = tape.value(r);
        Ok((0..r.rows())
            .map(|i| TypeEmbedding {
                vector: r.row(i).to_vec(),
                symbol: i,
            })
            .collect())
    }

    /// Embeds every graph independently, in parallel; output order follows
    /// the input.
    pub fn embed_corpus(&self, graphs: &[CodeGraph]) -> Result<Vec<Vec<TypeEmbedding>>> {
        graphs.par_iter().map(|g| self.symbol_embeddings(g)).collect()
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let meta = Metadata {
            gnn: self.config.clone(),
            heads: self.heads.clone(),
            vocabulary: self.vocab.clone(),
            extra: self.extra.clone(),
        };
        let header = CheckpointHeader {
            dim: self.dim() as u32,
            vocab_size: self.vocab.len() as u32,
            metadata: serde_json::to_string(&meta).map_err(|e| KernelError::Format(e.to_string()))?,
        };
        save_checkpoint(w, &header, &self.store)
    }

    pub fn load<R: Read>(r: R) -> Result<Model> {
        let (header, store) = load_checkpoint(r)?;
        let meta: Metadata =
            serde_json::from_str(&header.metadata).map_err(|e| KernelError::Format(e.to_string()))?;
        if header.dim as usize != meta.gnn.dim || header.vocab_size as usize != meta.vocabulary.len() {
            return Err(KernelError::Format("header disagrees with metadata".into()));
        }
        Model::from_parts(meta, store)
    }

    /// The encoder alone: classifier prototypes, biases and projection are
    /// dropped.
    pub fn without_heads(&self) -> Result<Model> {
        let mut store = ParamStore::new();
        for id in self.store.ids() {
            let name = self.store.name(id);
            if !name.starts_with("head.") {
                store.add(name, self.store.value(id).clone())?;
            }
        }
        let meta = Metadata {
            gnn: self.config.clone(),
            heads: HeadConfig::default(),
            vocabulary: self.vocab.clone(),
            extra: self.extra.clone(),
        };
        Model::from_parts(meta, store)
    }

    /// Rounds every parameter to single precision, matching a save/load trip.
    pub fn round_to_f32(&mut self) {
        for id in self.store.ids().collect::<Vec<_>>() {
            for v in self.store.value_mut(id).data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}
