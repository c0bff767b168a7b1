use std::rc::Rc;

use crate::pygraph::CodeGraph;

use super::{EdgeKey, GnnConfig, Vocabulary};

/// Several graphs laid out as one disjoint graph, with the index vectors the
/// encoder needs.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub num_nodes: usize,
    /// Flattened subtoken ids of every node label, and the owning node of each.
    pub(crate) subtokens: Rc<[usize]>,
    pub(crate) subtoken_owner: Rc<[usize]>,
    pub(crate) inv_counts: Vec<f64>,
    /// Message sources per active edge key, in `GnnConfig::edge_keys` order.
    pub(crate) sources: Vec<(EdgeKey, Rc<[usize]>)>,
    /// Receiver of every message, concatenated in the same order.
    pub(crate) receivers: Rc<[usize]>,
    pub(crate) symbol_nodes: Rc<[usize]>,
    /// (graph position in the batch, symbol index within that graph).
    pub symbols: Vec<(usize, usize)>,
    pub node_offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&CodeGraph], vocab: &Vocabulary, config: &GnnConfig) -> GraphBatch {
        let mut subtokens = Vec::new();
        let mut owner = Vec::new();
        let mut inv_counts = Vec::new();
        let mut node_offsets = Vec::with_capacity(graphs.len());
        let mut symbol_nodes = Vec::new();
        let mut symbols = Vec::new();
        let keys = config.edge_keys();
        let mut srcs: Vec<Vec<usize>> = vec![Vec::new(); keys.len()];
        let mut recv: Vec<Vec<usize>> = vec![Vec::new(); keys.len()];
        let mut base = 0;
        for (gi, g) in graphs.iter().enumerate() {
            node_offsets.push(base);
            for (i, n) in g.nodes.iter().enumerate() {
                let ids = vocab.encode_label(&n.label);
                inv_counts.push(1.0 / ids.len() as f64);
                for id in ids {
                    subtokens.push(id);
                    owner.push(base + i);
                }
            }
            for (k, key) in keys.iter().enumerate() {
                for &(s, d) in g.edges_of(key.label) {
                    // an edge s→d carries h_d to s; its inverse carries h_s to d
                    let (to, from) = if key.inverse { (d, s) } else { (s, d) };
                    recv[k].push(base + to);
                    srcs[k].push(base + from);
                }
            }
            for (si, sym) in g.symbols.iter().enumerate() {
                symbol_nodes.push(base + sym.node);
                symbols.push((gi, si));
            }
            base += g.nodes.len();
        }
        let sources = keys
            .into_iter()
            .zip(srcs)
            .filter(|(_, s)| !s.is_empty())
            .map(|(k, s)| (k, Rc::from(s)))
            .collect();
        let receivers: Vec<usize> = recv.into_iter().flatten().collect();
        GraphBatch {
            num_nodes: base,
            subtokens: subtokens.into(),
            subtoken_owner: owner.into(),
            inv_counts,
            sources,
            receivers: receivers.into(),
            symbol_nodes: symbol_nodes.into(),
            symbols,
            node_offsets,
        }
    }

    pub fn num_symbols(&self) -> usize {
        self.symbol_nodes.len()
    }

    pub fn num_messages(&self) -> usize {
        self.receivers.len()
    }
}
