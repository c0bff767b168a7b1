//! Type suggestion for Python source: code graphs, a gated graph neural
//! network encoder trained with a similarity objective, and an adaptive
//! nearest-neighbour map from embeddings to types.

pub mod typeexpr;
pub mod diffkernel;
pub mod ggnn;
pub mod harness;
pub mod objective;
pub mod pygraph;
pub mod service;
pub mod typemap;
