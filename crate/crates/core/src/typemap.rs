//! The type map: embedding markers labelled with types, an L1 nearest
//! neighbour index over them, and distance-weighted kNN prediction.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkernel::KernelError;
use crate::ggnn::Model;
use crate::pygraph::CodeGraph;
use crate::typeexpr::{parse_type, TypeExpr};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_P: f64 = 2.0;
/// Maps with at least this many markers are searched through the tree.
pub const TREE_THRESHOLD: usize = 4096;
pub const MIN_DISTANCE: f64 = 1e-9;
pub const MAP_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TSMP";
const LEAF_SIZE: usize = 32;
const TREE_SEED: u64 = 0x7f4a_7c15;

#[derive(Debug, Error)]
pub enum TypeMapError {
    #[error("the type map is empty; no prediction is possible")]
    Empty,
    #[error("vector has dimension {got}, the map expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("markers cannot carry the top type")]
    TopType,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("invalid map file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] KernelError),
}

pub type Result<T> = std::result::Result<T, TypeMapError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Corpus,
    Accepted,
    Manual,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Corpus => "corpus",
            Provenance::Accepted => "accepted",
            Provenance::Manual => "manual",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [Provenance::Corpus, Provenance::Accepted, Provenance::Manual].get(c as usize).copied()
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marker {
    /// Stored at f32 precision so that a saved map reloads bit-identically.
    pub vector: Vec<f64>,
    pub ty: TypeExpr,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionConfig {
    pub k: usize,
    pub p: f64,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig {
            k: DEFAULT_K,
            p: DEFAULT_P,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbour {
    pub marker: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub ty: TypeExpr,
    pub probability: f64,
}

#[derive(Debug, Clone)]
enum TreeNode {
    Split {
        dir: Vec<f64>,
        /// max |dir_i|; turns a projection gap into an L1 lower bound.
        dir_max: f64,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(Vec<usize>),
}

/// Random-projection tree. Each split is a random direction cut at the
/// median projection; search is best-first with the bound
/// ‖x − q‖₁ ≥ |u·x − u·q| / ‖u‖∞, so results are exact.
#[derive(Debug, Clone)]
struct ProjectionTree {
    nodes: Vec<TreeNode>,
    rng: ChaCha8Rng,
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ProjectionTree {
    fn build(markers: &[Marker], dim: usize) -> Self {
        let mut t = ProjectionTree {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(TREE_SEED),
        };
        let all: Vec<usize> = (0..markers.len()).collect();
        t.grow(markers, dim, all);
        t
    }

    fn grow(&mut self, markers: &[Marker], dim: usize, ids: Vec<usize>) -> usize {
        let at = self.nodes.len();
        self.nodes.push(TreeNode::Leaf(Vec::new()));
        self.nodes[at] = self.split(markers, dim, ids);
        at
    }

    fn split(&mut self, markers: &[Marker], dim: usize, ids: Vec<usize>) -> TreeNode {
        if ids.len() <= LEAF_SIZE || dim == 0 {
            return TreeNode::Leaf(ids);
        }
        let dir: Vec<f64> = (0..dim).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
        let dir_max = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut proj: Vec<f64> = ids.iter().map(|&i| dot(&dir, &markers[i].vector)).collect();
        let mut sorted = proj.clone();
        sorted.sort_by(f64::total_cmp);
        let threshold = sorted[sorted.len() / 2];
        let (mut l, mut r) = (Vec::new(), Vec::new());
        for (&i, p) in ids.iter().zip(proj.drain(..)) {
            if p < threshold {
                l.push(i);
            } else {
                r.push(i);
            }
        }
        if l.is_empty() || r.is_empty() || dir_max == 0.0 {
            return TreeNode::Leaf(ids);
        }
        let left = self.grow(markers, dim, l);
        let right = self.grow(markers, dim, r);
        TreeNode::Split {
            dir,
            dir_max,
            threshold,
            left,
            right,
        }
    }

    fn insert(&mut self, markers: &[Marker], dim: usize, id: usize) {
        let v = &markers[id].vector;
        let mut at = 0;
        loop {
            match &mut self.nodes[at] {
                TreeNode::Split {
                    dir,
                    threshold,
                    left,
                    right,
                    ..
                } => at = if dot(dir, v) < *threshold { *left } else { *right },
                TreeNode::Leaf(ids) => {
                    ids.push(id);
                    if ids.len() > 2 * LEAF_SIZE {
                        let ids = std::mem::take(ids);
                        self.nodes[at] = self.split(markers, dim, ids);
                    }
                    return;
                }
            }
        }
    }

    fn search(&self, markers: &[Marker], q: &[f64], k: usize) -> Vec<Neighbour> {
        let mut best = TopK::new(k);
        let mut heap = BinaryHeap::new();
        heap.push(Pending(0.0, 0));
        while let Some(Pending(bound, at)) = heap.pop() {
            if best.prunes(bound) {
                break;
            }
            match &self.nodes[at] {
                TreeNode::Leaf(ids) => {
                    for &i in ids {
                        best.offer(i, l1(&markers[i].vector, q));
                    }
                }
                TreeNode::Split {
                    dir,
                    dir_max,
                    threshold,
                    left,
                    right,
                } => {
                    let p = dot(dir, q);
                    let gap = (p - threshold).abs() / dir_max;
                    // slack against rounding in the projections
                    let far_bound = bound.max(gap * (1.0 - 1e-9) - 1e-12);
                    let (near, far) = if p < *threshold { (*left, *right) } else { (*right, *left) };
                    heap.push(Pending(bound, near));
                    heap.push(Pending(far_bound, far));
                }
            }
        }
        best.into_sorted()
    }
}

/// Min-heap entry: lower bound on distance, node index.
struct Pending(f64, usize);

impl PartialEq for Pending {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Pending {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then_with(|| o.1.cmp(&self.1))
    }
}

/// The k smallest (distance, insertion index) pairs.
struct TopK {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn offer(&mut self, i: usize, d: f64) {
        if self.items.len() == self.k {
            let worst = self.items[self.k - 1];
            if (d, i) >= worst {
                return;
            }
        }
        let pos = self.items.partition_point(|&e| e < (d, i));
        self.items.insert(pos, (d, i));
        self.items.truncate(self.k);
    }

    fn prunes(&self, bound: f64) -> bool {
        self.items.len() == self.k && bound > self.items[self.k - 1].0
    }

    fn into_sorted(self) -> Vec<Neighbour> {
        self.items
            .into_iter()
            .map(|(distance, marker)| Neighbour { marker, distance })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TypeMap {
    dim: usize,
    markers: Vec<Marker>,
    tree: Option<ProjectionTree>,
}

impl TypeMap {
    pub fn new(dim: usize) -> Self {
        TypeMap {
            dim,
            markers: Vec::new(),
            tree: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.markers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markers.is_empty()
    }

    pub fn markers(&self) -> &[Marker] {
        &self.markers
    }

    pub fn uses_tree(&self) -> bool {
        self.tree.is_some()
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(TypeMapError::Dimension {
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Appends a marker and updates the index in place.
    pub fn add_binding(&mut self, vector: &[f64], ty: TypeExpr, provenance: Provenance) -> Result<usize> {
        self.check_dim(vector)?;
        if ty.is_top() {
            return Err(TypeMapError::TopType);
        }
        let id = self.markers.len();
        self.markers.push(Marker {
            vector: vector.iter().map(|&v| v as f32 as f64).collect(),
            ty,
            provenance,
        });
        match &mut self.tree {
            Some(t) => t.insert(&self.markers, self.dim, id),
            None if self.markers.len() >= TREE_THRESHOLD => {
                self.tree = Some(ProjectionTree::build(&self.markers, self.dim));
            }
            None => {}
        }
        Ok(id)
    }

    /// Linear scan; ties at equal distance go to the earlier marker.
    pub fn neighbours_exact(&self, query: &[f64], k: usize) -> Result<Vec<Neighbour>> {
        self.check_dim(query)?;
        let mut best = TopK::new(k);
        for (i, m) in self.markers.iter().enumerate() {
            best.offer(i, l1(&m.vector, query));
        }
        Ok(best.into_sorted())
    }

    /// The k nearest markers by L1 distance, nearest first.
    pub fn neighbours(&self, query: &[f64], k: usize) -> Result<Vec<Neighbour>> {
        self.check_dim(query)?;
        if k == 0 {
            return Err(TypeMapError::ZeroK);
        }
        match &self.tree {
            Some(t) => Ok(t.search(&self.markers, query, k)),
            None => self.neighbours_exact(query, k),
        }
    }

    /// P(τ) ∝ Σ over the k nearest markers of type τ of max(d, 1e-9)^−p,
    /// normalized over those k. Ranked by probability; equal probabilities
    /// keep the order in which the type first appears among the neighbours.
    pub fn knn_predict(&self, query: &[f64], config: &PredictionConfig) -> Result<Vec<Prediction>> {
        if self.markers.is_empty() {
            return Err(TypeMapError::Empty);
        }
        let nn = self.neighbours(query, config.k)?;
        Ok(self.distribution(&nn, config.p))
    }

    pub fn distribution(&self, nn: &[Neighbour], p: f64) -> Vec<Prediction> {
        let mut out: Vec<Prediction> = Vec::new();
        // weights relative to the nearest distance; the ratio cancels in Z
        let d0 = nn.iter().map(|n| n.distance.max(MIN_DISTANCE)).fold(f64::INFINITY, f64::min);
        for n in nn {
            let w = (d0 / n.distance.max(MIN_DISTANCE)).powf(p);
            let ty = &self.markers[n.marker].ty;
            match out.iter_mut().find(|e| &e.ty == ty) {
                Some(e) => e.probability += w,
                None => out.push(Prediction {
                    ty: ty.clone(),
                    probability: w,
                }),
            }
        }
        let z: f64 = out.iter().map(|e| e.probability).sum();
        for e in &mut out {
            e.probability /= z;
        }
        out.sort_by(|a, b| b.probability.total_cmp(&a.probability));
        out
    }

    /// Layout: magic, version, dim, count, then per marker its f32 vector,
    /// type string and provenance byte. Integers are little-endian.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&MAP_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.markers.len() as u64).to_le_bytes())?;
        for m in &self.markers {
            let mut buf = Vec::with_capacity(self.dim * 4 + 16);
            for &v in &m.vector {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let ty = m.ty.to_string();
            buf.extend_from_slice(&(ty.len() as u32).to_le_bytes());
            buf.extend_from_slice(ty.as_bytes());
            buf.push(m.provenance.code());
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<TypeMap> {
        let fmt = |m: &str| TypeMapError::Format(m.to_string());
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, at: 0 };
        if cur.take(4).ok_or_else(|| fmt("truncated header"))? != MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| fmt("truncated header"))?;
        if version != MAP_VERSION {
            return Err(TypeMapError::Format(format!("unsupported version {version}")));
        }
        let dim = cur.u32().ok_or_else(|| fmt("truncated header"))? as usize;
        let count = cur.u64().ok_or_else(|| fmt("truncated header"))?;
        let mut map = TypeMap::new(dim);
        for i in 0..count {
            let trunc = || TypeMapError::Format(format!("truncated at marker {i}"));
            let raw = cur.take(dim * 4).ok_or_else(trunc)?;
            let vector: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let len = cur.u32().ok_or_else(trunc)? as usize;
            let text = std::str::from_utf8(cur.take(len).ok_or_else(trunc)?)
                .map_err(|_| TypeMapError::Format(format!("marker {i}: type is not UTF-8")))?;
            let ty = parse_type(text).map_err(|e| TypeMapError::Format(format!("marker {i}: {e}")))?;
            let code = cur.take(1).ok_or_else(trunc)?[0];
            let provenance = Provenance::from_code(code)
                .ok_or_else(|| TypeMapError::Format(format!("marker {i}: provenance {code}")))?;
            map.markers.push(Marker {
                vector,
                ty,
                provenance,
            });
        }
        if cur.at != bytes.len() {
            return Err(fmt("trailing bytes"));
        }
        if map.markers.len() >= TREE_THRESHOLD {
            map.tree = Some(ProjectionTree::build(&map.markers, dim));
        }
        Ok(map)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at.checked_add(n)?)?;
        self.at += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// One corpus marker per annotated symbol, in corpus then symbol order.
pub fn build_map(model: &Model, graphs: &[CodeGraph]) -> Result<TypeMap> {
    let mut map = TypeMap::new(model.dim());
    let embeddings = model.embed_corpus(graphs)?;
    for (g, embs) in graphs.iter().zip(embeddings) {
        for e in embs {
            if let Some(t) = &g.symbols[e.symbol].annotation {
                map.add_binding(&e.vector, t.clone(), Provenance::Corpus)?;
            }
        }
    }
    Ok(map)
}
