use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor;
use super::{KernelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameters with a gradient buffer of the same shape for each.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(KernelError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Adds a parameter drawn uniformly from [-scale, scale).
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        self.add(name, Tensor::new(rows, cols, data)?)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| KernelError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    /// Replaces a value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        let old = self.values[id.0].shape();
        if old != t.shape() {
            return Err(KernelError::ShapeMismatch {
                op: "set_value",
                left: old,
                right: t.shape(),
            });
        }
        self.values[id.0] = t;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Global L2 norm over all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    /// Adds another store's gradients (same layout) into this one.
    pub fn accumulate_grads(&mut self, other: &ParamStore) {
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            g.add_assign(o);
        }
    }

    pub fn scale_grads(&mut self, f: f64) {
        for g in &mut self.grads {
            g.scale_assign(f);
        }
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(|v| v.data().len()).sum()
    }
}
