//! Named trainable parameters with accumulated gradients.

use std::collections::HashMap;

use super::tape::ParamGrads;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// One trainable tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<F: Scalar> {
    name: String,
    value: Tensor<F>,
    grad: Tensor<F>,
}

impl<F: Scalar> Parameter<F> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<F> {
        &self.grad
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Replaces the value; the new tensor must keep the shape.
    pub fn set_value(&mut self, value: Tensor<F>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "parameter_set_value",
                lhs: self.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.value = value;
        Ok(())
    }
}

/// Ordered map from dotted name paths (e.g. `encoder.layer3.attn.wq.weight`)
/// to parameters. Iteration order is insertion order, so checkpoints and
/// optimizers see a deterministic sequence.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<F: Scalar> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique within the store.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract {
                op: "parameter_insert",
                reason: format!("duplicate parameter name {name:?}"),
            });
        }
        let grad = Tensor::zeros(value.shape());
        let idx = self.params.len();
        self.index.insert(name.clone(), idx);
        self.params.push(Parameter { name, value, grad });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<F>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn by_index(&self, idx: usize) -> &Parameter<F> {
        &self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let idx = self.index_of(name).ok_or_else(|| Error::Contract {
            op: "parameter_set_value",
            reason: format!("unknown parameter {name:?}"),
        })?;
        self.params[idx].set_value(value)
    }

    pub(crate) fn value_mut(&mut self, idx: usize) -> &mut Tensor<F> {
        &mut self.params[idx].value
    }

    /// Adds gradients from a backward pass into the per-parameter
    /// accumulators. Repeated calls accumulate until [`zero_grads`].
    ///
    /// [`zero_grads`]: ParameterStore::zero_grads
    pub fn accumulate(&mut self, grads: &ParamGrads<F>) {
        for (idx, g) in &grads.grads {
            let p = &mut self.params[*idx];
            let mut data = p.grad.data().to_vec();
            for (d, &gv) in data.iter_mut().zip(g.iter()) {
                *d = *d + gv;
            }
            p.grad = Tensor::new(p.grad.shape().to_vec(), data).expect("grad shape preserved");
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Deterministic fingerprint of all values, for bitwise no-op checks.
    pub fn value_bits(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.value.data() {
                for b in v.as_f64().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}
