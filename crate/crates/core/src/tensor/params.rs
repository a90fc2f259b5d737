//! Trainable parameters and their registry.

use super::{Tensor, TensorError, TensorResult};

/// Handle into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named trainable tensor. `grad` is populated by [`super::Graph::backward`]
/// (accumulating across calls) and cleared by the optimizer step.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    /// Normalization scale/shift and classifier weights skip weight decay.
    pub decay_exempt: bool,
}

/// Registry owning every parameter of one network (or one cloned block).
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay_exempt: bool) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: None,
            decay_exempt,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Gradient of a parameter, or a missing-grad error naming it.
    pub fn grad(&self, id: ParamId) -> TensorResult<&[f64]> {
        let p = &self.params[id.0];
        p.grad.as_deref().ok_or_else(|| TensorError::MissingGrad {
            param: p.name.clone(),
        })
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, contribution: &[f64]) {
        let p = &self.params[id.0];
        debug_assert_eq!(p.value.len(), contribution.len());
        let grad = self.params[id.0]
            .grad
            .get_or_insert_with(|| vec![0.0; contribution.len()]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Total number of scalar coefficients across all parameters.
    pub fn coefficient_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Order-sensitive fingerprint of all parameter values, for
    /// frozen-path invariance tests.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for &x in p.value.data() {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}
