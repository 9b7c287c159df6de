//! Named, trainable parameters and their binding onto a tape.

use std::ops::Index;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether the L2 penalty applies. False for biases and layer-norm terms.
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replaces a parameter value; the new value must keep the old shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, true)
    }

    /// Registers every parameter as a constant leaf (no gradient).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect();
        Bound { vars }
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Pulls the per-parameter gradients out of a backward result.
    pub fn grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
