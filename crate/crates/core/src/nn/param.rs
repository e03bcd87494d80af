use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<F = f32> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    /// Buffers such as batch-norm running statistics are stored alongside
    /// parameters but never receive optimizer updates.
    pub trainable: bool,
}

/// Ordered, named parameter collection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F = f32> {
    entries: Vec<Parameter<F>>,
}

/// Position of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(Parameter { name: name.into(), value, grad, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.push(name, value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.push(name, value, false)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(F::zero());
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Replaces the values of an existing store, matching by name and shape.
    pub fn load(&mut self, named: Vec<(String, Tensor<F>)>) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::Malformed {
                what: "model file",
                msg: format!("expected {} tensors, found {}", self.entries.len(), named.len()),
            });
        }
        for (entry, (name, value)) in self.entries.iter_mut().zip(named) {
            if entry.name != name || entry.value.shape() != value.shape() {
                return Err(Error::Malformed {
                    what: "model file",
                    msg: format!(
                        "tensor {name} {:?} does not match expected {} {:?}",
                        value.shape(),
                        entry.name,
                        entry.value.shape()
                    ),
                });
            }
            entry.value = value;
        }
        Ok(())
    }
}
