use std::ops::Index;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.entries.push(NamedTensor {
            name: name.into(),
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Weight matrix `rows × cols` drawn from `U(-1/sqrt(cols), 1/sqrt(cols))`.
    pub fn add_weight(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (cols as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::matrix(rows, cols, data).expect("weight shape"))
    }

    pub fn add_bias(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.add(name, Tensor::zeros(&[1, len]))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor))
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.tensor.clone()).collect()
    }

    /// Replaces every tensor, keeping names; shapes must match.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for (e, t) in self.entries.iter_mut().zip(tensors) {
            if e.tensor.shape() != t.shape() {
                return Err(Error::Dimension {
                    op: "set_tensors",
                    left: e.tensor.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            e.tensor = t;
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.entries.iter().map(|e| tape.param(&e.tensor)).collect(),
        }
    }
}

/// Parameters registered on one tape, indexable by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradient per parameter, zeros where unreachable, in store order.
    pub fn grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.iter())
            .map(|(v, (_, _, t))| {
                let g = grads.get_or_zeros(*v);
                Tensor::new(t.shape().to_vec(), g.into_data()).expect("grad shape")
            })
            .collect()
    }
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}
