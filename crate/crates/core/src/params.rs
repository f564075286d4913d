use std::collections::HashMap;

use crate::error::{invalid, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Named, ordered collection of learnable tensors. The index of a tensor is
/// its identity on the tape and in optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return invalid(format!("duplicate parameter name {name}"));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Put every tensor on the tape. Tracked leaves receive gradients;
    /// untracked ones are plain constants (inference).
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if track {
                    tape.param(i, t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Replace tensors with `values` in order; shapes must match.
    pub fn with_tensors(&self, values: Vec<Tensor>) -> Result<Self> {
        if values.len() != self.tensors.len() {
            return invalid(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                values.len()
            ));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&values).enumerate() {
            if a.shape() != b.shape() {
                return invalid(format!(
                    "parameter {}: shape {:?} vs {:?}",
                    self.names[i],
                    a.shape(),
                    b.shape()
                ));
            }
        }
        Ok(Self {
            names: self.names.clone(),
            tensors: values,
            index: self.index.clone(),
        })
    }
}
