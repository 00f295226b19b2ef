use std::collections::HashMap;

use mgca_tensor::{Tape, Tensor, Var};

use crate::error::{contract, Result};
use crate::rng::SplitMix64;

/// Named parameter tensors in a fixed registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(contract(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index_of(name) {
            Some(i) => Ok(&mut self.tensors[i]),
            None => Err(contract(format!("unknown parameter {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor on `tape` as a tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect::<Vec<_>>();
        Bound::new(&self.names, &vars)
    }

    /// Structural copy with every tensor zeroed.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }
}

/// Parameters as tape variables, looked up by name.
#[derive(Clone)]
pub struct Bound<'t> {
    order: Vec<Var<'t>>,
    by_name: HashMap<String, usize>,
}

impl<'t> Bound<'t> {
    pub fn new(names: &[String], vars: &[Var<'t>]) -> Self {
        Self {
            order: vars.to_vec(),
            by_name: names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.by_name
            .get(name)
            .map(|&i| self.order[i])
            .ok_or_else(|| contract(format!("unknown parameter {name}")))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.order
    }
}

pub(crate) fn uniform(rng: &mut SplitMix64, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-bound, bound)).collect())
        .expect("length matches shape")
}
