//! Named parameter tables shared by the denoiser and direction networks.

use crate::container::Container;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Ordered collection of uniquely named parameter tensors. Order is the
/// definition order and is part of the checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        debug_assert!(
            self.position(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Insert every parameter as a differentiable leaf, in order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.leaf(t.clone())).collect()
    }

    /// Insert every parameter as a non-differentiable constant, in order.
    pub fn constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.constant(t.clone())).collect()
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        let mut worst = 0.0f64;
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }

    pub fn to_container(&self, config: serde_json::Value) -> Container {
        let mut c = Container::new(config);
        for (name, t) in &self.entries {
            c.push(name.clone(), t.clone());
        }
        c
    }

    pub fn from_container(container: &Container) -> Result<Self> {
        let mut set = ParamSet::new();
        for (name, t) in container.entries() {
            if set.position(name).is_some() {
                return Err(Error::Header(format!("duplicate parameter name {name}")));
            }
            set.push(name.clone(), t.clone());
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip_keeps_order() {
        let mut p = ParamSet::new();
        p.push("w1", Tensor::filled(&[2, 2], 0.5));
        p.push("b1", Tensor::zeros(&[2]));
        let c = p.to_container(serde_json::json!({}));
        let q = ParamSet::from_container(&c).unwrap();
        let names: Vec<&str> = q.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["w1", "b1"]);
    }
}
