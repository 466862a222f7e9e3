//! Ordered, named parameter registry. Insertion order is the canonical
//! order for optimizer slots, gradient flattening, and checkpoints.

use std::collections::HashMap;

use crate::tensor::{NodeId, Tape, Tensor};

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.tensors[self.index[name]]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// All values concatenated in insertion order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.total_len());
        let mut off = 0;
        for t in self.tensors.iter_mut() {
            let n = t.numel();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Lease every parameter onto a tape as a leaf node; returns the
    /// node ids in insertion order alongside a name lookup.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut nodes = Vec::with_capacity(self.len());
        let mut by_name = HashMap::with_capacity(self.len());
        for (name, t) in self.iter() {
            let id = tape.leaf(t.clone());
            nodes.push((name.to_string(), id));
            by_name.insert(name.to_string(), id);
        }
        BoundParams { nodes, by_name }
    }
}

/// Parameter nodes on one tape for one forward/backward pass.
pub struct BoundParams {
    /// Insertion order, mirrors `ParamSet`.
    pub nodes: Vec<(String, NodeId)>,
    by_name: HashMap<String, NodeId>,
}

impl BoundParams {
    pub fn node(&self, name: &str) -> NodeId {
        self.by_name[name]
    }

    pub fn try_node(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    /// Gradients per parameter in insertion order, read off the tape.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.nodes
            .iter()
            .map(|(_, id)| tape.grad(*id).to_vec())
            .collect()
    }
}
