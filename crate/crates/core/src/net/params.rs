use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    /// Convolution weight or bias.
    Conv,
    BnGamma,
    BnBeta,
    Other,
}

impl LayerKind {
    pub fn is_bn(self) -> bool {
        matches!(self, LayerKind::BnGamma | LayerKind::BnBeta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub kind: LayerKind,
    pub part: Part,
    /// Position of the owning layer counted from the network input.
    pub depth: usize,
    pub adaptable: bool,
    /// Filled by the last backward pass for adaptable entries only.
    pub grad: Option<Tensor<T>>,
}

/// Ordered registry of named network parameters.
///
/// Registration order is the order layers appear in the forward pass, and it
/// is the order used when selecting "the last x%" of a layer family.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: LayerKind, part: Part, depth: usize) {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            tensor,
            kind,
            part,
            depth,
            adaptable: false,
            grad: None,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    /// θ: the entries currently flagged adaptable.
    pub fn adaptable(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter().filter(|e| e.adaptable)
    }

    pub fn adaptable_names(&self) -> Vec<String> {
        self.adaptable().map(|e| e.name.clone()).collect()
    }

    pub fn adaptable_scalars(&self) -> usize {
        self.adaptable().map(|e| e.tensor.numel()).sum()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn set_all_adaptable(&mut self, flag: bool) {
        self.entries.iter_mut().for_each(|e| e.adaptable = flag);
    }

    pub fn clear_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.grad = None);
    }
}
