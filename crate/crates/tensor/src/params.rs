use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<E> {
    pub name: String,
    pub value: Tensor<E>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
    pub trainable: bool,
}

/// Named, ordered parameter collection. Insertion order is the canonical
/// order used by optimizers and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<E> {
    params: Vec<Param<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        let decay = value.rank() >= 2;
        self.add_with(name, value, decay)
    }

    pub fn add_with(&mut self, name: impl Into<String>, value: Tensor<E>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, decay, trainable: true });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<E> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<E>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<E>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::dim(
                "ParamStore::set",
                format!("{}: expected {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
