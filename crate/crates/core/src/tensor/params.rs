use std::collections::HashMap;
use std::sync::Arc;

use super::Scalar;
use crate::error::{DotError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub(crate) data: Arc<Vec<T>>,
    /// Whether decoupled weight decay applies (false for biases and norms).
    pub decay: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Vec<T> {
        Arc::make_mut(&mut self.data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Named trainable tensors, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(DotError::Shape {
                op: "param",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if self.by_name.contains_key(&name) {
            return Err(DotError::Config(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            shape,
            data: Arc::new(data),
            decay,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Vec<T>> {
        Arc::clone(&self.params[id.0].data)
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let data = p.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect();
            out.insert(p.name.clone(), p.shape.clone(), data, p.decay)
                .expect("names are unique in the source store");
        }
        out
    }
}
