//! Named parameters and the store that owns them.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Record of how a parameter was initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `uniform(-bound, +bound)`
    Uniform { bound: f64 },
    Constant(f64),
}

#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Tensor,
    init: Init,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn init(&self) -> Init {
        self.init
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let shape = shape.into();
        let mut value = Tensor::zeros(shape.clone());
        match init {
            Init::Uniform { bound } => {
                for v in value.data_mut() {
                    *v = rng.gen_range(-bound..=bound);
                }
            }
            Init::Constant(c) => value.data_mut().fill(c),
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.clone(),
            grad: Tensor::zeros(shape),
            value,
            init,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    /// Value and gradient at once, for optimizer updates.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        let p = &mut self.params[id.0];
        (&mut p.value, &p.grad)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Parameters sorted by name, which fixes their checkpoint order.
    pub fn sorted_by_name(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.ids().collect();
        ids.sort_by(|a, b| self.get(*a).name.cmp(&self.get(*b).name));
        ids
    }
}

/// Creates parameters under a dot-separated name prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are nested under `name`.
    pub fn sub(&mut self, name: impl AsRef<str>) -> Builder<'_> {
        Builder {
            prefix: self.path(name.as_ref()),
            store: self.store,
            rng: self.rng,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, shape: impl Into<Vec<usize>>, init: Init) -> Result<ParamId> {
        let path = self.path(name);
        self.store.add(path, shape, init, self.rng)
    }

    /// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    pub fn fan_in(&mut self, name: &str, shape: impl Into<Vec<usize>>, fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.param(name, shape, Init::Uniform { bound })
    }

    pub fn zeros(&mut self, name: &str, shape: impl Into<Vec<usize>>) -> Result<ParamId> {
        self.param(name, shape, Init::Constant(0.0))
    }

    pub fn ones(&mut self, name: &str, shape: impl Into<Vec<usize>>) -> Result<ParamId> {
        self.param(name, shape, Init::Constant(1.0))
    }
}
