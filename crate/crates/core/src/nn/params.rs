use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Tensor, Var};

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero(&mut self, id: ParamId) {
        self.values[id.0].data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    /// Put every tensor on the graph; `trainable` controls gradient tracking.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self.values.iter().map(|t| g.leaf(t.clone(), trainable)).collect(),
        }
    }

    /// Bind pre-created graph variables, one per stored tensor, in store order.
    pub fn bind_vars(&self, vars: &[Var]) -> Bound {
        assert_eq!(vars.len(), self.values.len(), "one var per parameter");
        Bound { vars: vars.to_vec() }
    }
}

/// Graph variables for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Allocates seeded parameters. Weights default to `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder { store, rng }
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, bound, self.rng);
        self.store.add(name, t)
    }

    /// He-uniform `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, for weights feeding a SiLU.
    pub fn silu_weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, bound, self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}
