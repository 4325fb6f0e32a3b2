use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps graph variables already registered in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng::normal(rng, std)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape and data agree"))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape.to_vec(), T::one()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Bound> {
        self.values.iter().map(|v| g.leaf(v.clone())).collect::<Result<Vec<_>>>().map(Bound)
    }

    /// Registers every parameter as a constant.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Result<Bound> {
        self.values.iter().map(|v| g.constant(v.clone())).collect::<Result<Vec<_>>>().map(Bound)
    }

    /// Replaces a parameter's value by name; shapes must agree.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if self.values[idx].shape() != value.shape() {
            return Err(Error::shape(
                "assign",
                format!("{name}: {:?} vs {:?}", self.values[idx].shape(), value.shape()),
            ));
        }
        self.values[idx] = value;
        Ok(())
    }

    /// Zero tensors shaped like every parameter.
    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.values.iter().map(|v| Tensor::zeros(v.shape().to_vec())).collect()
    }

    /// Collects the gradients of every bound parameter; missing gradients are zero.
    pub fn gradients(&self, bound: &Bound, grads: &crate::autodiff::Gradients<T>) -> Vec<Tensor<T>> {
        bound
            .vars()
            .iter()
            .zip(&self.values)
            .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect()
    }
}

/// Adds per-sample gradient lists in order.
pub fn sum_gradients<T: Scalar>(mut parts: impl Iterator<Item = Vec<Tensor<T>>>) -> Option<Vec<Tensor<T>>> {
    let mut acc = parts.next()?;
    for p in parts {
        for (a, g) in acc.iter_mut().zip(&p) {
            a.add_assign(g);
        }
    }
    Some(acc)
}
