//! Reverse-mode differentiation and its finite-difference oracle.

pub mod catalog;
mod graph;

use std::collections::BTreeMap;

pub use graph::{Gradients, Graph, Var, VjpFn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NamedTensors<T> = BTreeMap<String, Tensor<T>>;
pub type NamedVars = BTreeMap<String, Var>;

type Body<'f, T> = Box<dyn Fn(&mut Graph<T>, &NamedVars) -> Result<NamedVars> + Send + Sync + 'f>;

/// A closure over graph ops with a declared input signature.
///
/// Each evaluation builds a fresh [`Graph`], so evaluating twice on the same
/// inputs is deterministic and independent evaluations may run on separate
/// threads.
pub struct GraphFunction<'f, T> {
    signature: Vec<(String, Vec<usize>)>,
    body: Body<'f, T>,
}

impl<'f, T: Scalar> GraphFunction<'f, T> {
    pub fn new<S: Into<String>>(
        signature: impl IntoIterator<Item = (S, Vec<usize>)>,
        body: impl Fn(&mut Graph<T>, &NamedVars) -> Result<NamedVars> + Send + Sync + 'f,
    ) -> Self {
        Self { signature: signature.into_iter().map(|(n, s)| (n.into(), s)).collect(), body: Box::new(body) }
    }

    /// Single-output convenience: the output is named `"out"`.
    pub fn scalar<S: Into<String>>(
        signature: impl IntoIterator<Item = (S, Vec<usize>)>,
        body: impl Fn(&mut Graph<T>, &NamedVars) -> Result<Var> + Send + Sync + 'f,
    ) -> Self {
        Self::new(signature, move |g, vars| {
            let out = body(g, vars)?;
            Ok(BTreeMap::from([("out".to_string(), out)]))
        })
    }

    pub fn signature(&self) -> &[(String, Vec<usize>)] {
        &self.signature
    }

    fn bind(&self, g: &mut Graph<T>, inputs: &NamedTensors<T>) -> Result<NamedVars> {
        let mut vars = BTreeMap::new();
        for (name, shape) in &self.signature {
            let t = inputs
                .get(name)
                .ok_or_else(|| Error::shape("forward", format!("missing input {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("forward", format!("input {name}: expected {shape:?}, got {:?}", t.shape())));
            }
            vars.insert(name.clone(), g.leaf(t.clone())?);
        }
        Ok(vars)
    }

    /// Evaluates in checked mode: any non-finite intermediate is an error.
    pub fn forward(&self, inputs: &NamedTensors<T>) -> Result<NamedTensors<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, inputs)?;
        let outs = (self.body)(&mut g, &vars)?;
        Ok(outs.into_iter().map(|(n, v)| (n, g.value(v).clone())).collect())
    }

    /// Gradient of `Σ_outputs ⟨cotangent, output⟩` with respect to every input.
    pub fn grad(&self, inputs: &NamedTensors<T>, cotangents: &NamedTensors<T>) -> Result<NamedTensors<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, inputs)?;
        let outs = (self.body)(&mut g, &vars)?;
        let mut seeds = Vec::new();
        for (name, ct) in cotangents {
            let v = outs.get(name).ok_or_else(|| Error::shape("grad", format!("unknown output {name}")))?;
            seeds.push((*v, ct.clone()));
        }
        let grads = g.backward(&seeds)?;
        Ok(vars
            .iter()
            .map(|(name, &v)| {
                let gt = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()));
                (name.clone(), gt)
            })
            .collect())
    }

    fn scalar_output(&self, inputs: &NamedTensors<T>) -> Result<(String, Tensor<T>)> {
        let outs = self.forward(inputs)?;
        if outs.len() != 1 {
            return Err(Error::InvalidArgument("finite differences need exactly one output".into()));
        }
        let (name, t) = outs.into_iter().next().expect("one output");
        if t.len() != 1 {
            return Err(Error::InvalidArgument(format!("output {name} is not scalar: {:?}", t.shape())));
        }
        Ok((name, t))
    }
}

/// Central-difference gradient `(f(x+εe) - f(x-εe)) / 2ε` per coordinate.
pub fn finite_difference_grad<T: Scalar>(
    f: &GraphFunction<'_, T>,
    inputs: &NamedTensors<T>,
    eps: T,
) -> Result<NamedTensors<T>> {
    if eps <= T::zero() {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    f.scalar_output(inputs)?;
    let two_eps = eps + eps;
    let mut out = BTreeMap::new();
    let mut probe = inputs.clone();
    for (name, base) in inputs {
        let mut grad = Tensor::zeros(base.shape().to_vec());
        for i in 0..base.len() {
            let x = base.data()[i];
            probe.get_mut(name).expect("present").data_mut()[i] = x + eps;
            let plus = f.scalar_output(&probe)?.1.item();
            probe.get_mut(name).expect("present").data_mut()[i] = x - eps;
            let minus = f.scalar_output(&probe)?.1.item();
            probe.get_mut(name).expect("present").data_mut()[i] = x;
            grad.data_mut()[i] = (plus - minus) / two_eps;
        }
        out.insert(name.clone(), grad);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Input name and flat coordinate of the worst mismatch.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub pass: bool,
}

/// Default finite-difference step for each precision.
pub fn default_eps<T: Scalar>() -> T {
    if T::NAME == "f32" {
        T::of(1e-2)
    } else {
        T::of(1e-6)
    }
}

/// Compares reverse-mode gradients to central differences.
/// Passes iff `max |AD - FD| / max(1, |FD|) <= tol`.
pub fn grad_check<T: Scalar>(f: &GraphFunction<'_, T>, inputs: &NamedTensors<T>, tol: T) -> Result<GradCheckReport> {
    grad_check_with_eps(f, inputs, tol, default_eps())
}

/// Reverse-mode gradients of `f` (any precision) against central differences
/// of a 64-bit twin `oracle` evaluated at the same point. This is the 32-bit
/// check: a 32-bit finite difference is too noisy to resolve `1e-4`.
pub fn grad_check_against_f64<T: Scalar>(
    f: &GraphFunction<'_, T>,
    oracle: &GraphFunction<'_, f64>,
    inputs: &NamedTensors<T>,
    tol: f64,
) -> Result<GradCheckReport> {
    let (out_name, out) = f.scalar_output(inputs)?;
    let ct = BTreeMap::from([(out_name, Tensor::full(out.shape().to_vec(), T::one()))]);
    let ad = f.grad(inputs, &ct)?;
    let wide: NamedTensors<f64> = inputs.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
    let fd = finite_difference_grad(oracle, &wide, 1e-6)?;
    Ok(compare(&ad, &fd, tol))
}

fn compare<T: Scalar, U: Scalar>(ad: &NamedTensors<T>, fd: &NamedTensors<U>, tol: f64) -> GradCheckReport {
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut coordinates = 0;
    for (name, fd_t) in fd {
        let ad_t = &ad[name];
        for (i, (&a, &n)) in ad_t.data().iter().zip(fd_t.data()).enumerate() {
            coordinates += 1;
            let (a, n) = (a.as_f64(), n.as_f64());
            let rel = (a - n).abs() / n.abs().max(1.0);
            if rel > max_rel || rel.is_nan() {
                max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                worst = Some((name.clone(), i));
            }
        }
    }
    GradCheckReport { max_rel_err: max_rel, worst, coordinates, pass: max_rel <= tol }
}

pub fn grad_check_with_eps<T: Scalar>(
    f: &GraphFunction<'_, T>,
    inputs: &NamedTensors<T>,
    tol: T,
    eps: T,
) -> Result<GradCheckReport> {
    if tol <= T::zero() {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    let (out_name, out) = f.scalar_output(inputs)?;
    let ct = BTreeMap::from([(out_name, Tensor::full(out.shape().to_vec(), T::one()))]);
    let ad = f.grad(inputs, &ct)?;
    let fd = finite_difference_grad(f, inputs, eps)?;
    Ok(compare(&ad, &fd, tol.as_f64()))
}
