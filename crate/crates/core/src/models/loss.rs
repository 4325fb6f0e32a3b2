use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const L1_WEIGHT: f64 = 0.1;
pub const L2_WEIGHT: f64 = 1.0;

/// `0.1·mean|x − x̂| + 1.0·mean (x − x̂)²`
pub fn reconstruction_loss<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<T> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("reconstruction_loss", format!("{:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    let (mut l1, mut l2) = (0.0, 0.0);
    for (&a, &b) in x.data().iter().zip(x_hat.data()) {
        let d = (a - b).as_f64();
        l1 += d.abs();
        l2 += d * d;
    }
    let n = x.len().max(1) as f64;
    Ok(T::of(L1_WEIGHT * l1 / n + L2_WEIGHT * l2 / n))
}

pub fn reconstruction_loss_graph<T: Scalar>(g: &mut Graph<T>, x: Var, x_hat: Var) -> Result<Var> {
    let d = g.sub(x, x_hat)?;
    let a = g.abs(d)?;
    let l1 = g.mean(a)?;
    let s = g.square(d)?;
    let l2 = g.mean(s)?;
    let l1 = g.scale(l1, T::of(L1_WEIGHT))?;
    let l2 = g.scale(l2, T::of(L2_WEIGHT))?;
    g.add(l1, l2)
}
