//! Gradient-check catalogue: every differentiable op wrapped as a scalar
//! function `sum(op(inputs) ⊙ R)` with a fixed random projection `R`.

use std::collections::BTreeMap;

use super::{GraphFunction, NamedTensors};
use crate::error::Result;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct OpCase<T: 'static> {
    pub name: &'static str,
    pub function: GraphFunction<'static, T>,
    pub inputs: NamedTensors<T>,
}

fn random<T: Scalar>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(lo + (hi - lo) * rng::unit(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Values with magnitude in `[0.2, 1.5]` and random sign, away from the kink of `abs`.
fn away_from_zero<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = 0.2 + 1.3 * rng::unit(rng);
            T::of(if rng::below(rng, 2) == 0 { m } else { -m })
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn unary<T: Scalar>(
    name: &'static str,
    x: Tensor<T>,
    out_shape: &[usize],
    rng: &mut Rng,
    op: impl Fn(&mut super::Graph<T>, super::Var) -> Result<super::Var> + Send + Sync + 'static,
) -> OpCase<T> {
    let proj = random::<T>(rng, out_shape, -1.0, 1.0);
    let shape = x.shape().to_vec();
    let function = GraphFunction::scalar([("x", shape)], move |g, v| {
        let y = op(g, v["x"])?;
        let r = g.constant(proj.clone())?;
        let p = g.mul(y, r)?;
        g.sum(p)
    });
    OpCase { name, function, inputs: BTreeMap::from([("x".to_string(), x)]) }
}

fn binary<T: Scalar>(
    name: &'static str,
    a: Tensor<T>,
    b: Tensor<T>,
    out_shape: &[usize],
    rng: &mut Rng,
    op: impl Fn(&mut super::Graph<T>, super::Var, super::Var) -> Result<super::Var> + Send + Sync + 'static,
) -> OpCase<T> {
    let proj = random::<T>(rng, out_shape, -1.0, 1.0);
    let sig = [("a", a.shape().to_vec()), ("b", b.shape().to_vec())];
    let function = GraphFunction::scalar(sig, move |g, v| {
        let y = op(g, v["a"], v["b"])?;
        let r = g.constant(proj.clone())?;
        let p = g.mul(y, r)?;
        g.sum(p)
    });
    OpCase { name, function, inputs: BTreeMap::from([("a".to_string(), a), ("b".to_string(), b)]) }
}

/// One instance of every differentiable op at a random point derived from `seed`.
pub fn op_cases<T: Scalar>(seed: u64) -> Vec<OpCase<T>> {
    let mut r = rng::seeded(seed);
    let r = &mut r;
    let mut cases = Vec::new();

    let (a, b) = (random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0));
    cases.push(binary("add", a, b, &[3, 4], r, |g, a, b| g.add(a, b)));
    let (a, b) = (random(r, &[3, 4], -1.0, 1.0), random(r, &[4], -1.0, 1.0));
    cases.push(binary("add_broadcast", a, b, &[3, 4], r, |g, a, b| g.add(a, b)));
    let (a, b) = (random(r, &[3, 4], -1.0, 1.0), random(r, &[4], -1.0, 1.0));
    cases.push(binary("sub", a, b, &[3, 4], r, |g, a, b| g.sub(a, b)));
    let (a, b) = (random(r, &[2, 3, 4], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0));
    cases.push(binary("mul", a, b, &[2, 3, 4], r, |g, a, b| g.mul(a, b)));
    let (a, b) = (random(r, &[3, 5], -1.0, 1.0), random(r, &[5, 2], -1.0, 1.0));
    cases.push(binary("matmul", a, b, &[3, 2], r, |g, a, b| g.matmul(a, b)));

    let x = random(r, &[3, 4], -1.0, 1.0);
    cases.push(unary("scale", x, &[3, 4], r, |g, x| g.scale(x, T::of(-1.7))));
    let x = random(r, &[3, 4], -1.0, 1.0);
    cases.push(unary("transpose", x, &[4, 3], r, |g, x| g.transpose(x)));
    let x = random(r, &[3, 4], -1.0, 1.0);
    cases.push(unary("reshape", x, &[2, 6], r, |g, x| g.reshape(x, &[2, 6])));
    let x = random(r, &[5, 3], -1.0, 1.0);
    cases.push(unary("gather", x, &[4, 3], r, |g, x| g.gather_rows(x, &[4, 0, 4, 2])));
    let x = random(r, &[3, 5], -1.0, 1.0);
    cases.push(unary("pick", x, &[3], r, |g, x| g.pick(x, &[1, 4, 1])));
    let x = random(r, &[3, 5], -2.0, 2.0);
    cases.push(unary("softmax", x, &[3, 5], r, |g, x| g.softmax(x)));
    let x = random(r, &[3, 5], -2.0, 2.0);
    cases.push(unary("log_softmax", x, &[3, 5], r, |g, x| g.log_softmax(x)));
    let x = random(r, &[3, 4], 0.5, 2.0);
    cases.push(unary("log", x, &[3, 4], r, |g, x| g.log(x)));
    let x = random(r, &[3, 4], -1.0, 1.0);
    cases.push(unary("exp", x, &[3, 4], r, |g, x| g.exp(x)));
    let x = random(r, &[3, 4], -1.0, 1.0);
    cases.push(unary("square", x, &[3, 4], r, |g, x| g.square(x)));
    let x = away_from_zero(r, &[3, 4]);
    cases.push(unary("abs", x, &[3, 4], r, |g, x| g.abs(x)));
    let x = random(r, &[3, 4], -1.0, 1.0);
    cases.push(unary("mean", x, &[], r, |g, x| g.mean(x)));
    let x = random(r, &[3, 4], -1.0, 1.0);
    cases.push(unary("sum", x, &[], r, |g, x| g.sum(x)));
    let x = random(r, &[3, 6], -1.0, 1.0);
    cases.push(unary("rms_norm", x, &[3, 6], r, |g, x| g.rms_norm(x, T::of(1e-6))));
    let x = random(r, &[3, 4], -1.0, 1.0);
    cases.push(unary("l2_normalize", x, &[3, 4], r, |g, x| g.l2_normalize(x, T::of(1e-8))));
    let x = random(r, &[4, 6], -1.0, 1.0);
    cases.push(unary("geglu", x, &[4, 3], r, |g, x| g.geglu(x)));
    let x = random(r, &[4, 3], -1.0, 1.0);
    cases.push(unary("concat_rows", x, &[6, 3], r, |g, x| {
        let s = g.slice_rows(x, 1, 3)?;
        g.concat_rows(&[x, s])
    }));
    let x = random(r, &[5, 3], -1.0, 1.0);
    cases.push(unary("slice_rows", x, &[2, 3], r, |g, x| g.slice_rows(x, 2, 4)));
    let (a, b) = (random(r, &[3, 4], -1.0, 1.0), random(r, &[5, 4], -1.0, 1.0));
    cases.push(binary("neg_sq_dist", a, b, &[3, 5], r, |g, a, b| g.neg_sq_dist(a, b, T::of(0.5))));

    for (name, causal) in [("attention_causal", true), ("attention", false)] {
        let x = random(r, &[5, 8], -1.0, 1.0);
        let wq = random::<T>(r, &[8, 8], -0.6, 0.6);
        let wk = random::<T>(r, &[8, 8], -0.6, 0.6);
        cases.push(unary(name, x, &[5, 8], r, move |g, x| {
            let (wq, wk) = (g.constant(wq.clone())?, g.constant(wk.clone())?);
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            g.attention(q, k, x, 2, causal)
        }));
    }
    cases
}
