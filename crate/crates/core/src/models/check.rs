//! Gradient checks of the full tokenizer chain on a small configuration.

use crate::autodiff::{grad_check, grad_check_against_f64, GradCheckReport, Graph, GraphFunction, NamedTensors, NamedVars};
use crate::error::Result;
use crate::nn::{AdamWConfig, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::loss::reconstruction_loss_graph;
use super::tokenizer::{patchify, TokenizerConfig, TokenizerState};

/// 4×4 grayscale images, 2×2 patches, 4 tokens over 8 codes.
pub fn toy_config() -> TokenizerConfig {
    TokenizerConfig {
        height: 4,
        width: 4,
        channels: 1,
        patch: 2,
        tokens: 4,
        codebook: 8,
        code_dim: 4,
        dim: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        mlp_ratio: 2,
        tau_q: 0.5,
    }
}

pub fn toy_image<T: Scalar>(seed: u64) -> Tensor<T> {
    let data = (0..16).map(|i| T::of(((i as f64 + 1.0) * 0.37 + seed as f64).sin() * 0.5 + 0.5)).collect();
    Tensor::new([4, 4, 1], data).expect("16 values")
}

pub fn param_signature<T: Scalar>(store: &ParamStore<T>) -> Vec<(String, Vec<usize>)> {
    store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
}

pub fn param_inputs<T: Scalar>(store: &ParamStore<T>) -> NamedTensors<T> {
    store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

pub fn bound_from(store_names: &[String], v: &NamedVars) -> Bound {
    Bound::from_vars(store_names.iter().map(|n| v[n]).collect())
}

/// The tokenizer pipeline with `z = c + h`, where `c = onehot(argmax h₀) − h₀` is
/// frozen at the base point. Its value at the base point equals the hard
/// pipeline and its exact derivative is the straight-through gradient.
pub fn ste_surrogate<T: Scalar>(s: &TokenizerState<T>, img: &Tensor<T>) -> Result<GraphFunction<'static, T>> {
    let names: Vec<String> = s.params.iter().map(|(n, _)| n.to_string()).collect();
    let offset = {
        let mut g = Graph::inference();
        let b = s.params.bind_frozen(&mut g)?;
        let u = s.encode_graph(&mut g, &b, img)?;
        let (_, h, z) = s.quantize_graph(&mut g, &b, u)?;
        let (hv, zv) = (g.value(h), g.value(z));
        Tensor::new(hv.shape().to_vec(), zv.data().iter().zip(hv.data()).map(|(&a, &b)| a - b).collect())?
    };
    let (s, img) = (s.clone(), img.clone());
    Ok(GraphFunction::scalar(param_signature(&s.params), move |g, v| {
        let b = bound_from(&names, v);
        let u = s.encode_graph(g, &b, &img)?;
        let (_, h, _) = s.quantize_graph(g, &b, u)?;
        let c = g.constant(offset.clone())?;
        let z = g.add(h, c)?;
        let recon = s.decode_graph(g, &b, z, s.config.tokens)?;
        let target = g.constant(patchify(&img, s.config.patch)?)?;
        reconstruction_loss_graph(g, target, recon)
    }))
}


/// f64 check of the straight-through chain at the random point `seed`.
pub fn pipeline_grad_check(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let s = TokenizerState::<f64>::new(toy_config(), AdamWConfig::default(), seed)?;
    let img = toy_image(seed);
    grad_check(&ste_surrogate(&s, &img)?, &param_inputs(&s.params), tol)
}

/// f32 reverse mode against f64 central differences at the same point.
pub fn pipeline_grad_check_f32(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let s32 = TokenizerState::<f32>::new(toy_config(), AdamWConfig::default(), seed)?;
    let s64 = TokenizerState::<f64>::new(toy_config(), AdamWConfig::default(), seed)?;
    // evaluate both at the f32-representable point
    let mut s64 = s64;
    for (name, t) in s32.params.iter() {
        s64.params.assign(name, t.cast())?;
    }
    let img = toy_image::<f32>(seed);
    grad_check_against_f64(&ste_surrogate(&s32, &img)?, &ste_surrogate(&s64, &img.cast())?, &param_inputs(&s32.params), tol)
}
