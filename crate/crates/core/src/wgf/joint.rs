use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::score::prior_matching_score;
use crate::autodiff::Graph;
use crate::data::MetricsRecord;
use crate::error::{Error, Result};
use crate::models::{ArModel, TokenizerState};
use crate::nn::sum_gradients;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const STREAM_TAIL: u64 = 0x7a11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointConfig {
    pub lambda_wgf: f64,
    /// Fraction of `total_steps` over which λ ramps linearly from 0.
    pub warmup_frac: f64,
    pub total_steps: u64,
    /// Also fit the target by cross-entropy on the current tokens.
    pub trainable_target: bool,
    /// Probability of a sampled tail-dropout cutoff per image (0 disables).
    pub tail_dropout: f64,
    pub seed: u64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self { lambda_wgf: 0.25, warmup_frac: 0.1, total_steps: 1000, trainable_target: false, tail_dropout: 0.0, seed: 0 }
    }
}

impl JointConfig {
    /// Weight in effect at `step` (0-based).
    pub fn lambda_at(&self, step: u64) -> f64 {
        let warm = (self.warmup_frac * self.total_steps as f64).ceil() as u64;
        if warm == 0 {
            self.lambda_wgf
        } else {
            self.lambda_wgf * ((step + 1) as f64 / warm as f64).min(1.0)
        }
    }
}

/// Number of leading tokens the decoder sees for image `index` at `step`.
///
/// With probability `prob` the cutoff is uniform over `0..n`, otherwise all
/// `n` tokens are kept. Derived statelessly from `(seed, step, index)`.
pub fn tail_keep(prob: f64, n: usize, seed: u64, step: u64, index: usize) -> usize {
    if prob <= 0.0 {
        return n;
    }
    let mut r = rng::seeded(rng::derive(rng::derive(seed, STREAM_TAIL, step), 0, index as u64));
    if rng::unit(&mut r) < prob {
        rng::below(&mut r, n)
    } else {
        n
    }
}

/// Per-image outputs of the tokenizer half of a step.
pub(crate) struct TokenizerPart<T> {
    pub grads: Vec<Tensor<T>>,
    pub loss: f64,
    pub score_norm: Option<f64>,
}

/// Reconstruction gradients for one image, with the prior-matching score
/// injected at the straight-through one-hot when `score` is given.
///
/// The seed at `z` is added to the decoder's own cotangent there, so the
/// total reaching `h` through the identity STE Jacobian is
/// `recon_grad_z + λ (log Q − log P)`.
pub(crate) fn tokenizer_part<T: Scalar, S>(
    tok: &TokenizerState<T>,
    image: &Tensor<T>,
    keep: usize,
    batch: usize,
    score: S,
) -> Result<TokenizerPart<T>>
where
    S: FnOnce(&[usize]) -> Result<Option<(Tensor<T>, f64)>>,
{
    let mut g = Graph::unchecked();
    let b = tok.params.bind(&mut g)?;
    let pass = tok.pass(&mut g, &b, image, keep)?;
    let loss = g.value(pass.loss).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "reconstruction_loss" });
    }
    let inv = 1.0 / batch as f64;
    let mut seeds = vec![(pass.loss, Tensor::scalar(T::of(inv)))];
    let mut score_norm = None;
    if let Some((s, lambda)) = score(&pass.ids)? {
        score_norm = Some(s.l2_norm().as_f64());
        if lambda != 0.0 {
            let mut seed = s;
            seed.scale_assign(T::of(lambda * inv));
            seeds.push((pass.z, seed));
        }
    }
    let grads = g.backward(&seeds)?;
    Ok(TokenizerPart { grads: tok.params.gradients(&b, &grads), loss, score_norm })
}

fn check_grads<T: Scalar>(grads: &[Tensor<T>], what: &str, step: u64) -> Result<()> {
    if grads.iter().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(Error::NumericalAbort { step, detail: format!("non-finite {what} gradient") })
    }
}

pub(crate) fn abort<T>(step: u64, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { op } => Error::NumericalAbort { step, detail: format!("non-finite value in {op}") },
        e => e,
    })
}

/// Tokenizer, frozen (or optionally trained) target prior, and proxy.
#[derive(Clone, Debug)]
pub struct JointTrainState<T> {
    pub tokenizer: TokenizerState<T>,
    pub target: ArModel<T>,
    pub proxy: ArModel<T>,
    pub step: u64,
    pub config: JointConfig,
}

impl<T: Scalar> JointTrainState<T> {
    pub fn new(tokenizer: TokenizerState<T>, target: ArModel<T>, proxy: ArModel<T>, config: JointConfig) -> Result<Self> {
        let (k, n) = (tokenizer.config.codebook, tokenizer.config.tokens);
        for (name, m) in [("target", &target), ("proxy", &proxy)] {
            if m.config.vocab != k || m.config.context < n {
                return Err(Error::Config(format!(
                    "{name} prior covers K={} and context {}, tokenizer needs K={k} and {n} tokens",
                    m.config.vocab, m.config.context
                )));
            }
        }
        Ok(Self { tokenizer, target, proxy, step: 0, config })
    }
}

/// One joint update: encode and quantize, decode, score both priors on the
/// current tokens without recording, push the particle gradient through the
/// straight-through quantizer into the tokenizer, fit the proxy on the
/// detached ids, then update everything at once.
///
/// On error nothing is modified.
pub fn dpd_train_step<T: Scalar>(state: &mut JointTrainState<T>, batch: &[Tensor<T>]) -> Result<MetricsRecord> {
    let start = Instant::now();
    let step = state.step;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let cfg = &state.config;
    let lambda = cfg.lambda_at(step);
    let n = state.tokenizer.config.tokens;
    let use_target = lambda != 0.0;
    let (tok, target, proxy) = (&state.tokenizer, &state.target, &state.proxy);
    let bsz = batch.len();
    let parts = batch
        .par_iter()
        .enumerate()
        .map(|(i, image)| {
            let keep = tail_keep(cfg.tail_dropout, n, cfg.seed, step, i);
            let mut proxy_out = None;
            let tok_part = tokenizer_part(tok, image, keep, bsz, |ids| {
                // proxy forward with recording: its values are log Q and its
                // backward is the proxy's own cross-entropy update
                let mut g = Graph::unchecked();
                let b = proxy.params.bind(&mut g)?;
                let (loss, lp) = proxy.loss_graph(&mut g, &b, ids)?;
                let lq = g.value(lp).clone();
                let grads = g.backward(&[(loss, Tensor::scalar(T::of(1.0 / bsz as f64)))])?;
                proxy_out = Some((g.value(loss).item().as_f64(), proxy.params.gradients(&b, &grads), ids.to_vec()));
                if !use_target {
                    return Ok(None);
                }
                let lp = target.log_probs_ids(ids)?;
                Ok(Some((prior_matching_score(&lq, &lp)?, lambda)))
            })?;
            let (proxy_loss, proxy_grads, ids) = proxy_out.expect("proxy scored");
            Ok((tok_part, proxy_loss, proxy_grads, ids))
        })
        .collect::<Result<Vec<_>>>();
    let parts = abort(step, parts)?;

    let mut tok_lists = Vec::with_capacity(bsz);
    let mut proxy_lists = Vec::with_capacity(bsz);
    let mut ids = Vec::with_capacity(bsz);
    let (mut l_rec, mut l_proxy, mut score_norm) = (0.0, 0.0, 0.0);
    for (tp, pl, pg, id) in parts {
        l_rec += tp.loss;
        l_proxy += pl;
        score_norm += tp.score_norm.unwrap_or(0.0);
        tok_lists.push(tp.grads);
        proxy_lists.push(pg);
        ids.push(id);
    }
    let tok_grads = sum_gradients(tok_lists.into_iter()).expect("non-empty");
    let proxy_grads = sum_gradients(proxy_lists.into_iter()).expect("non-empty");
    check_grads(&tok_grads, "tokenizer", step)?;
    check_grads(&proxy_grads, "proxy", step)?;
    let target_grads = if state.config.trainable_target {
        let (_, g) = abort(step, state.target.batch_gradients(&ids))?;
        check_grads(&g, "target", step)?;
        Some(g)
    } else {
        None
    };
    if !l_proxy.is_finite() {
        return Err(Error::NumericalAbort { step, detail: format!("proxy loss {l_proxy}") });
    }

    state.tokenizer.apply(&tok_grads);
    state.proxy.opt.step(&mut state.proxy.params, &proxy_grads);
    if let Some(g) = target_grads {
        state.target.opt.step(&mut state.target.params, &g);
    }
    state.step += 1;
    let b = bsz as f64;
    Ok(MetricsRecord {
        step,
        l_rec: Some(l_rec / b),
        l_ar_proxy: Some(l_proxy / b),
        wgf_score_norm: use_target.then_some(score_norm / b),
        eval_ar_loss: None,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
