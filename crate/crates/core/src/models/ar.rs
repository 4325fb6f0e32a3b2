use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sequence::TokenSequence;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{sum_gradients, AdamW, AdamWConfig, BlockDims, Bound, Linear, ParamId, ParamStore, Transformer};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArConfig {
    pub vocab: usize,
    pub context: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Logits are divided by this before the log-softmax.
    pub temperature: f64,
}

impl ArConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config(format!("vocabulary must be >= 2, got {}", self.vocab)));
        }
        if self.context == 0 || self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("context, dim, heads and mlp_ratio must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: ParamId,
    sos: ParamId,
    pos: ParamId,
    trunk: Transformer,
    head: Linear,
}

/// Causal transformer over codebook ids, used for both the target prior
/// and the proxy.
#[derive(Clone, Debug)]
pub struct ArModel<T> {
    pub config: ArConfig,
    pub params: ParamStore<T>,
    pub opt: AdamW<T>,
    layout: Layout,
}

/// Mean loss and the pre-update log-probability tables of one batch.
#[derive(Clone, Debug)]
pub struct ArStep<T> {
    pub loss: f64,
    pub log_probs: Vec<Tensor<T>>,
}

impl<T: Scalar> ArModel<T> {
    pub fn new(config: ArConfig, opt: AdamWConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let r = &mut r;
        let mut p = ParamStore::new();
        let d = config.dim;
        let tok_emb = p.normal("ar.tok_emb", &[config.vocab, d], 1.0, r);
        let sos = p.normal("ar.sos", &[1, d], 1.0, r);
        let pos = p.normal("ar.pos", &[config.context, d], 1.0, r);
        let dims = BlockDims { width: d, heads: config.heads, mlp_ratio: config.mlp_ratio };
        let trunk = Transformer::new(&mut p, "ar", config.layers, dims, true, r);
        let head = Linear::new(&mut p, "ar.head", d, config.vocab, true, r);
        let layout = Layout { tok_emb, sos, pos, trunk, head };
        Ok(Self { opt: AdamW::new(opt, &p), config, params: p, layout })
    }

    pub fn zero_head(&mut self) {
        for id in [Some(self.layout.head.w), self.layout.head.b].into_iter().flatten() {
            *self.params.get_mut(id) = Tensor::zeros(self.params.get(id).shape().to_vec());
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.len() > self.config.context {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds context {}",
                ids.len(),
                self.config.context
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab) {
            return Err(Error::InvalidArgument(format!("token id {bad} out of range for K={}", self.config.vocab)));
        }
        Ok(())
    }

    /// Raw logits for positions `0..=history.len()`, conditioning row t on
    /// the start token and `history[..t]`.
    fn logits_graph(&self, g: &mut Graph<T>, b: &Bound, history: &[usize]) -> Result<Var> {
        let l = &self.layout;
        let rows = history.len() + 1;
        let x = if history.is_empty() {
            b.get(l.sos)
        } else {
            let e = g.gather_rows(b.get(l.tok_emb), history)?;
            g.concat_rows(&[b.get(l.sos), e])?
        };
        let pos = g.slice_rows(b.get(l.pos), 0, rows)?;
        let x = g.add(x, pos)?;
        let y = l.trunk.forward(g, b, x)?;
        l.head.forward(g, b, y)
    }

    /// Teacher-forced log-probability table (len × K) for `ids`.
    pub fn log_probs_graph(&self, g: &mut Graph<T>, b: &Bound, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        let logits = self.logits_graph(g, b, &ids[..ids.len() - 1])?;
        let scaled = g.scale(logits, T::of(1.0 / self.config.temperature))?;
        g.log_softmax(scaled)
    }

    /// `−(1/n) Σ_t log p(z_t | z_<t)` and the log-probability table.
    pub fn loss_graph(&self, g: &mut Graph<T>, b: &Bound, ids: &[usize]) -> Result<(Var, Var)> {
        let lp = self.log_probs_graph(g, b, ids)?;
        let picked = g.pick(lp, ids)?;
        let m = g.mean(picked)?;
        Ok((g.scale(m, -T::one())?, lp))
    }

    pub fn log_probs_ids(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let b = self.params.bind_frozen(&mut g)?;
        let lp = self.log_probs_graph(&mut g, &b, ids)?;
        Ok(g.value(lp).clone())
    }

    pub fn ar_log_probs(&self, z: &TokenSequence<T>) -> Result<Tensor<T>> {
        self.log_probs_ids(z.ids())
    }

    pub fn loss_ids(&self, ids: &[usize]) -> Result<T> {
        let lp = self.log_probs_ids(ids)?;
        let total: f64 = ids.iter().enumerate().map(|(t, &id)| lp.at2(t, id).as_f64()).sum();
        Ok(T::of(-total / ids.len() as f64))
    }

    pub fn ar_loss(&self, z: &TokenSequence<T>) -> Result<T> {
        self.loss_ids(z.ids())
    }

    /// Mean per-token cross-entropy over many sequences.
    pub fn mean_loss(&self, seqs: &[Vec<usize>]) -> Result<f64> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("no sequences to evaluate".into()));
        }
        let losses = seqs.par_iter().map(|s| self.loss_ids(s).map(|l| l.as_f64())).collect::<Result<Vec<_>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Gradients of the batch-mean loss, plus pre-update log-prob tables.
    pub fn batch_gradients(&self, batch: &[Vec<usize>]) -> Result<(ArStep<T>, Vec<Tensor<T>>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let inv = T::of(1.0 / batch.len() as f64);
        let parts = batch
            .par_iter()
            .map(|ids| {
                let mut g = Graph::unchecked();
                let b = self.params.bind(&mut g)?;
                let (loss, lp) = self.loss_graph(&mut g, &b, ids)?;
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::NonFinite { op: "ar_loss" });
                }
                let grads = g.backward(&[(loss, Tensor::scalar(inv))])?;
                Ok((lv.as_f64(), g.value(lp).clone(), self.params.gradients(&b, &grads)))
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = parts.iter().map(|p| p.0).sum::<f64>() / batch.len() as f64;
        let mut log_probs = Vec::with_capacity(parts.len());
        let mut grad_lists = Vec::with_capacity(parts.len());
        for (_, lp, gr) in parts {
            log_probs.push(lp);
            grad_lists.push(gr);
        }
        let grads = sum_gradients(grad_lists.into_iter()).expect("non-empty batch");
        Ok((ArStep { loss, log_probs }, grads))
    }

    /// One teacher-forced cross-entropy update on `batch`.
    pub fn train_step(&mut self, batch: &[Vec<usize>]) -> Result<ArStep<T>> {
        let (step, grads) = self.batch_gradients(batch)?;
        self.opt.step(&mut self.params, &grads);
        Ok(step)
    }

    /// Ancestral sampling from `softmax(logits / temperature)`; a zero
    /// temperature means greedy argmax.
    pub fn ar_sample(&self, n: usize, temperature: f64, seed: u64) -> Result<TokenSequence<T>> {
        if temperature < 0.0 || temperature.is_nan() {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
        }
        if n == 0 || n > self.config.context {
            return Err(Error::InvalidArgument(format!("cannot sample {n} tokens with context {}", self.config.context)));
        }
        let mut r = rng::seeded(seed);
        let b_params = &self.params;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let mut g = Graph::inference();
            let b = b_params.bind_frozen(&mut g)?;
            let logits = self.logits_graph(&mut g, &b, &ids)?;
            let row = g.value(logits).row(ids.len());
            ids.push(sample_row(row, temperature, &mut r));
        }
        TokenSequence::from_ids(ids, self.config.vocab)
    }
}

/// Draws an index from `softmax(logits / temperature)`; greedy at zero temperature.
pub fn sample_row<T: Scalar>(logits: &[T], temperature: f64, r: &mut rng::Rng) -> usize {
    if temperature == 0.0 {
        return argmax(logits);
    }
    let m = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|v| ((v.as_f64() - m) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng::unit(r) * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}
