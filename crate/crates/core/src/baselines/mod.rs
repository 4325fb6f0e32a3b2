//! Two-stage training and tail dropout, built on the same tokenizer and
//! prior so that only the training objective differs from the joint method.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MetricsRecord;
use crate::error::{Error, Result};
use crate::models::{reconstruction_loss, ArConfig, ArModel, TokenSequence, TokenizerState};
use crate::nn::{sum_gradients, AdamWConfig};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wgf::{abort, tail_keep, tokenizer_part};

/// Sampled tail-dropout cutoff: with probability `prob` keep a prefix of
/// length uniform in `0..n`, otherwise keep all `n` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailDropoutSchedule {
    pub prob: f64,
}

impl Default for TailDropoutSchedule {
    fn default() -> Self {
        Self { prob: 0.5 }
    }
}

impl TailDropoutSchedule {
    pub fn off() -> Self {
        Self { prob: 0.0 }
    }

    /// `P(keep = k)` for `k` in `0..=n`.
    pub fn distribution(&self, n: usize) -> Vec<f64> {
        let mut p = vec![self.prob / n as f64; n + 1];
        p[n] = 1.0 - self.prob;
        p
    }

    pub fn keep(&self, n: usize, seed: u64, step: u64, index: usize) -> usize {
        tail_keep(self.prob, n, seed, step, index)
    }
}

/// Reconstruction loss of `x` decoded from the first `keep` tokens of `z`.
pub fn tail_dropout_loss_at<T: Scalar>(state: &TokenizerState<T>, z: &TokenSequence<T>, x: &Tensor<T>, keep: usize) -> Result<T> {
    reconstruction_loss(x, &state.decode_prefix(z, keep)?)
}

/// [`tail_dropout_loss_at`] with the cutoff drawn from `schedule`.
pub fn tail_dropout_loss<T: Scalar>(
    state: &TokenizerState<T>,
    z: &TokenSequence<T>,
    x: &Tensor<T>,
    schedule: TailDropoutSchedule,
    seed: u64,
) -> Result<T> {
    tail_dropout_loss_at(state, z, x, schedule.keep(z.len(), seed, 0, 0))
}

/// One reconstruction-only tokenizer update (two-stage Stage I).
pub fn stage_one_step<T: Scalar>(
    tok: &mut TokenizerState<T>,
    batch: &[Tensor<T>],
    schedule: TailDropoutSchedule,
    seed: u64,
    step: u64,
) -> Result<MetricsRecord> {
    let start = Instant::now();
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = tok.config.tokens;
    let t: &TokenizerState<T> = tok;
    let parts = batch
        .par_iter()
        .enumerate()
        .map(|(i, x)| tokenizer_part(t, x, schedule.keep(n, seed, step, i), batch.len(), |_| Ok(None)))
        .collect::<Result<Vec<_>>>();
    let parts = abort(step, parts)?;
    let l_rec = parts.iter().map(|p| p.loss).sum::<f64>() / batch.len() as f64;
    let grads = sum_gradients(parts.into_iter().map(|p| p.grads)).expect("non-empty");
    if !grads.iter().all(Tensor::is_finite) {
        return Err(Error::NumericalAbort { step, detail: "non-finite tokenizer gradient".into() });
    }
    tok.apply(&grads);
    Ok(MetricsRecord {
        step,
        l_rec: Some(l_rec),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        ..Default::default()
    })
}

/// Deterministic token ids for every image.
pub fn tokenize_all<T: Scalar>(tok: &TokenizerState<T>, images: &[Tensor<T>]) -> Result<Vec<Vec<usize>>> {
    images.par_iter().map(|x| tok.tokenize(x).map(|z| z.ids().to_vec())).collect()
}

/// Mean reconstruction loss over `images` with all tokens kept.
pub fn mean_reconstruction<T: Scalar>(tok: &TokenizerState<T>, images: &[Tensor<T>]) -> Result<f64> {
    let losses = images
        .par_iter()
        .map(|x| tok.reconstruct(x).and_then(|y| reconstruction_loss(x, &y)).map(|l| l.as_f64()))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorFitConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PriorFitConfig {
    fn default() -> Self {
        Self { layers: 2, dim: 64, heads: 4, mlp_ratio: 2, steps: 1000, batch: 32, lr: 3e-3 }
    }
}

const STREAM_PRIOR_BATCH: u64 = 0x5e2;

/// Stage II: fits a fresh prior to frozen training-split token ids and
/// reports its per-token cross-entropy on the held-out ids.
pub fn fit_prior<T: Scalar>(
    train: &[Vec<usize>],
    heldout: &[Vec<usize>],
    vocab: usize,
    cfg: &PriorFitConfig,
    seed: u64,
) -> Result<(ArModel<T>, f64)> {
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::InvalidArgument("prior fitting needs training and held-out sequences".into()));
    }
    let n = train[0].len();
    let ar = ArConfig {
        vocab,
        context: n,
        layers: cfg.layers,
        dim: cfg.dim,
        heads: cfg.heads,
        mlp_ratio: cfg.mlp_ratio,
        temperature: 1.0,
    };
    let opt = AdamWConfig { lr: cfg.lr, ..Default::default() };
    let mut model = ArModel::new(ar, opt, rng::derive(seed, STREAM_PRIOR_BATCH, u64::MAX))?;
    for step in 0..cfg.steps {
        let mut r = rng::seeded(rng::derive(seed, STREAM_PRIOR_BATCH, step));
        let batch: Vec<Vec<usize>> = (0..cfg.batch).map(|_| train[rng::below(&mut r, train.len())].clone()).collect();
        abort(step, model.train_step(&batch))?;
    }
    let loss = model.mean_loss(heldout)?;
    Ok((model, loss))
}

/// Tokenizer snapshot with its held-out reconstruction loss.
#[derive(Clone, Debug)]
pub struct Snapshot<T> {
    pub step: u64,
    pub recon: f64,
    pub tokenizer: TokenizerState<T>,
}

/// One method's row of a comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub step: u64,
    pub recon: f64,
    pub eval_ar_loss: f64,
    /// Distinct ids used over the held-out tokens.
    pub codes_used: usize,
    /// Entropy (nats) of the held-out unigram token distribution.
    pub unigram_entropy: f64,
    pub in_band: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    /// Reconstruction level every method is matched to.
    pub target_recon: f64,
    pub band: f64,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn row(&self, method: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Largest pairwise relative gap between the selected reconstruction losses.
    pub fn recon_spread(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in &self.rows {
            for b in &self.rows {
                worst = worst.max((a.recon - b.recon).abs() / a.recon.min(b.recon));
            }
        }
        worst
    }

    pub fn write(&self, sink: &mut impl std::io::Write) -> std::io::Result<()> {
        crate::data::write_pairs(
            &[("target_recon", self.target_recon.to_string()), ("band", self.band.to_string())],
            sink,
        )?;
        for r in &self.rows {
            crate::data::write_pairs(
                &[
                    ("method", r.method.clone()),
                    ("step", r.step.to_string()),
                    ("recon", r.recon.to_string()),
                    ("eval_ar_loss", r.eval_ar_loss.to_string()),
                    ("codes_used", r.codes_used.to_string()),
                    ("unigram_entropy", r.unigram_entropy.to_string()),
                    ("in_band", r.in_band.to_string()),
                ],
                sink,
            )?;
        }
        Ok(())
    }
}

/// Snapshot of `snaps` whose reconstruction loss is closest to `target`
/// in relative terms; ties go to the later snapshot.
pub fn closest_snapshot<T>(snaps: &[Snapshot<T>], target: f64) -> Option<&Snapshot<T>> {
    snaps.iter().rev().min_by(|a, b| {
        let da = (a.recon - target).abs();
        let db = (b.recon - target).abs();
        da.total_cmp(&db)
    })
}

pub fn unigram_stats(seqs: &[Vec<usize>], vocab: usize) -> (usize, f64) {
    let mut counts = vec![0usize; vocab];
    for s in seqs {
        for &i in s {
            counts[i] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let p: Vec<f64> = counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect();
    (counts.iter().filter(|&&c| c > 0).count(), crate::tvc::entropy(&p))
}

/// Matches every method at a common reconstruction level and evaluates its
/// token stream with a freshly fitted prior.
///
/// The level is the largest of the per-method best held-out reconstruction
/// losses, so every method can reach it; each method contributes the
/// snapshot closest to that level. Methods whose selection lies outside
/// `band` (relative) are reported with `in_band = false`.
pub fn matched_comparison<T: Scalar>(
    runs: &[(String, Vec<Snapshot<T>>)],
    train: &[Tensor<T>],
    heldout: &[Tensor<T>],
    prior: &PriorFitConfig,
    band: f64,
    seed: u64,
) -> Result<ComparisonReport> {
    if runs.len() < 2 {
        return Err(Error::InvalidArgument("a comparison needs at least two methods".into()));
    }
    let mut target: f64 = 0.0;
    for (name, snaps) in runs {
        let best = snaps.iter().map(|s| s.recon).fold(f64::INFINITY, f64::min);
        if !best.is_finite() {
            return Err(Error::InvalidArgument(format!("method {name} has no snapshots")));
        }
        target = target.max(best);
    }
    let mut rows = Vec::new();
    for (name, snaps) in runs {
        let snap = closest_snapshot(snaps, target).expect("non-empty");
        let tok = &snap.tokenizer;
        let train_ids = tokenize_all(tok, train)?;
        let held_ids = tokenize_all(tok, heldout)?;
        let (_, loss) = fit_prior::<T>(&train_ids, &held_ids, tok.config.codebook, prior, seed)?;
        let (codes_used, unigram_entropy) = unigram_stats(&held_ids, tok.config.codebook);
        rows.push(ComparisonRow {
            method: name.clone(),
            step: snap.step,
            recon: snap.recon,
            eval_ar_loss: loss,
            codes_used,
            unigram_entropy,
            in_band: (snap.recon - target).abs() <= band * target,
        });
    }
    Ok(ComparisonReport { target_recon: target, band, rows })
}

#[cfg(test)]
mod tests;
