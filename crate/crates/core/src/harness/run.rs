use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::{DataSource, Mode, RunConfig};
use crate::baselines::{
    fit_prior, matched_comparison, mean_reconstruction, stage_one_step, tokenize_all, unigram_stats, ComparisonReport,
    Snapshot, TailDropoutSchedule,
};
use crate::data::checkpoint::{tensor_to_u64, u64_to_tensor};
use crate::data::{
    gen_synthetic, load_checkpoint, load_cifar10, load_cifar10_test, save_checkpoint, write_metrics, write_pairs,
    Checkpoint, MetricsRecord, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::models::{ArConfig, ArModel, TokenizerState};
use crate::nn::{AdamW, AdamWConfig, ParamStore};
use crate::rng;
use crate::wgf::{dpd_train_step, JointConfig, JointTrainState};
use crate::{ArModel32, Tensor32, Tokenizer32};

const STREAM_DATA: u64 = 0xda7a;
const STREAM_INIT: u64 = 0x1417;
const STREAM_BATCH: u64 = 0xba7c;
const STREAM_EVAL: u64 = 0xe7a1;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.txt";
pub const SNAPSHOTS_FILE: &str = "snapshots.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const COMPARISON_FILE: &str = "comparison.txt";
pub const PRIOR_FILE: &str = "prior.wgft";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.wgft";
pub const LAST_GOOD_CHECKPOINT: &str = "last-good.wgft";

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Tensor32>,
    pub heldout: Vec<Tensor32>,
}

/// Synthetic images from the run seed, or the CIFAR-10 train and test batches.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => {
            let spec = |size| SyntheticSpec {
                height: cfg.tokenizer.height,
                width: cfg.tokenizer.width,
                min_rects: d.min_rects,
                max_rects: d.max_rects,
                palette: d.palette,
                size,
            };
            Ok(Dataset {
                train: gen_synthetic(&spec(d.train_size), rng::derive(cfg.seed, STREAM_DATA, 0))?,
                heldout: gen_synthetic(&spec(d.heldout_size), rng::derive(cfg.seed, STREAM_DATA, 1))?,
            })
        }
        DataSource::Cifar10 => {
            let dir = d.dir.as_deref().ok_or_else(|| Error::Config("data.dir is required for cifar10".into()))?;
            let mut train = load_cifar10::<f32>(dir, d.downsample)?.images;
            let mut heldout = load_cifar10_test::<f32>(dir, d.downsample)?.images;
            train.truncate(d.train_size);
            heldout.truncate(d.heldout_size);
            Ok(Dataset { train, heldout })
        }
    }
}

/// Training-set indices of the batch at `step`, drawn with replacement.
pub fn batch_indices(seed: u64, step: u64, batch: usize, len: usize) -> Vec<usize> {
    let mut r = rng::seeded(rng::derive(seed, STREAM_BATCH, step));
    (0..batch).map(|_| rng::below(&mut r, len)).collect()
}

#[derive(Clone, Debug)]
enum Method {
    Stage { tokenizer: Tokenizer32, schedule: TailDropoutSchedule, step: u64 },
    Joint(Box<JointTrainState<f32>>),
}

/// One method's training state, stepped with batches chosen from `(seed, step)`.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: RunConfig,
    method: Method,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        let seed = config.seed;
        let tr = &config.train;
        let tokenizer = TokenizerState::new(
            config.tokenizer.clone(),
            tr.optimizer(tr.lr),
            rng::derive(seed, STREAM_INIT, 0),
        )?;
        let method = match config.mode {
            Mode::TwoStage => Method::Stage { tokenizer, schedule: TailDropoutSchedule::off(), step: 0 },
            Mode::TailDropout => Method::Stage { tokenizer, schedule: TailDropoutSchedule { prob: tr.tail_dropout }, step: 0 },
            Mode::Wartok => {
                let target = ArModel::new(
                    config.target_config(),
                    tr.optimizer(config.target.lr),
                    rng::derive(seed, STREAM_INIT, 1),
                )?;
                let proxy =
                    ArModel::new(config.proxy_config(), tr.optimizer(config.proxy.lr), rng::derive(seed, STREAM_INIT, 2))?;
                let joint = JointConfig {
                    lambda_wgf: tr.lambda_wgf,
                    warmup_frac: tr.warmup_frac,
                    total_steps: tr.steps,
                    trainable_target: tr.trainable_target,
                    tail_dropout: 0.0,
                    seed,
                };
                Method::Joint(Box::new(JointTrainState::new(tokenizer, target, proxy, joint)?))
            }
            Mode::Compare => return Err(Error::Config("compare runs several trainers; pick one method".into())),
        };
        Ok(Self { config, method })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Completed updates.
    pub fn step_count(&self) -> u64 {
        match &self.method {
            Method::Stage { step, .. } => *step,
            Method::Joint(s) => s.step,
        }
    }

    pub fn tokenizer(&self) -> &Tokenizer32 {
        match &self.method {
            Method::Stage { tokenizer, .. } => tokenizer,
            Method::Joint(s) => &s.tokenizer,
        }
    }

    pub fn joint(&self) -> Option<&JointTrainState<f32>> {
        match &self.method {
            Method::Joint(s) => Some(s),
            Method::Stage { .. } => None,
        }
    }

    /// One update on the batch for the current step. State is unchanged on error.
    pub fn step(&mut self, train: &[Tensor32]) -> Result<MetricsRecord> {
        let (seed, bsz) = (self.config.seed, self.config.train.batch);
        let step = self.step_count();
        let batch: Vec<Tensor32> = batch_indices(seed, step, bsz, train.len()).into_iter().map(|i| train[i].clone()).collect();
        match &mut self.method {
            Method::Stage { tokenizer, schedule, step: s } => {
                let rec = stage_one_step(tokenizer, &batch, *schedule, seed, step)?;
                *s += 1;
                Ok(rec)
            }
            Method::Joint(state) => dpd_train_step(state, &batch),
        }
    }

    /// Every parameter, optimizer moment and counter, plus the config snapshot.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.step_count(), self.config.to_toml());
        match &self.method {
            Method::Stage { tokenizer, .. } => push_model(&mut c, "tok", &tokenizer.params, Some(&tokenizer.opt)),
            Method::Joint(s) => {
                push_model(&mut c, "tok", &s.tokenizer.params, Some(&s.tokenizer.opt));
                push_model(&mut c, "target", &s.target.params, Some(&s.target.opt));
                push_model(&mut c, "proxy", &s.proxy.params, Some(&s.proxy.opt));
            }
        }
        c
    }

    /// Rebuilds the trainer from a checkpoint's own config snapshot.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config = RunConfig::from_toml(&c.config)?;
        let mut t = Self::new(config)?;
        match &mut t.method {
            Method::Stage { tokenizer, step, .. } => {
                restore_model(c, "tok", &mut tokenizer.params, Some(&mut tokenizer.opt))?;
                *step = c.step;
            }
            Method::Joint(s) => {
                restore_model(c, "tok", &mut s.tokenizer.params, Some(&mut s.tokenizer.opt))?;
                restore_model(c, "target", &mut s.target.params, Some(&mut s.target.opt))?;
                restore_model(c, "proxy", &mut s.proxy.params, Some(&mut s.proxy.opt))?;
                s.step = c.step;
            }
        }
        Ok(t)
    }
}

pub fn push_model(c: &mut Checkpoint, prefix: &str, params: &ParamStore<f32>, opt: Option<&AdamW<f32>>) {
    for (name, t) in params.iter() {
        c.push(format!("{prefix}/{name}"), t);
    }
    if let Some(opt) = opt {
        for (i, (name, _)) in params.iter().enumerate() {
            c.push(format!("{prefix}/adam.m/{name}"), &opt.m[i]);
            c.push(format!("{prefix}/adam.v/{name}"), &opt.v[i]);
        }
        c.push(format!("{prefix}/adam.t"), &u64_to_tensor(opt.t));
    }
}

pub fn restore_model(
    c: &Checkpoint,
    prefix: &str,
    params: &mut ParamStore<f32>,
    opt: Option<&mut AdamW<f32>>,
) -> Result<()> {
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        params
            .assign(name, c.get(&format!("{prefix}/{name}"))?.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("{prefix}/{name}: {e}")))?;
    }
    if let Some(opt) = opt {
        for (i, name) in names.iter().enumerate() {
            for (slot, key) in [(&mut opt.m[i], "m"), (&mut opt.v[i], "v")] {
                let t = c.get(&format!("{prefix}/adam.{key}/{name}"))?;
                if t.shape() != slot.shape() {
                    return Err(Error::CorruptCheckpoint(format!(
                        "{prefix}/adam.{key}/{name} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.clone();
            }
        }
        opt.t = tensor_to_u64(c.get(&format!("{prefix}/adam.t"))?)?;
    }
    Ok(())
}

/// Final evaluation of a tokenizer.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub step: u64,
    /// Mean held-out reconstruction loss with every token kept.
    pub recon: f64,
    /// Held-out per-token cross-entropy of a prior fitted to the training tokens.
    pub eval_ar_loss: f64,
    pub codes_used: usize,
    pub unigram_entropy: f64,
    /// Token statistics of sequences sampled from the fitted prior.
    pub sample_codes_used: usize,
    pub sample_unigram_entropy: f64,
}

impl EvalReport {
    pub fn write(&self, sink: &mut impl Write) -> std::io::Result<()> {
        write_pairs(
            &[
                ("step", self.step.to_string()),
                ("recon", self.recon.to_string()),
                ("eval_ar_loss", self.eval_ar_loss.to_string()),
                ("codes_used", self.codes_used.to_string()),
                ("unigram_entropy", self.unigram_entropy.to_string()),
                ("sample_codes_used", self.sample_codes_used.to_string()),
                ("sample_unigram_entropy", self.sample_unigram_entropy.to_string()),
            ],
            sink,
        )
    }
}

fn prior_train<'a>(cfg: &RunConfig, data: &'a Dataset) -> &'a [Tensor32] {
    &data.train[..cfg.eval.prior_train_size.min(data.train.len())]
}

fn eval_seed(cfg: &RunConfig) -> u64 {
    rng::derive(cfg.seed, STREAM_EVAL, 0)
}

/// Held-out cross-entropy of a fresh prior fitted to the tokenizer's training tokens.
pub fn eval_ar_loss(tok: &Tokenizer32, cfg: &RunConfig, data: &Dataset) -> Result<(ArModel32, f64)> {
    let train_ids = tokenize_all(tok, prior_train(cfg, data))?;
    let held_ids = tokenize_all(tok, &data.heldout)?;
    fit_prior(&train_ids, &held_ids, tok.config.codebook, &cfg.eval.prior, eval_seed(cfg))
}

pub fn evaluate(tok: &Tokenizer32, step: u64, cfg: &RunConfig, data: &Dataset) -> Result<(EvalReport, ArModel32)> {
    let (prior, loss) = eval_ar_loss(tok, cfg, data)?;
    let held_ids = tokenize_all(tok, &data.heldout)?;
    let k = tok.config.codebook;
    let (codes_used, unigram_entropy) = unigram_stats(&held_ids, k);
    let samples = sample_ids(&prior, tok.config.tokens, cfg.eval.samples, 1.0, rng::derive(cfg.seed, STREAM_EVAL, 1))?;
    let (sample_codes_used, sample_unigram_entropy) = unigram_stats(&samples, k);
    let report = EvalReport {
        step,
        recon: mean_reconstruction(tok, &data.heldout)?,
        eval_ar_loss: loss,
        codes_used,
        unigram_entropy,
        sample_codes_used,
        sample_unigram_entropy,
    };
    Ok((report, prior))
}

/// `count` sequences of `n` tokens; sequence `i` uses the stream `derive(seed, 0, i)`.
pub fn sample_ids(prior: &ArModel32, n: usize, count: usize, temperature: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    (0..count)
        .map(|i| prior.ar_sample(n, temperature, rng::derive(seed, 0, i as u64)).map(|z| z.ids().to_vec()))
        .collect()
}

pub fn save_prior(prior: &ArModel32, path: &Path) -> Result<()> {
    let cfg = toml::to_string(&prior.config).expect("prior config serializes");
    let mut c = Checkpoint::new(0, cfg);
    push_model(&mut c, "prior", &prior.params, None);
    save_checkpoint(&c, path)
}

pub fn load_prior(path: &Path) -> Result<ArModel32> {
    let c = load_checkpoint(path)?;
    let cfg: ArConfig = toml::from_str(&c.config).map_err(|e| Error::CorruptCheckpoint(format!("prior config: {e}")))?;
    let mut prior = ArModel::new(cfg, AdamWConfig::default(), 0)?;
    restore_model(&c, "prior", &mut prior.params, None)?;
    Ok(prior)
}

/// Artifacts of one training run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    /// Records produced by this invocation.
    pub metrics: Vec<MetricsRecord>,
    /// Held-out reconstruction snapshots taken every `eval.interval` steps.
    pub snapshots: Vec<Snapshot<f32>>,
    pub report: EvalReport,
}

fn create(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("step-{step:08}.wgft"))
}

/// Trains to `train.steps` from wherever `trainer` is, writing into `dir`.
///
/// A resumed trainer appends to the existing metrics and snapshot files. On a
/// numerical abort the unchanged pre-step state is saved as the last-good
/// checkpoint and the abort is returned.
pub fn run_trainer(mut trainer: Trainer, data: &Dataset, dir: &Path) -> Result<RunOutcome> {
    let cfg = trainer.config().clone();
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml()).map_err(io_at(&config_path))?;
    let resumed = trainer.step_count() > 0;
    let (metrics_path, snaps_path) = (dir.join(METRICS_FILE), dir.join(SNAPSHOTS_FILE));
    let mut metrics_out = create(&metrics_path, resumed)?;
    let mut snaps_out = create(&snaps_path, resumed)?;
    let mut metrics = Vec::new();
    let mut snapshots = Vec::new();
    while trainer.step_count() < cfg.train.steps {
        let mut rec = match trainer.step(&data.train) {
            Ok(r) => r,
            Err(e) => {
                metrics_out.flush().map_err(io_at(&metrics_path))?;
                if matches!(e, Error::NumericalAbort { .. }) {
                    save_checkpoint(&trainer.checkpoint(), &ckpt_dir.join(LAST_GOOD_CHECKPOINT))?;
                }
                return Err(e);
            }
        };
        let done = trainer.step_count();
        if cfg.eval.interval > 0 && done % cfg.eval.interval == 0 {
            let recon = mean_reconstruction(trainer.tokenizer(), &data.heldout)?;
            write_pairs(&[("step", done.to_string()), ("recon", recon.to_string())], &mut snaps_out)
                .map_err(io_at(&snaps_path))?;
            snapshots.push(Snapshot { step: done, recon, tokenizer: trainer.tokenizer().clone() });
        }
        if cfg.eval.ar_interval > 0 && done % cfg.eval.ar_interval == 0 {
            rec.eval_ar_loss = Some(eval_ar_loss(trainer.tokenizer(), &cfg, data)?.1);
        }
        write_metrics(&rec, &mut metrics_out).map_err(io_at(&metrics_path))?;
        metrics.push(rec);
        if cfg.train.checkpoint_interval > 0 && done % cfg.train.checkpoint_interval == 0 {
            save_checkpoint(&trainer.checkpoint(), &checkpoint_path(dir, done))?;
        }
    }
    metrics_out.flush().map_err(io_at(&metrics_path))?;
    snaps_out.flush().map_err(io_at(&snaps_path))?;
    save_checkpoint(&trainer.checkpoint(), &ckpt_dir.join(FINAL_CHECKPOINT))?;
    let (report, prior) = evaluate(trainer.tokenizer(), trainer.step_count(), &cfg, data)?;
    let report_path = dir.join(REPORT_FILE);
    let mut out = create(&report_path, false)?;
    report.write(&mut out).and_then(|_| out.flush()).map_err(io_at(&report_path))?;
    save_prior(&prior, &dir.join(PRIOR_FILE))?;
    Ok(RunOutcome { dir: dir.to_path_buf(), metrics, snapshots, report })
}

#[derive(Clone, Debug)]
pub enum Experiment {
    Single(RunOutcome),
    Compare { runs: Vec<RunOutcome>, report: ComparisonReport },
}

/// Runs the experiment described by `cfg` into `cfg.out`.
///
/// Compare mode trains every listed method in `out/<method>` from the same
/// seed and then matches them on held-out reconstruction.
pub fn run_experiment(cfg: &RunConfig) -> Result<Experiment> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let data = load_dataset(cfg)?;
    if cfg.mode != Mode::Compare {
        return Ok(Experiment::Single(run_trainer(Trainer::new(cfg.clone())?, &data, &cfg.out)?));
    }
    let config_path = cfg.out.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml()).map_err(io_at(&config_path))?;
    let mut runs = Vec::new();
    for &m in &cfg.compare.methods {
        let mut sub = cfg.clone();
        sub.mode = m;
        sub.out = cfg.out.join(m.name());
        runs.push(run_trainer(Trainer::new(sub.clone())?, &data, &sub.out)?);
    }
    let named: Vec<(String, Vec<Snapshot<f32>>)> =
        cfg.compare.methods.iter().zip(&runs).map(|(m, r)| (m.name().to_string(), r.snapshots.clone())).collect();
    let report =
        matched_comparison(&named, prior_train(cfg, &data), &data.heldout, &cfg.eval.prior, cfg.compare.band, eval_seed(cfg))?;
    let path = cfg.out.join(COMPARISON_FILE);
    let mut out = create(&path, false)?;
    report.write(&mut out).and_then(|_| out.flush()).map_err(io_at(&path))?;
    Ok(Experiment::Compare { runs, report })
}

/// Continues the run saved in `checkpoint`, writing into `dir`.
pub fn resume_experiment(checkpoint: &Path, dir: &Path) -> Result<RunOutcome> {
    let trainer = Trainer::from_checkpoint(&load_checkpoint(checkpoint)?)?;
    let data = load_dataset(trainer.config())?;
    run_trainer(trainer, &data, dir)
}
