use std::fs;
use std::path::Path;

use wgftok_core::data::{load_checkpoint, read_metrics, MetricsRecord};
use wgftok_core::harness::*;
use wgftok_core::wgf::flipped_score;
use wgftok_core::Error;

fn tiny(mode: Mode, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::new(mode);
    cfg.out = out.to_path_buf();
    cfg.data.train_size = 64;
    cfg.data.heldout_size = 16;
    cfg.tokenizer.dim = 16;
    cfg.tokenizer.code_dim = 4;
    cfg.target.dim = 16;
    cfg.proxy.dim = 16;
    cfg.train.steps = 30;
    cfg.train.batch = 4;
    cfg.train.checkpoint_interval = 10;
    cfg.eval.interval = 10;
    cfg.eval.ar_interval = 15;
    cfg.eval.prior.dim = 16;
    cfg.eval.prior.steps = 10;
    cfg.eval.prior.batch = 8;
    cfg.eval.prior_train_size = 32;
    cfg.eval.samples = 8;
    cfg
}

fn metrics(dir: &Path) -> Vec<MetricsRecord> {
    let f = fs::File::open(dir.join(METRICS_FILE)).unwrap();
    read_metrics(std::io::BufReader::new(f)).unwrap().iter().map(MetricsRecord::untimed).collect()
}

#[test]
fn wartok_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(Mode::Wartok, tmp.path());
    let Experiment::Single(out) = run_experiment(&cfg).unwrap() else { panic!("single run expected") };
    let recs = metrics(tmp.path());
    assert_eq!(recs.len(), 30);
    assert!(recs.iter().all(|r| r.l_rec.is_some() && r.l_ar_proxy.is_some()));
    let evals: Vec<u64> = recs.iter().filter(|r| r.eval_ar_loss.is_some()).map(|r| r.step).collect();
    assert_eq!(evals, vec![14, 29]);
    assert_eq!(out.snapshots.iter().map(|s| s.step).collect::<Vec<_>>(), vec![10, 20, 30]);
    for f in [CONFIG_FILE, SNAPSHOTS_FILE, REPORT_FILE, PRIOR_FILE] {
        assert!(tmp.path().join(f).is_file(), "{f}");
    }
    for step in [10, 20, 30] {
        assert!(checkpoint_path(tmp.path(), step).is_file());
    }
    let snapshot = fs::read_to_string(tmp.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(RunConfig::from_toml(&snapshot).unwrap(), cfg);
    assert!(out.report.eval_ar_loss.is_finite() && out.report.recon.is_finite());
    assert!(load_prior(&tmp.path().join(PRIOR_FILE)).is_ok());
}

#[test]
fn equal_config_and_seed_give_equal_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&tiny(Mode::TwoStage, a.path())).unwrap();
    run_experiment(&tiny(Mode::TwoStage, b.path())).unwrap();
    assert_eq!(metrics(a.path()), metrics(b.path()));
    let mut other = tiny(Mode::TwoStage, b.path());
    other.seed = 1;
    run_experiment(&other).unwrap();
    assert_ne!(metrics(a.path()), metrics(b.path()));
}

#[test]
fn resume_replays_uninterrupted_training() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = tiny(Mode::Wartok, a.path());
    cfg.train.steps = 60;
    cfg.eval.ar_interval = 0;
    run_experiment(&cfg).unwrap();
    let full = metrics(a.path());

    let ckpt = load_checkpoint(&checkpoint_path(a.path(), 10)).unwrap();
    let resumed = resume_experiment(&checkpoint_path(a.path(), 10), b.path()).unwrap();
    assert_eq!(ckpt.step, 10);
    let replay: Vec<MetricsRecord> = resumed.metrics.iter().map(MetricsRecord::untimed).collect();
    assert_eq!(replay.len(), 50);
    assert_eq!(replay, full[10..]);
    let (fa, fb) = (
        load_checkpoint(&a.path().join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT)).unwrap(),
        load_checkpoint(&b.path().join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT)).unwrap(),
    );
    assert_eq!(fa, fb);
}

#[test]
fn numerical_abort_keeps_last_good_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Mode::TwoStage, tmp.path());
    cfg.train.lr = 1e30;
    cfg.train.clip = 0.0;
    cfg.train.weight_decay = 0.0;
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, Error::NumericalAbort { .. }), "{err}");
    let last = load_checkpoint(&tmp.path().join(CHECKPOINT_DIR).join(LAST_GOOD_CHECKPOINT)).unwrap();
    let t = Trainer::from_checkpoint(&last).unwrap();
    assert!(t.tokenizer().params.values().iter().all(|v| v.is_finite()));
    assert_eq!(metrics(tmp.path()).len() as u64, last.step);
}

#[test]
fn compare_reports_every_method() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(Mode::Compare, tmp.path());
    let Experiment::Compare { runs, report } = run_experiment(&cfg).unwrap() else { panic!("compare expected") };
    assert_eq!(runs.len(), 3);
    for m in ["wartok", "two_stage", "tail_dropout"] {
        assert!(report.row(m).is_some(), "{m}");
        assert!(tmp.path().join(m).join(METRICS_FILE).is_file());
    }
    assert!(tmp.path().join(COMPARISON_FILE).is_file());
}

#[test]
fn oracle_suite_passes_and_catches_a_flipped_score() {
    let rep = oracle_suite();
    assert!(rep.checks.len() >= 12);
    assert!(rep.all_pass(), "{rep:#?}");
    let bad = oracle_suite_with(flipped_score);
    assert!(!bad.get("kl_descent").unwrap().pass);
    assert!(!bad.all_pass());
}

#[test]
fn config_file_errors_name_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "mode = \"wartok\"\nsteps = 3\n").unwrap();
    let msg = RunConfig::load(&path).unwrap_err().to_string();
    assert!(msg.contains("bad.toml") && msg.contains("steps") && msg.contains("line 2"), "{msg}");
}

#[test]
fn zero_lambda_reconstruction_keeps_falling() {
    let mut cfg = RunConfig::new(Mode::Wartok);
    cfg.train.lambda_wgf = 0.0;
    cfg.train.steps = 500;
    let data = load_dataset(&cfg).unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    let losses: Vec<f64> = (0..500).map(|_| t.step(&data.train).unwrap().l_rec.unwrap()).collect();
    let means: Vec<f64> = losses.chunks(100).map(|c| c.iter().sum::<f64>() / 100.0).collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
}
