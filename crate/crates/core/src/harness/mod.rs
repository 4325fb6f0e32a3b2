//! Config-driven experiments, the matched comparison and the oracle suite.

mod config;
mod oracle;
mod run;

pub use config::{
    tokenizer_default, CompareConfig, DataConfig, DataSource, EvalConfig, Mode, PriorSpec, RunConfig, TrainConfig,
};
pub use oracle::{oracle_suite, oracle_suite_with, OracleCheck, OracleReport};
pub use run::{
    batch_indices, checkpoint_path, evaluate, eval_ar_loss, load_dataset, load_prior, resume_experiment, run_experiment,
    run_trainer, sample_ids, save_prior, Dataset, EvalReport, Experiment, RunOutcome, Trainer, CHECKPOINT_DIR,
    COMPARISON_FILE, CONFIG_FILE, FINAL_CHECKPOINT, LAST_GOOD_CHECKPOINT, METRICS_FILE, PRIOR_FILE, REPORT_FILE,
    SNAPSHOTS_FILE,
};
