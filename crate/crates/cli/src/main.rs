use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wgftok_core::data::{load_checkpoint, write_ppm_grid};
use wgftok_core::harness::{
    evaluate, load_dataset, load_prior, oracle_suite, oracle_suite_with, resume_experiment, run_experiment,
    sample_ids, Experiment, Mode, RunConfig, RunOutcome, Trainer, CHECKPOINT_DIR, FINAL_CHECKPOINT, PRIOR_FILE,
    REPORT_FILE,
};
use wgftok_core::models::TokenSequence;
use wgftok_core::wgf::flipped_score;
use wgftok_core::{Error, Tensor32};

const EXIT_CONFIG: u8 = 1;
const EXIT_ORACLE: u8 = 2;
const EXIT_ABORT: u8 = 3;

#[derive(Parser)]
#[command(name = "wgftok", version, about = "Train and evaluate discrete image tokenizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `out` in the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed, overriding `seed` in the config
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as raw bytes plus a preview grid
    GenData(Common),
    /// Train the method named by `mode`
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint instead of starting fresh
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a trained tokenizer with a freshly fitted prior
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/checkpoints/final.wgft
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sample token sequences from the fitted prior and decode them
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Train every method in [compare] and match them on reconstruction
    Compare(Common),
    /// Run the numerical oracle suite
    Oracle {
        /// Accepted for symmetry with the other subcommands; unused
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report to <out>/oracle.txt
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Negate the prior-matching score (negative control)
        #[arg(long, hide = true)]
        flip_score: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NumericalAbort { .. } => ExitCode::from(EXIT_ABORT),
                _ => ExitCode::from(EXIT_CONFIG),
            }
        }
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

fn print_outcome(method: &str, o: &RunOutcome) {
    let r = &o.report;
    println!(
        "{method}: step {} recon {:.5} eval_ar_loss {:.4} codes {} -> {}",
        r.step,
        r.recon,
        r.eval_ar_loss,
        r.codes_used,
        o.dir.display()
    );
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::GenData(common) => {
            let cfg = common.load()?;
            gen_data(&cfg)?;
        }
        Command::Train { common, resume } => {
            let cfg = common.load()?;
            if let Some(ckpt) = resume {
                let out = resume_experiment(&ckpt, &cfg.out)?;
                print_outcome("resumed", &out);
                return Ok(ExitCode::SUCCESS);
            }
            report_experiment(run_experiment(&cfg)?, cfg.mode);
        }
        Command::Compare(common) => {
            let mut cfg = common.load()?;
            cfg.mode = Mode::Compare;
            report_experiment(run_experiment(&cfg)?, cfg.mode);
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let path = checkpoint.unwrap_or_else(|| cfg.out.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT));
            let trainer = Trainer::from_checkpoint(&load_checkpoint(&path)?)?;
            let data = load_dataset(&cfg)?;
            let (report, _) = evaluate(trainer.tokenizer(), trainer.step_count(), &cfg, &data)?;
            fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
            let report_path = cfg.out.join(REPORT_FILE);
            let mut buf = Vec::new();
            report.write(&mut buf).map_err(io_err(&report_path))?;
            fs::write(&report_path, &buf).map_err(io_err(&report_path))?;
            io::stdout().write_all(&buf).map_err(io_err(Path::new("<stdout>")))?;
        }
        Command::Sample { common, count, temperature } => {
            let cfg = common.load()?;
            sample(&cfg, count, temperature)?;
        }
        Command::Oracle { out, flip_score, .. } => {
            let report = if flip_score { oracle_suite_with(flipped_score) } else { oracle_suite() };
            let mut buf = Vec::new();
            report.write(&mut buf).map_err(io_err(Path::new("<report>")))?;
            io::stdout().write_all(&buf).map_err(io_err(Path::new("<stdout>")))?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                let path = dir.join("oracle.txt");
                fs::write(&path, &buf).map_err(io_err(&path))?;
            }
            if !report.all_pass() {
                return Ok(ExitCode::from(EXIT_ORACLE));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn report_experiment(exp: Experiment, mode: Mode) {
    match exp {
        Experiment::Single(o) => print_outcome(mode.name(), &o),
        Experiment::Compare { runs, report } => {
            for o in &runs {
                let name = o.dir.file_name().and_then(|n| n.to_str()).unwrap_or("run");
                print_outcome(name, o);
            }
            println!("matched at recon {:.5} (band {})", report.target_recon, report.band);
            for r in &report.rows {
                println!(
                    "  {:<13} step {:>6} recon {:.5} eval_ar_loss {:.4} codes {:>3} in_band {}",
                    r.method, r.step, r.recon, r.eval_ar_loss, r.codes_used, r.in_band
                );
            }
        }
    }
}

fn to_bytes(img: &Tensor32) -> impl Iterator<Item = u8> + '_ {
    img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// `train.bin` and `heldout.bin` hold `H·W·3` bytes per image, row-major
/// with interleaved channels; `preview.ppm` tiles the first 64 training images.
fn gen_data(cfg: &RunConfig) -> Result<(), Error> {
    let data = load_dataset(cfg)?;
    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    for (name, images) in [("train.bin", &data.train), ("heldout.bin", &data.heldout)] {
        let path = cfg.out.join(name);
        let bytes: Vec<u8> = images.iter().flat_map(to_bytes).collect();
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    let path = cfg.out.join("preview.ppm");
    let mut f = BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
    write_ppm_grid(&data.train[..data.train.len().min(64)], 8, &mut f)?;
    f.flush().map_err(io_err(&path))?;
    println!("{} training and {} held-out images -> {}", data.train.len(), data.heldout.len(), cfg.out.display());
    Ok(())
}

fn sample(cfg: &RunConfig, count: usize, temperature: f64) -> Result<(), Error> {
    let ckpt = cfg.out.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT);
    let trainer = Trainer::from_checkpoint(&load_checkpoint(&ckpt)?)?;
    let tok = trainer.tokenizer();
    let prior = load_prior(&cfg.out.join(PRIOR_FILE))?;
    let (n, k) = (tok.config.tokens, tok.config.codebook);
    let seqs = sample_ids(&prior, n, count, temperature, cfg.seed)?;
    let mut images = Vec::with_capacity(count);
    let mut lines = String::new();
    for ids in &seqs {
        images.push(tok.decode(&TokenSequence::from_ids(ids.clone(), k)?)?);
        let row: Vec<String> = ids.iter().map(usize::to_string).collect();
        lines.push_str(&row.join(" "));
        lines.push('\n');
    }
    let ids_path = cfg.out.join("samples.txt");
    fs::write(&ids_path, lines).map_err(io_err(&ids_path))?;
    if !images.is_empty() {
        let path = cfg.out.join("samples.ppm");
        let mut f = BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
        write_ppm_grid(&images, 8, &mut f)?;
        f.flush().map_err(io_err(&path))?;
    }
    println!("{count} samples -> {}", cfg.out.display());
    Ok(())
}
