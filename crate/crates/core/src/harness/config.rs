use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::PriorFitConfig;
use crate::error::{Error, Result};
use crate::models::{ArConfig, TokenizerConfig};
use crate::nn::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Joint tokenizer training with the prior-matching update.
    Wartok,
    TwoStage,
    TailDropout,
    /// Runs every method in `[compare]` and matches them on reconstruction.
    Compare,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Wartok => "wartok",
            Mode::TwoStage => "two_stage",
            Mode::TailDropout => "tail_dropout",
            Mode::Compare => "compare",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the CIFAR-10 binary batches.
    pub dir: Option<PathBuf>,
    pub train_size: usize,
    pub heldout_size: usize,
    pub min_rects: usize,
    pub max_rects: usize,
    pub palette: usize,
    /// 2×2 mean pooling of CIFAR-10 images to 16×16.
    pub downsample: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            dir: None,
            train_size: 2048,
            heldout_size: 256,
            min_rects: 2,
            max_rects: 4,
            palette: 8,
            downsample: true,
        }
    }
}

/// Dimensions and optimizer of one autoregressive prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub temperature: f64,
    pub lr: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { layers: 1, dim: 32, heads: 2, mlp_ratio: 2, temperature: 1.0, lr: 3e-3 }
    }
}

impl PriorSpec {
    fn target() -> Self {
        Self { temperature: 0.25, ..Self::default() }
    }

    pub fn ar_config(&self, vocab: usize, context: usize) -> ArConfig {
        ArConfig {
            vocab,
            context,
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            temperature: self.temperature,
        }
    }
}

fn target_default() -> PriorSpec {
    PriorSpec::target()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub lambda_wgf: f64,
    pub warmup_frac: f64,
    /// Cutoff probability used by `tail_dropout` runs.
    pub tail_dropout: f64,
    pub trainable_target: bool,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch: 16,
            lr: 1e-3,
            weight_decay: 3e-2,
            clip: 1.0,
            lambda_wgf: 3e-4,
            warmup_frac: 0.1,
            tail_dropout: 0.5,
            trainable_target: false,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self, lr: f64) -> AdamWConfig {
        AdamWConfig { lr, weight_decay: self.weight_decay, clip: self.clip, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Steps between held-out reconstruction snapshots; 0 disables.
    pub interval: u64,
    /// Steps between fresh-prior evaluations written to the metrics; 0 keeps
    /// only the final evaluation.
    pub ar_interval: u64,
    pub prior: PriorFitConfig,
    /// Leading training images whose tokens fit the evaluation prior.
    pub prior_train_size: usize,
    /// Sequences drawn from the fitted prior for the report.
    pub samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            ar_interval: 0,
            prior: PriorFitConfig { layers: 1, dim: 32, heads: 2, mlp_ratio: 2, steps: 500, batch: 32, lr: 3e-3 },
            prior_train_size: 1024,
            samples: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub methods: Vec<Mode>,
    /// Relative reconstruction band for a matched selection.
    pub band: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { methods: vec![Mode::Wartok, Mode::TwoStage, Mode::TailDropout], band: 0.05 }
    }
}

/// Everything one experiment needs. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "tokenizer_default")]
    pub tokenizer: TokenizerConfig,
    #[serde(default = "target_default")]
    pub target: PriorSpec,
    #[serde(default)]
    pub proxy: PriorSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub compare: CompareConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Desk-scale tokenizer: 16×16 images, 16 tokens over 64 codes.
pub fn tokenizer_default() -> TokenizerConfig {
    TokenizerConfig { dim: 32, heads: 2, enc_layers: 1, dec_layers: 1, code_dim: 8, ..Default::default() }
}

impl RunConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            seed: 0,
            out: default_out(),
            data: DataConfig::default(),
            tokenizer: tokenizer_default(),
            target: PriorSpec::target(),
            proxy: PriorSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            compare: CompareConfig::default(),
        }
    }

    /// Parses and validates; errors name the offending line and field.
    pub fn from_toml(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate().map_err(|(section, key, msg)| {
            let field = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            match key_line(src, section, key) {
                Some(line) => Error::Config(format!("line {line}, field {field}: {msg}")),
                None => Error::Config(format!("field {field}: {msg}")),
            }
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&src).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn target_config(&self) -> ArConfig {
        self.target.ar_config(self.tokenizer.codebook, self.tokenizer.tokens)
    }

    pub fn proxy_config(&self) -> ArConfig {
        self.proxy.ar_config(self.tokenizer.codebook, self.tokenizer.tokens)
    }

    /// Validates every field, reporting `(section, key, message)`.
    fn validate(&self) -> std::result::Result<(), (&'static str, &'static str, String)> {
        fn positive<N: PartialOrd + Default + fmt::Display>(
            section: &'static str,
            key: &'static str,
            v: N,
        ) -> std::result::Result<(), (&'static str, &'static str, String)> {
            if v > N::default() {
                Ok(())
            } else {
                Err((section, key, format!("must be positive, got {v}")))
            }
        }
        let t = &self.tokenizer;
        for (key, v) in [
            ("height", t.height),
            ("width", t.width),
            ("channels", t.channels),
            ("patch", t.patch),
            ("tokens", t.tokens),
            ("code_dim", t.code_dim),
            ("dim", t.dim),
            ("heads", t.heads),
            ("mlp_ratio", t.mlp_ratio),
        ] {
            positive("tokenizer", key, v)?;
        }
        positive("tokenizer", "tau_q", t.tau_q)?;
        if t.codebook < 2 {
            return Err(("tokenizer", "codebook", format!("needs at least 2 codes, got {}", t.codebook)));
        }
        t.validate().map_err(|e| ("tokenizer", "patch", e.to_string()))?;
        for (section, p) in [("target", &self.target), ("proxy", &self.proxy)] {
            positive(section, "layers", p.layers)?;
            positive(section, "dim", p.dim)?;
            positive(section, "heads", p.heads)?;
            positive(section, "mlp_ratio", p.mlp_ratio)?;
            positive(section, "temperature", p.temperature)?;
            positive(section, "lr", p.lr)?;
            if p.dim % p.heads != 0 {
                return Err((section, "heads", format!("{} heads do not divide dim {}", p.heads, p.dim)));
            }
        }
        if self.proxy.temperature != 1.0 {
            return Err(("proxy", "temperature", "the proxy models the token stream itself and must use 1".into()));
        }
        let tr = &self.train;
        positive("train", "steps", tr.steps)?;
        positive("train", "batch", tr.batch)?;
        positive("train", "lr", tr.lr)?;
        if tr.weight_decay < 0.0 {
            return Err(("train", "weight_decay", format!("must be non-negative, got {}", tr.weight_decay)));
        }
        if tr.clip < 0.0 {
            return Err(("train", "clip", format!("must be non-negative, got {}", tr.clip)));
        }
        if !(tr.lambda_wgf >= 0.0 && tr.lambda_wgf.is_finite()) {
            return Err(("train", "lambda_wgf", format!("must be finite and non-negative, got {}", tr.lambda_wgf)));
        }
        if !(0.0..=1.0).contains(&tr.warmup_frac) {
            return Err(("train", "warmup_frac", format!("must lie in [0, 1], got {}", tr.warmup_frac)));
        }
        if !(0.0..=1.0).contains(&tr.tail_dropout) {
            return Err(("train", "tail_dropout", format!("must lie in [0, 1], got {}", tr.tail_dropout)));
        }
        let d = &self.data;
        positive("data", "train_size", d.train_size)?;
        positive("data", "heldout_size", d.heldout_size)?;
        match d.source {
            DataSource::Synthetic => {
                if d.palette == 0 || d.palette > crate::data::PALETTE.len() {
                    return Err(("data", "palette", format!("must be 1..=8, got {}", d.palette)));
                }
                if d.min_rects > d.max_rects {
                    return Err(("data", "min_rects", format!("exceeds max_rects {}", d.max_rects)));
                }
                if t.channels != 3 {
                    return Err(("tokenizer", "channels", "synthetic images are RGB".into()));
                }
            }
            DataSource::Cifar10 => {
                if d.dir.is_none() {
                    return Err(("data", "dir", "required for source = \"cifar10\"".into()));
                }
                let side = if d.downsample { 16 } else { 32 };
                if t.height != side || t.width != side || t.channels != 3 {
                    return Err(("tokenizer", "height", format!("CIFAR-10 images here are {side}×{side}×3")));
                }
            }
        }
        let e = &self.eval;
        let p = &e.prior;
        for (key, v) in [("layers", p.layers), ("dim", p.dim), ("heads", p.heads), ("mlp_ratio", p.mlp_ratio), ("batch", p.batch)] {
            positive("eval.prior", key, v)?;
        }
        positive("eval.prior", "lr", p.lr)?;
        positive("eval", "prior_train_size", e.prior_train_size)?;
        if p.dim % p.heads != 0 {
            return Err(("eval.prior", "heads", format!("{} heads do not divide dim {}", p.heads, p.dim)));
        }
        let c = &self.compare;
        if self.mode == Mode::Compare {
            if c.methods.len() < 2 {
                return Err(("compare", "methods", "needs at least two methods".into()));
            }
            if c.methods.contains(&Mode::Compare) {
                return Err(("compare", "methods", "cannot nest compare".into()));
            }
            if e.interval == 0 {
                return Err(("eval", "interval", "compare needs reconstruction snapshots".into()));
            }
        }
        if !(c.band > 0.0) {
            return Err(("compare", "band", format!("must be positive, got {}", c.band)));
        }
        Ok(())
    }
}

/// 1-based line of `key = ...` inside `[section]` (top level when empty).
fn key_line(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = header.trim().to_string();
            continue;
        }
        if current != section {
            continue;
        }
        if let Some((k, _)) = line.split_once('=') {
            if k.trim() == key {
                return Some(i + 1);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::new(Mode::Wartok);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::from_toml("mode = \"two_stage\"\n").unwrap();
        assert_eq!(cfg, RunConfig::new(Mode::TwoStage));
    }

    #[test]
    fn unknown_key_names_line_and_field() {
        let src = "mode = \"wartok\"\n\n[train]\nsteps = 10\nlamda_wgf = 0.1\n";
        let msg = RunConfig::from_toml(src).unwrap_err().to_string();
        assert!(msg.contains("line 5"), "{msg}");
        assert!(msg.contains("lamda_wgf"), "{msg}");
    }

    #[test]
    fn invalid_value_names_line_and_field() {
        let src = "mode = \"wartok\"\n[train]\nsteps = 10\nbatch = 0\n";
        let msg = RunConfig::from_toml(src).unwrap_err().to_string();
        assert!(msg.contains("line 4"), "{msg}");
        assert!(msg.contains("train.batch"), "{msg}");
    }

    #[test]
    fn wrong_type_is_rejected() {
        let msg = RunConfig::from_toml("mode = \"wartok\"\n[train]\nsteps = \"many\"\n").unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn unknown_mode_is_rejected() {
        assert!(RunConfig::from_toml("mode = \"vqgan\"\n").is_err());
    }

    #[test]
    fn cifar_requires_dir() {
        let msg = RunConfig::from_toml("mode = \"two_stage\"\n[data]\nsource = \"cifar10\"\n").unwrap_err().to_string();
        assert!(msg.contains("data.dir"), "{msg}");
    }
}
