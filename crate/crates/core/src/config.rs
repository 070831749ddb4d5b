//! Run configuration in TOML with dotted section keys. Every key is
//! optional and unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/demo"
//! unlearn.method = "CONSTRAINED_JOINT"
//! unlearn.layers = "auto"        # or an inclusive block range such as "0-3"
//! unlearn.kinds = ["MLP", "MHSA"]
//! unlearn.alpha.b = 6
//! ```

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::corpus::SplitCounts;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModuleKind};
use crate::tensor::OptimizerConfig;
use crate::trace::TraceConfig;
use crate::train::TrainConfig;
use crate::unlearn::{Method, UnlearnConfig};

/// Which blocks unlearning may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerChoice {
    /// Take the block range from the trace report.
    Auto,
    /// Inclusive `[lo, hi]`.
    Range(usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: SplitCounts,
    /// `vocab_size` is filled in from the generated corpus.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub trace: TraceConfig,
    pub unlearn: UnlearnConfig,
    pub layers: LayerChoice,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            corpus: SplitCounts::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            trace: TraceConfig::default(),
            unlearn: UnlearnConfig::default(),
            layers: LayerChoice::Auto,
        };
        c.set_seed(0);
        c
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawFile {
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    #[serde(default)]
    corpus: RawCorpus,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    trace: RawTrace,
    #[serde(default)]
    unlearn: RawUnlearn,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawCorpus {
    forget: Option<usize>,
    retain: Option<usize>,
    holdout: Option<usize>,
    utility: Option<usize>,
    completions: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawModel {
    num_layers: Option<usize>,
    d_model: Option<usize>,
    num_heads: Option<usize>,
    d_mlp: Option<usize>,
    max_seq_len: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    max_epochs: Option<usize>,
    batch_size: Option<usize>,
    target_accuracy: Option<f64>,
    check_every: Option<usize>,
    warmup_epochs: Option<usize>,
    min_lr_fraction: Option<f64>,
    /// 0 disables clipping.
    grad_clip: Option<f64>,
    learning_rate: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    epsilon: Option<f64>,
    weight_decay: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTrace {
    noise_scale: Option<f64>,
    num_noise_samples: Option<usize>,
    max_facts: Option<usize>,
    critical_fraction: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawAlpha {
    a: Option<f64>,
    b: Option<f64>,
    c: Option<f64>,
    min: Option<f64>,
    max: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawUnlearn {
    method: Option<Spanned<String>>,
    layers: Option<Spanned<String>>,
    kinds: Option<Spanned<Vec<String>>>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    forget_floor: Option<f64>,
    #[serde(default)]
    alpha: RawAlpha,
    learning_rate: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    epsilon: Option<f64>,
    weight_decay: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_optimizer(opt: &mut OptimizerConfig, lr: Option<f64>, b1: Option<f64>, b2: Option<f64>, eps: Option<f64>, wd: Option<f64>) {
    set(&mut opt.learning_rate, lr);
    set(&mut opt.beta1, b1);
    set(&mut opt.beta2, b2);
    set(&mut opt.epsilon, eps);
    set(&mut opt.weight_decay, wd);
}

/// 1-based line of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn spanned_error(text: &str, span: Range<usize>, message: String) -> Error {
    Error::Config { line: line_of(text, span.start), message }
}

fn parse_layers(v: &str) -> std::result::Result<LayerChoice, String> {
    if v.eq_ignore_ascii_case("auto") {
        return Ok(LayerChoice::Auto);
    }
    let (lo, hi) = v.split_once('-').unwrap_or((v, v));
    match (lo.trim().parse(), hi.trim().parse()) {
        (Ok(lo), Ok(hi)) => Ok(LayerChoice::Range(lo, hi)),
        _ => Err(format!("unlearn.layers: expected \"auto\" or a range like \"0-3\", found {v:?}")),
    }
}

impl RunConfig {
    /// Seeds every component from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.trace.rng_seed = seed;
        self.unlearn.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        ModelConfig { vocab_size: self.model.vocab_size.max(1), ..self.model.clone() }.validate()?;
        self.train.validate()?;
        self.trace.validate()?;
        self.unlearn.validate()?;
        if let LayerChoice::Range(lo, hi) = self.layers {
            if lo > hi || hi >= self.model.num_layers {
                return Err(Error::Contract(format!(
                    "unlearn.layers {lo}-{hi} outside 0-{}",
                    self.model.num_layers - 1
                )));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawFile = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| line_of(text, s.start));
            let key = text.lines().nth(line.wrapping_sub(1)).and_then(|l| l.split_once('=')).map(|(k, _)| k.trim());
            let message = match key {
                Some(k) if !k.is_empty() => format!("{k}: {}", e.message().trim()),
                _ => e.message().trim().to_string(),
            };
            Error::Config { line, message }
        })?;
        let mut c = RunConfig::default();
        set(&mut c.output_dir, raw.output_dir);

        let r = raw.corpus;
        set(&mut c.corpus.forget, r.forget);
        set(&mut c.corpus.retain, r.retain);
        set(&mut c.corpus.holdout, r.holdout);
        set(&mut c.corpus.utility, r.utility);
        set(&mut c.corpus.completions, r.completions);

        let r = raw.model;
        set(&mut c.model.num_layers, r.num_layers);
        set(&mut c.model.d_model, r.d_model);
        set(&mut c.model.num_heads, r.num_heads);
        set(&mut c.model.d_mlp, r.d_mlp);
        set(&mut c.model.max_seq_len, r.max_seq_len);

        let r = raw.train;
        set(&mut c.train.max_epochs, r.max_epochs);
        set(&mut c.train.batch_size, r.batch_size);
        set(&mut c.train.target_accuracy, r.target_accuracy);
        set(&mut c.train.check_every, r.check_every);
        set(&mut c.train.warmup_epochs, r.warmup_epochs);
        set(&mut c.train.min_lr_fraction, r.min_lr_fraction);
        if let Some(g) = r.grad_clip {
            c.train.grad_clip = (g > 0.0).then_some(g);
        }
        set_optimizer(&mut c.train.optimizer, r.learning_rate, r.beta1, r.beta2, r.epsilon, r.weight_decay);

        let r = raw.trace;
        set(&mut c.trace.noise_scale, r.noise_scale);
        set(&mut c.trace.num_noise_samples, r.num_noise_samples);
        set(&mut c.trace.max_facts, r.max_facts);
        set(&mut c.trace.critical_fraction, r.critical_fraction);

        let r = raw.unlearn;
        if let Some(m) = r.method {
            let span = m.span();
            c.unlearn.method = m
                .into_inner()
                .parse::<Method>()
                .map_err(|e| spanned_error(text, span, format!("unlearn.method: {e}")))?;
        }
        if let Some(l) = r.layers {
            let span = l.span();
            c.layers = parse_layers(l.get_ref()).map_err(|m| spanned_error(text, span, m))?;
        }
        if let Some(k) = r.kinds {
            let span = k.span();
            let mut kinds = Vec::new();
            for name in k.into_inner() {
                let kind: ModuleKind = name.parse().map_err(|_| {
                    spanned_error(text, span.clone(), format!("unlearn.kinds: unknown module kind {name:?}"))
                })?;
                if !kinds.contains(&kind) {
                    kinds.push(kind);
                }
            }
            c.unlearn.kinds = kinds;
        }
        set(&mut c.unlearn.epochs, r.epochs);
        set(&mut c.unlearn.batch_size, r.batch_size);
        if r.forget_floor.is_some() {
            c.unlearn.forget_floor = r.forget_floor;
        }
        let s = &mut c.unlearn.schedule;
        set(&mut s.a, r.alpha.a);
        set(&mut s.b, r.alpha.b);
        set(&mut s.c, r.alpha.c);
        set(&mut s.alpha_min, r.alpha.min);
        set(&mut s.alpha_max, r.alpha.max);
        set_optimizer(&mut c.unlearn.optimizer, r.learning_rate, r.beta1, r.beta2, r.epsilon, r.weight_decay);

        c.set_seed(raw.seed.unwrap_or(0));
        c.validate()?;
        Ok(c)
    }
}

/// Reads and parses a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "configuration file not found".into(),
        },
        _ => e.into(),
    })?;
    RunConfig::parse(&text)
}
