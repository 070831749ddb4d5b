//! The pipeline commands and their on-disk artifacts. Every file is written
//! below the configured output directory:
//!
//! ```text
//! corpus/corpus.jsonl, corpus/vocab.txt
//! model/trained.ulfg, model/train_log.jsonl
//! trace/grid.csv, trace/report.json
//! unlearn/unlearned.ulfg, unlearn/stats.jsonl, unlearn/alpha_curve.csv
//! eval/report.json
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::{LayerChoice, RunConfig};
use crate::corpus::{generate_corpus, Corpus};
use crate::error::{Error, Result};
use crate::eval::{evaluate, utility_score};
use crate::model::{ModelConfig, TransformerModel};
use crate::trace::{trace_corpus, TraceReport};
use crate::train::{train_memorization, training_sequences};
use crate::unlearn::{compute_alpha, run_unlearning, AlphaSchedule};

/// ΔL range covered by the exported α curve.
pub const ALPHA_CURVE_RANGE: (f64, f64) = (-0.5, 2.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Trace,
    Unlearn,
    Evaluate,
    Pipeline,
}

impl Command {
    pub const ALL: [Command; 6] =
        [Self::GenData, Self::Train, Self::Trace, Self::Unlearn, Self::Evaluate, Self::Pipeline];

    pub fn name(self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::Train => "train",
            Self::Trace => "trace",
            Self::Unlearn => "unlearn",
            Self::Evaluate => "evaluate",
            Self::Pipeline => "pipeline",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown command {s:?}")))
    }
}

/// Artifact paths under one output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn trained_model(&self) -> PathBuf {
        self.root.join("model/trained.ulfg")
    }
    pub fn train_log(&self) -> PathBuf {
        self.root.join("model/train_log.jsonl")
    }
    pub fn trace_grid(&self) -> PathBuf {
        self.root.join("trace/grid.csv")
    }
    pub fn trace_report(&self) -> PathBuf {
        self.root.join("trace/report.json")
    }
    pub fn unlearned_model(&self) -> PathBuf {
        self.root.join("unlearn/unlearned.ulfg")
    }
    pub fn unlearn_stats(&self) -> PathBuf {
        self.root.join("unlearn/stats.jsonl")
    }
    pub fn alpha_curve(&self) -> PathBuf {
        self.root.join("unlearn/alpha_curve.csv")
    }
    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval/report.json")
    }
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, body)?;
    Ok(())
}

fn save_model(model: &TransformerModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    model.save(path)
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { path: path.to_path_buf(), hint: hint.into() })
    }
}

fn load_model(path: &Path, hint: &str) -> Result<TransformerModel> {
    require(path, hint)?;
    TransformerModel::load(path)
}

/// Two-column `delta_l,alpha` table over `[lo, hi]` at step 0.01, using the
/// epoch ≥ 1 rule.
pub fn emit_alpha_curve(schedule: &AlphaSchedule, lo: f64, hi: f64) -> Result<String> {
    if !lo.is_finite() || !hi.is_finite() || lo > hi {
        return Err(Error::Contract(format!("invalid alpha curve range [{lo}, {hi}]")));
    }
    let (first, last) = ((lo * 100.0).round() as i64, (hi * 100.0).round() as i64);
    let mut out = String::from("delta_l,alpha\n");
    for k in first..=last {
        let dl = k as f64 / 100.0;
        out.push_str(&format!("{dl:.2},{:.1}\n", compute_alpha(dl, schedule, 1)));
    }
    Ok(out)
}

pub fn gen_data(cfg: &RunConfig) -> Result<Corpus> {
    let corpus = generate_corpus(cfg.seed, &cfg.corpus)?;
    corpus.save(&Layout::new(&cfg.output_dir).corpus_dir())?;
    log::info!("wrote {} examples, vocabulary {}", corpus.examples.len(), corpus.tokenizer.vocab_size());
    Ok(corpus)
}

pub fn train(cfg: &RunConfig) -> Result<TransformerModel> {
    let layout = Layout::new(&cfg.output_dir);
    let corpus = Corpus::load(&layout.corpus_dir())?;
    let mut model = TransformerModel::new(ModelConfig { vocab_size: corpus.tokenizer.vocab_size(), ..cfg.model.clone() })?;
    let history = train_memorization(&mut model, &training_sequences(&corpus)?, &cfg.train)?;
    let mut log = String::new();
    for e in &history {
        log.push_str(&serde_json::to_string(e)?);
        log.push('\n');
    }
    write(&layout.train_log(), log)?;
    save_model(&model, &layout.trained_model())?;
    Ok(model)
}

pub fn trace(cfg: &RunConfig) -> Result<TraceReport> {
    let layout = Layout::new(&cfg.output_dir);
    let corpus = Corpus::load(&layout.corpus_dir())?;
    let model = load_model(&layout.trained_model(), "run `train` first")?;
    let report = trace_corpus(&model, &corpus, &cfg.trace)?;
    write(&layout.trace_grid(), report.grid.to_csv())?;
    write(&layout.trace_report(), serde_json::to_string_pretty(&report)?)?;
    log::info!("critical levels {:?}, block range {:?}", report.critical_levels, report.block_range);
    Ok(report)
}

/// Block range for unlearning: the configured one, or the traced one.
pub fn resolve_layers(cfg: &RunConfig) -> Result<(usize, usize)> {
    match cfg.layers {
        LayerChoice::Range(lo, hi) => Ok((lo, hi)),
        LayerChoice::Auto => {
            let path = Layout::new(&cfg.output_dir).trace_report();
            require(&path, "run `trace` first or set unlearn.layers")?;
            let report: TraceReport = serde_json::from_str(&fs::read_to_string(&path)?)?;
            report.block_range.ok_or_else(|| {
                Error::Trace("tracing found no critical layers; set unlearn.layers explicitly".into())
            })
        }
    }
}

pub fn unlearn(cfg: &RunConfig) -> Result<TransformerModel> {
    let layout = Layout::new(&cfg.output_dir);
    let corpus = Corpus::load(&layout.corpus_dir())?;
    let mut model = load_model(&layout.trained_model(), "run `train` first")?;
    let mut ucfg = cfg.unlearn.clone();
    ucfg.layer_range = resolve_layers(cfg)?;
    log::info!("unlearning blocks {:?} with {}", ucfg.layer_range, ucfg.method);
    let run = run_unlearning(&mut model, &corpus, &ucfg)?;
    write(&layout.unlearn_stats(), run.stats_jsonl()?)?;
    let (lo, hi) = ALPHA_CURVE_RANGE;
    write(&layout.alpha_curve(), emit_alpha_curve(&ucfg.schedule, lo, hi)?)?;
    save_model(&model, &layout.unlearned_model())?;
    Ok(model)
}

pub fn evaluate_unlearned(cfg: &RunConfig) -> Result<crate::eval::EvalReport> {
    let layout = Layout::new(&cfg.output_dir);
    let corpus = Corpus::load(&layout.corpus_dir())?;
    let trained = load_model(&layout.trained_model(), "run `train` first")?;
    let model = load_model(&layout.unlearned_model(), "run `unlearn` first")?;
    let reference = utility_score(&trained, &corpus)?;
    let report = evaluate(&model, &corpus, Some(reference))?;
    write(&layout.eval_report(), serde_json::to_string_pretty(&report)?)?;
    log::info!(
        "final score {:.3} (task {:.3}, mia {:.3}, utility {:.3})",
        report.final_score,
        report.task_aggregate,
        report.mia_score,
        report.utility
    );
    Ok(report)
}

pub fn run_command(command: Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::GenData => gen_data(cfg).map(drop),
        Command::Train => train(cfg).map(drop),
        Command::Trace => trace(cfg).map(drop),
        Command::Unlearn => unlearn(cfg).map(drop),
        Command::Evaluate => evaluate_unlearned(cfg).map(drop),
        Command::Pipeline => {
            for c in &Command::ALL[..5] {
                log::info!("== {c}");
                run_command(*c, cfg)?;
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_curve_rows() {
        let csv = emit_alpha_curve(&AlphaSchedule::default(), -0.5, 2.0).unwrap();
        let rows: Vec<(f64, f64)> = csv
            .lines()
            .skip(1)
            .map(|l| {
                let (a, b) = l.split_once(',').unwrap();
                (a.parse().unwrap(), b.parse().unwrap())
            })
            .collect();
        assert_eq!(rows.len(), 251);
        assert!(rows.contains(&(0.0, 1.2)));
        assert!(rows.contains(&(1.2, 2.8)));
        assert!(rows.windows(2).all(|w| w[1].1 >= w[0].1));
        assert!(emit_alpha_curve(&AlphaSchedule::default(), 1.0, 0.0).is_err());
        assert!(emit_alpha_curve(&AlphaSchedule::default(), f64::NAN, 0.0).is_err());
    }

    #[test]
    fn command_names_roundtrip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!("plot".parse::<Command>().is_err());
    }

    #[test]
    fn trace_without_checkpoint_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            output_dir: dir.path().to_path_buf(),
            corpus: crate::corpus::SplitCounts { forget: 4, retain: 4, holdout: 2, utility: 2, completions: 1 },
            ..RunConfig::default()
        };
        gen_data(&cfg).unwrap();
        let err = run_command(Command::Trace, &cfg).unwrap_err();
        assert!(err.to_string().contains("trained.ulfg"), "{err}");
        assert!(matches!(run_command(Command::Evaluate, &cfg), Err(Error::MissingArtifact { .. })));
    }
}
