//! Unlearning: gradient ascent on the forget split restrained by a weighted
//! retain loss, optimized over a chosen subset of parameters, plus the
//! usual baselines.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split, Task};
use crate::error::{Error, Result};
use crate::model::{LabeledSequence, ModuleKind, ParameterSet, TransformerModel};
use crate::tensor::{AdamW, OptimizerConfig, Tape, Var};
use crate::train::teacher_forced_accuracy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    ConstrainedJoint,
    GradAscent,
    GradDiff,
    KlMin,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::ConstrainedJoint, Method::GradAscent, Method::GradDiff, Method::KlMin];

    pub fn name(self) -> &'static str {
        match self {
            Method::ConstrainedJoint => "CONSTRAINED_JOINT",
            Method::GradAscent => "GRAD_ASCENT",
            Method::GradDiff => "GRAD_DIFF",
            Method::KlMin => "KL_MIN",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Unlearn(format!("unknown method {s:?}")))
    }
}

/// Adaptive retain weight: `clamp(round(a * b^dL + c, 1), min, max)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        Self { a: 0.3, b: 6.0, c: 0.8, alpha_min: 1.2, alpha_max: 2.8 }
    }
}

impl AlphaSchedule {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.a, self.b, self.c, self.alpha_min, self.alpha_max].iter().all(|v| v.is_finite());
        if !finite || self.b <= 0.0 || self.alpha_min > self.alpha_max {
            return Err(Error::Unlearn(format!("invalid alpha schedule {self:?}")));
        }
        Ok(())
    }
}

/// Rounds half away from zero to one decimal place.
fn round_one_decimal(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Retain weight for `epoch` given the change in retain loss since the
/// baseline. Epoch 0 always uses the minimum.
pub fn compute_alpha(delta_l: f64, schedule: &AlphaSchedule, epoch: usize) -> f64 {
    if epoch == 0 {
        return schedule.alpha_min;
    }
    let gamma = schedule.a * schedule.b.powf(delta_l) + schedule.c;
    round_one_decimal(gamma).clamp(schedule.alpha_min, schedule.alpha_max)
}

/// Coefficients of the forget NLL, retain NLL and retain KL terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub forget: f64,
    pub retain: f64,
    pub kl: f64,
}

pub fn loss_weights(method: Method, alpha: f64) -> LossWeights {
    match method {
        Method::ConstrainedJoint => LossWeights { forget: -1.0, retain: alpha, kl: 0.0 },
        Method::GradAscent => LossWeights { forget: -1.0, retain: 0.0, kl: 0.0 },
        Method::GradDiff => LossWeights { forget: -1.0, retain: 1.0, kl: 0.0 },
        Method::KlMin => LossWeights { forget: -1.0, retain: 0.0, kl: 1.0 },
    }
}

/// `-forget_nll + alpha * retain_nll`.
pub fn joint_loss(forget_nll: f64, retain_nll: f64, alpha: f64) -> f64 {
    let w = loss_weights(Method::ConstrainedJoint, alpha);
    w.forget * forget_nll + w.retain * retain_nll
}

/// Objective of a baseline method. `retain_kl` is required for KL_MIN and
/// ignored otherwise.
pub fn baseline_loss(method: Method, forget_nll: f64, retain_nll: f64, retain_kl: Option<f64>) -> Result<f64> {
    if method == Method::ConstrainedJoint {
        return Err(Error::Unlearn("CONSTRAINED_JOINT is not a baseline; use joint_loss".into()));
    }
    let w = loss_weights(method, 1.0);
    let kl = match (method, retain_kl) {
        (Method::KlMin, Some(kl)) => kl,
        (Method::KlMin, None) => return Err(Error::Unlearn("KL_MIN needs a reference model".into())),
        _ => 0.0,
    };
    Ok(w.forget * forget_nll + w.retain * retain_nll + w.kl * kl)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub method: Method,
    /// Inclusive block range `[lo, hi]`.
    pub layer_range: (usize, usize),
    pub kinds: Vec<ModuleKind>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: AlphaSchedule,
    pub seed: u64,
    /// Stop after an epoch whose teacher-forced forget accuracy is at or
    /// below this value.
    pub forget_floor: Option<f64>,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            method: Method::ConstrainedJoint,
            layer_range: (0, 3),
            kinds: vec![ModuleKind::Mhsa, ModuleKind::Mlp],
            epochs: 8,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
            schedule: AlphaSchedule::default(),
            seed: 0,
            forget_floor: None,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Unlearn("batch_size must be positive".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::Unlearn("no module kinds selected".into()));
        }
        self.optimizer.validate()?;
        self.schedule.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean forget-split sequence NLL after the epoch.
    pub forget_loss: f64,
    /// Mean retain-split sequence NLL after the epoch.
    pub retain_loss: f64,
    /// `retain_loss` minus the epoch-0 retain loss.
    pub delta_l: f64,
    /// Retain weight applied during this epoch.
    pub alpha: f64,
    /// Teacher-forced exact reproduction rate on forget QA.
    pub forget_knowledge: f64,
    /// Teacher-forced exact reproduction rate on retain QA.
    pub retain_knowledge: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRun {
    pub stats: Vec<EpochStats>,
    pub trainable_scalars: usize,
    pub stopped_early: bool,
}

impl UnlearnRun {
    pub fn baseline_retain_loss(&self) -> f64 {
        self.stats[0].retain_loss
    }

    /// One JSON record per epoch.
    pub fn stats_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.stats {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

struct Splits {
    forget: Vec<LabeledSequence>,
    retain: Vec<LabeledSequence>,
    forget_qa: Vec<LabeledSequence>,
    retain_qa: Vec<LabeledSequence>,
}

fn refs(v: &[LabeledSequence]) -> Vec<&LabeledSequence> {
    v.iter().collect()
}

fn snapshot(model: &TransformerModel, s: &Splits, epoch: usize, alpha: f64, base: Option<f64>) -> Result<EpochStats> {
    let forget_loss = mean(&model.sequence_nlls(&refs(&s.forget))?);
    let retain_loss = mean(&model.sequence_nlls(&refs(&s.retain))?);
    Ok(EpochStats {
        epoch,
        forget_loss,
        retain_loss,
        delta_l: base.map_or(0.0, |b| retain_loss - b),
        alpha,
        forget_knowledge: teacher_forced_accuracy(model, &refs(&s.forget_qa))?,
        retain_knowledge: teacher_forced_accuracy(model, &refs(&s.retain_qa))?,
    })
}

/// Builds the method's differentiable objective on one forget batch and one
/// retain batch.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective<'t>(
    tape: &'t Tape,
    model: &TransformerModel,
    reference: Option<&TransformerModel>,
    trainable: &ParameterSet,
    method: Method,
    alpha: f64,
    forget: &[&LabeledSequence],
    retain: &[&LabeledSequence],
) -> Result<Var<'t>> {
    let w = loss_weights(method, alpha);
    let mut loss = model.mean_sequence_nll(tape, trainable, forget)?.scale(w.forget);
    if w.retain != 0.0 {
        loss = loss.add(model.mean_sequence_nll(tape, trainable, retain)?.scale(w.retain));
    }
    if w.kl != 0.0 {
        let reference = reference.ok_or_else(|| Error::Unlearn("KL_MIN needs a reference model".into()))?;
        let ref_lp = reference.output_log_probs(retain)?;
        let (logits, targets, _) = model.output_logits(tape, trainable, retain)?;
        let mask = vec![true; targets.len()];
        let kl = tape.kl_to_reference(logits, &ref_lp, &mask)?.scale(1.0 / retain.len() as f64);
        loss = loss.add(kl.scale(w.kl));
    }
    Ok(loss)
}

/// Runs `config.epochs` epochs of unlearning on `model`, updating only the
/// parameters in `config.layer_range` × `config.kinds`. Stats start with
/// an epoch-0 record measured before any update.
pub fn run_unlearning(model: &mut TransformerModel, corpus: &Corpus, config: &UnlearnConfig) -> Result<UnlearnRun> {
    config.validate()?;
    let s = Splits {
        forget: corpus.labeled_split(Split::Forget)?,
        retain: corpus.labeled_split(Split::Retain)?,
        forget_qa: corpus.examples(Split::Forget, Some(Task::Qa)).map(|e| corpus.labeled(e)).collect::<Result<_>>()?,
        retain_qa: corpus.examples(Split::Retain, Some(Task::Qa)).map(|e| corpus.labeled(e)).collect::<Result<_>>()?,
    };
    if s.forget.is_empty() || s.retain.is_empty() || s.forget_qa.is_empty() || s.retain_qa.is_empty() {
        return Err(Error::Unlearn("forget and retain splits must be nonempty".into()));
    }
    let trainable = model.select_parameters(config.layer_range, &config.kinds)?;
    let reference = (config.method == Method::KlMin).then(|| model.clone());
    let mut opt = AdamW::new(config.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let first = snapshot(model, &s, 0, compute_alpha(0.0, &config.schedule, 0), None)?;
    let base = first.retain_loss;
    log::info!("unlearn epoch 0: forget {:.4} retain {:.4}", first.forget_loss, first.retain_loss);
    let mut stats = vec![first];
    let mut stopped_early = false;

    let mut forget_order: Vec<usize> = (0..s.forget.len()).collect();
    let mut retain_order: Vec<usize> = (0..s.retain.len()).collect();
    for epoch in 1..=config.epochs {
        let alpha = compute_alpha(stats[epoch - 1].delta_l, &config.schedule, epoch);
        forget_order.shuffle(&mut rng);
        retain_order.shuffle(&mut rng);
        let mut retain_cursor = 0;
        for fidx in forget_order.chunks(config.batch_size) {
            let fb: Vec<&LabeledSequence> = fidx.iter().map(|&i| &s.forget[i]).collect();
            let rb: Vec<&LabeledSequence> = (0..fb.len())
                .map(|k| &s.retain[retain_order[(retain_cursor + k) % retain_order.len()]])
                .collect();
            retain_cursor += fb.len();
            let tape = Tape::new();
            let loss = batch_objective(&tape, model, reference.as_ref(), &trainable, config.method, alpha, &fb, &rb)?;
            let grads = tape.backward(loss)?;
            opt.step(model.params_mut(&trainable), &grads)?;
        }
        let st = snapshot(model, &s, epoch, alpha, Some(base))?;
        log::info!(
            "unlearn epoch {epoch}: alpha {alpha:.1} forget {:.4} retain {:.4} know f {:.3} r {:.3}",
            st.forget_loss,
            st.retain_loss,
            st.forget_knowledge,
            st.retain_knowledge
        );
        if !st.forget_loss.is_finite() || !st.retain_loss.is_finite() {
            return Err(Error::Unlearn(format!("losses diverged at epoch {epoch}")));
        }
        let floor_hit = config.forget_floor.is_some_and(|f| st.forget_knowledge <= f);
        stats.push(st);
        if floor_hit && epoch < config.epochs {
            stopped_early = true;
            break;
        }
    }
    Ok(UnlearnRun { stats, trainable_scalars: model.count_scalars(&trainable), stopped_early })
}
