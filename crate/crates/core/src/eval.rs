//! Unlearning metrics: regurgitation (ROUGE-L) and knowledge (exact match)
//! per split, their harmonic-mean aggregate, a loss-threshold membership
//! inference score, a utility probe, and the final score.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Example, Split, Task};
use crate::error::{Error, Result};
use crate::model::{LabeledSequence, TransformerModel};

/// Extra decoding budget beyond the reference length.
const GENERATION_SLACK: usize = 8;

/// Longest common subsequence length of two token slices.
fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 over whitespace-separated tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    rouge_l_tokens(&c, &r)
}

pub fn rouge_l_tokens<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// 1 when the strings agree after trimming surrounding whitespace.
pub fn exact_match(candidate: &str, reference: &str) -> f64 {
    if candidate.trim() == reference.trim() {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub regurgitation: f64,
    pub knowledge: f64,
}

/// Harmonic mean of `1 - forget` and `retain` scores; 0 if any term is 0.
pub fn task_aggregate(forget: &SplitScores, retain: &SplitScores) -> f64 {
    let parts = [1.0 - forget.regurgitation, 1.0 - forget.knowledge, retain.regurgitation, retain.knowledge];
    if parts.iter().any(|&p| p <= 0.0) {
        return 0.0;
    }
    parts.len() as f64 / parts.iter().map(|p| 1.0 / p).sum::<f64>()
}

/// `1 - accuracy` of the best loss-threshold attacker, where accuracy is
/// balanced over members and non-members and a loss below the threshold
/// means "member".
pub fn mia_score(member_losses: &[f64], nonmember_losses: &[f64]) -> Result<f64> {
    if member_losses.is_empty() || nonmember_losses.is_empty() {
        return Err(Error::Eval("membership inference needs both member and non-member losses".into()));
    }
    let mut all: Vec<(f64, bool)> = member_losses
        .iter()
        .map(|&l| (l, true))
        .chain(nonmember_losses.iter().map(|&l| (l, false)))
        .collect();
    if all.iter().any(|(l, _)| l.is_nan()) {
        return Err(Error::Eval("NaN loss in membership inference".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (m, n) = (member_losses.len() as f64, nonmember_losses.len() as f64);
    let mut best: f64 = 0.5;
    let (mut members_below, mut nonmembers_below) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                members_below += 1;
            } else {
                nonmembers_below += 1;
            }
            i += 1;
        }
        // threshold just above v
        let tpr = members_below as f64 / m;
        let tnr = 1.0 - nonmembers_below as f64 / n;
        best = best.max(0.5 * (tpr + tnr));
    }
    Ok(1.0 - best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub split: Split,
    pub task: Task,
    pub candidate: String,
    pub reference: String,
    pub score: f64,
}

/// Greedy continuation of `example.x`, detokenized.
pub fn generate_answer(model: &TransformerModel, corpus: &Corpus, example: &Example) -> Result<String> {
    let prompt = corpus.tokenizer.tokenize(&example.x)?;
    let reference = corpus.tokenizer.tokenize(&example.y)?;
    let out = model.greedy_generate_guided(&prompt, reference.len() + GENERATION_SLACK, &reference)?;
    corpus.tokenizer.detokenize(&out[prompt.len()..])
}

/// Scores every example of `split` with the task's metric.
pub fn score_examples(model: &TransformerModel, corpus: &Corpus, split: Split) -> Result<Vec<ExampleRecord>> {
    let examples: Vec<&Example> = corpus.examples(split, None).collect();
    examples
        .par_iter()
        .map(|e| {
            let candidate = generate_answer(model, corpus, e)?;
            let score = match e.task {
                Task::Qa => exact_match(&candidate, &e.y),
                Task::Completion => rouge_l(&candidate, &e.y),
            };
            Ok(ExampleRecord {
                id: e.id.clone(),
                split,
                task: e.task,
                candidate,
                reference: e.y.clone(),
                score,
            })
        })
        .collect()
}

fn mean_score(records: &[ExampleRecord], task: Task, split: Split) -> Result<f64> {
    let scores: Vec<f64> = records.iter().filter(|r| r.task == task && r.split == split).map(|r| r.score).collect();
    if scores.is_empty() {
        return Err(Error::Eval(format!("{split} split has no {task:?} examples")));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn split_scores(records: &[ExampleRecord], split: Split) -> Result<SplitScores> {
    Ok(SplitScores {
        regurgitation: mean_score(records, Task::Completion, split)?,
        knowledge: mean_score(records, Task::Qa, split)?,
    })
}

/// Mean exact match over the utility split.
pub fn utility_score(model: &TransformerModel, corpus: &Corpus) -> Result<f64> {
    let records = score_examples(model, corpus, Split::Utility)?;
    mean_score(&records, Task::Qa, Split::Utility)
}

fn split_losses(model: &TransformerModel, corpus: &Corpus, split: Split) -> Result<Vec<f64>> {
    let seqs: Vec<LabeledSequence> = corpus.labeled_split(split)?;
    if seqs.is_empty() {
        return Err(Error::Eval(format!("{split} split is empty")));
    }
    model.sequence_nlls(&seqs.iter().collect::<Vec<_>>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub forget: SplitScores,
    pub retain: SplitScores,
    pub task_aggregate: f64,
    pub mia_score: f64,
    pub utility: f64,
    pub final_score: f64,
    /// Utility relative to a reference model's utility, when one is given.
    pub utility_retention: Option<f64>,
    pub forget_mean_loss: f64,
    pub retain_mean_loss: f64,
    pub holdout_mean_loss: f64,
    pub member_losses: Vec<f64>,
    pub nonmember_losses: Vec<f64>,
    pub examples: Vec<ExampleRecord>,
}

pub fn final_score(task_aggregate: f64, mia_score: f64, utility: f64) -> f64 {
    (task_aggregate + mia_score + utility) / 3.0
}

/// Full metric stack. Members are FORGET sequences and non-members are
/// HOLDOUT sequences. `reference_utility` is the utility of the model
/// before unlearning, used for the retention ratio.
pub fn evaluate(model: &TransformerModel, corpus: &Corpus, reference_utility: Option<f64>) -> Result<EvalReport> {
    for split in Split::ALL {
        if corpus.examples(split, None).next().is_none() {
            return Err(Error::Eval(format!("corpus lacks the {split} split")));
        }
    }
    let mut examples = Vec::new();
    for split in [Split::Forget, Split::Retain, Split::Utility] {
        examples.extend(score_examples(model, corpus, split)?);
    }
    let forget = split_scores(&examples, Split::Forget)?;
    let retain = split_scores(&examples, Split::Retain)?;
    let utility = mean_score(&examples, Task::Qa, Split::Utility)?;
    let member_losses = split_losses(model, corpus, Split::Forget)?;
    let nonmember_losses = split_losses(model, corpus, Split::Holdout)?;
    let retain_losses = split_losses(model, corpus, Split::Retain)?;
    let mia = mia_score(&member_losses, &nonmember_losses)?;
    let ta = task_aggregate(&forget, &retain);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EvalReport {
        forget,
        retain,
        task_aggregate: ta,
        mia_score: mia,
        utility,
        final_score: final_score(ta, mia, utility),
        utility_retention: reference_utility.map(|r| if r > 0.0 { utility / r } else { 0.0 }),
        forget_mean_loss: mean(&member_losses),
        retain_mean_loss: mean(&retain_losses),
        holdout_mean_loss: mean(&nonmember_losses),
        member_losses,
        nonmember_losses,
        examples,
    })
}
