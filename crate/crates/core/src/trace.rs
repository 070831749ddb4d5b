//! Causal tracing: corrupt the subject embeddings, restore single clean
//! hidden states, and measure how much each (position, level) site brings
//! back the probability of the first attribute token.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{annotate_spans, Corpus, Example, Span, Split, Task, TokenCategory};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::tensor::{argmax, softmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    /// Noise standard deviation in units of the embedding-table std.
    pub noise_scale: f64,
    pub num_noise_samples: usize,
    pub rng_seed: u64,
    /// Number of QA facts traced, split evenly between forget and retain.
    pub max_facts: usize,
    /// Relative threshold for [`identify_critical_layers`].
    pub critical_fraction: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self { noise_scale: 3.0, num_noise_samples: 8, rng_seed: 0, max_facts: 48, critical_fraction: 0.5 }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Trace(format!("noise_scale {} must be finite and nonnegative", self.noise_scale)));
        }
        if self.num_noise_samples == 0 || self.max_facts == 0 {
            return Err(Error::Trace("num_noise_samples and max_facts must be positive".into()));
        }
        if !(self.critical_fraction > 0.0 && self.critical_fraction <= 1.0) {
            return Err(Error::Trace(format!("critical_fraction {} outside (0, 1]", self.critical_fraction)));
        }
        Ok(())
    }
}

/// Adds Gaussian noise with std `noise_std` to the subject rows of level-0
/// states. Other rows are returned untouched.
pub fn corrupt_embeddings(clean: &Tensor, subject: Span, noise_std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if subject.is_empty() {
        return Err(Error::Trace("empty subject span".into()));
    }
    if subject.end > clean.rows() {
        return Err(Error::Trace(format!("subject span {subject:?} beyond {} positions", clean.rows())));
    }
    let normal = Normal::new(0.0, noise_std).map_err(|e| Error::Trace(format!("noise: {e}")))?;
    let mut out = clean.clone();
    for p in subject.range() {
        for v in out.row_mut(p) {
            *v += normal.sample(rng);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceResult {
    pub example_id: String,
    pub p_clean: f64,
    /// Mean over noise samples of the corrupted probability.
    pub p_corrupt: f64,
    /// `T × (L + 1)` mean restoration effect per (position, level).
    pub effect: Tensor,
    /// Noise samples under which the top-1 prediction was no longer the
    /// attribute token.
    pub flipped_samples: usize,
    pub samples: usize,
    pub categories: Vec<TokenCategory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TraceOutcome {
    Traced(TraceResult),
    Skipped { example_id: String, reason: String },
}

fn prob_of(logits: &[f64], token: usize) -> f64 {
    softmax(logits)[token]
}

/// Three-pass trace of one QA example. `rng` supplies the noise for all
/// samples of this fact.
pub fn trace_fact(
    model: &TransformerModel,
    corpus: &Corpus,
    example: &Example,
    config: &TraceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TraceOutcome> {
    config.validate()?;
    let (fact, categories) = annotate_spans(example, &corpus.tokenizer)?;
    let prompt = corpus.tokenizer.tokenize(&example.x)?;
    let target = match corpus.tokenizer.tokenize(&example.y)?.first() {
        Some(&t) => t as usize,
        None => return Err(Error::Trace(format!("{}: empty attribute", example.id))),
    };
    let levels = model.config().num_layers + 1;
    let t = prompt.len();

    let clean = model.forward(&prompt, true, &[])?.cache.expect("capture requested");
    let clean_logits = model.resume_last_logits(0, clean.level(0), &[])?;
    if argmax(&clean_logits) != target {
        return Ok(TraceOutcome::Skipped {
            example_id: example.id.clone(),
            reason: "clean prompt does not predict the attribute".into(),
        });
    }
    let p_clean = prob_of(&clean_logits, target);
    let noise_std = config.noise_scale * model.embedding_std();

    let mut effect = Tensor::zeros(vec![t, levels]);
    let mut p_corrupt_sum = 0.0;
    let mut flipped = 0;
    for _ in 0..config.num_noise_samples {
        let corrupted0 = corrupt_embeddings(clean.level(0), fact.spans.subject, noise_std, rng)?;
        let corrupted = model.resume_states(0, &corrupted0)?;
        let logits = model.resume_last_logits(0, &corrupted0, &[])?;
        let p_corrupt = prob_of(&logits, target);
        p_corrupt_sum += p_corrupt;
        if argmax(&logits) != target {
            flipped += 1;
        }
        for (level, states) in corrupted.iter().enumerate() {
            for pos in 0..t {
                let mut restored = states.clone();
                restored.row_mut(pos).copy_from_slice(clean.state(pos, level));
                let p = prob_of(&model.resume_last_logits(level, &restored, &[])?, target);
                effect.row_mut(pos)[level] += p - p_corrupt;
            }
        }
    }
    let n = config.num_noise_samples as f64;
    for v in effect.data_mut() {
        *v /= n;
    }
    Ok(TraceOutcome::Traced(TraceResult {
        example_id: example.id.clone(),
        p_clean,
        p_corrupt: p_corrupt_sum / n,
        effect,
        flipped_samples: flipped,
        samples: config.num_noise_samples,
        categories,
    }))
}

/// Mean effect per (token category, level). `None` marks a category that
/// no traced fact contains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceGrid {
    pub cells: Vec<Vec<Option<f64>>>,
}

impl TraceGrid {
    pub fn num_levels(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }

    pub fn get(&self, category: TokenCategory, level: usize) -> Option<f64> {
        self.cells[category.index()][level]
    }

    /// Largest subject-category effect at `level`, if any subject row is
    /// present.
    pub fn subject_max(&self, level: usize) -> Option<f64> {
        TokenCategory::ALL
            .iter()
            .filter(|c| c.is_subject())
            .filter_map(|&c| self.get(c, level))
            .reduce(f64::max)
    }

    /// Comma-separated table: header of level indices, one row per category,
    /// `NA` for absent cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("category");
        for l in 0..self.num_levels() {
            let _ = write!(s, ",{l}");
        }
        s.push('\n');
        for c in TokenCategory::ALL {
            s.push_str(c.label());
            for v in &self.cells[c.index()] {
                match v {
                    Some(x) => {
                        let _ = write!(s, ",{x}");
                    }
                    None => s.push_str(",NA"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Averages effects over positions of the same category within each fact,
/// then across facts. Facts are summed in id order, so the grid does not
/// depend on the order of `results`.
pub fn aggregate_grid(results: &[TraceResult]) -> Result<TraceGrid> {
    let mut results: Vec<&TraceResult> = results.iter().collect();
    results.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let first = results.first().ok_or_else(|| Error::Trace("no traced facts to aggregate".into()))?;
    let levels = first.effect.cols();
    let mut sums = vec![vec![0.0; levels]; TokenCategory::ALL.len()];
    let mut counts = vec![0usize; TokenCategory::ALL.len()];
    for r in &results {
        if r.effect.cols() != levels || r.effect.rows() != r.categories.len() {
            return Err(Error::Trace(format!("{}: effect shape {:?} inconsistent", r.example_id, r.effect.shape())));
        }
        for c in TokenCategory::ALL {
            let rows: Vec<usize> = (0..r.categories.len()).filter(|&p| r.categories[p] == c).collect();
            if rows.is_empty() {
                continue;
            }
            counts[c.index()] += 1;
            for (l, sum) in sums[c.index()].iter_mut().enumerate() {
                *sum += rows.iter().map(|&p| r.effect.row(p)[l]).sum::<f64>() / rows.len() as f64;
            }
        }
    }
    let cells = sums
        .into_iter()
        .zip(counts)
        .map(|(row, n)| row.into_iter().map(|v| (n > 0).then(|| v / n as f64)).collect())
        .collect();
    Ok(TraceGrid { cells })
}

/// Levels whose largest subject-category effect reaches `fraction` of the
/// grid-wide maximum. Empty when no subject effect is positive.
pub fn identify_critical_layers(grid: &TraceGrid, fraction: f64) -> BTreeSet<usize> {
    let per_level: Vec<Option<f64>> = (0..grid.num_levels()).map(|l| grid.subject_max(l)).collect();
    let global = per_level.iter().flatten().copied().reduce(f64::max);
    match global {
        Some(g) if g > 0.0 => per_level
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some_and(|v| v >= fraction * g))
            .map(|(l, _)| l)
            .collect(),
        _ => BTreeSet::new(),
    }
}

/// Transformer blocks to edit given critical levels: every block up to the
/// deepest critical level, capped at the last block.
pub fn critical_block_range(levels: &BTreeSet<usize>, num_layers: usize) -> Option<(usize, usize)> {
    levels.last().map(|&deepest| (0, deepest.min(num_layers - 1)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedFact {
    pub example_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub noise_scale: f64,
    pub embedding_std: f64,
    pub noise_std: f64,
    pub num_noise_samples: usize,
    pub rng_seed: u64,
    pub facts_requested: usize,
    pub facts_traced: usize,
    pub skipped: Vec<SkippedFact>,
    pub mean_p_clean: f64,
    pub mean_p_corrupt: f64,
    /// Fraction of (fact, noise sample) pairs whose top-1 prediction moved
    /// off the attribute.
    pub flip_rate: f64,
    pub critical_fraction: f64,
    pub critical_levels: BTreeSet<usize>,
    pub block_range: Option<(usize, usize)>,
    pub grid: TraceGrid,
    pub results: Vec<TraceResult>,
}

/// QA facts chosen for tracing: the first half of `max_facts` from FORGET
/// and the rest from RETAIN, in corpus order.
pub fn select_facts(corpus: &Corpus, max_facts: usize) -> Vec<&Example> {
    let forget = max_facts.div_ceil(2);
    let mut out: Vec<&Example> = corpus.examples(Split::Forget, Some(Task::Qa)).take(forget).collect();
    let rest = max_facts - out.len();
    out.extend(corpus.examples(Split::Retain, Some(Task::Qa)).take(rest));
    out
}

/// Traces the selected facts in parallel; each fact draws its noise from
/// its own stream so results do not depend on scheduling.
pub fn trace_corpus(model: &TransformerModel, corpus: &Corpus, config: &TraceConfig) -> Result<TraceReport> {
    config.validate()?;
    let facts = select_facts(corpus, config.max_facts);
    let outcomes: Vec<TraceOutcome> = facts
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
            rng.set_stream(i as u64);
            trace_fact(model, corpus, e, config, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            TraceOutcome::Traced(r) => results.push(r),
            TraceOutcome::Skipped { example_id, reason } => skipped.push(SkippedFact { example_id, reason }),
        }
    }
    if results.is_empty() {
        return Err(Error::Trace(format!("all {} facts were skipped; is the model trained?", facts.len())));
    }
    let grid = aggregate_grid(&results)?;
    let critical_levels = identify_critical_layers(&grid, config.critical_fraction);
    let n = results.len() as f64;
    let pairs: usize = results.iter().map(|r| r.samples).sum();
    let embedding_std = model.embedding_std();
    Ok(TraceReport {
        noise_scale: config.noise_scale,
        embedding_std,
        noise_std: config.noise_scale * embedding_std,
        num_noise_samples: config.num_noise_samples,
        rng_seed: config.rng_seed,
        facts_requested: facts.len(),
        facts_traced: results.len(),
        skipped,
        mean_p_clean: results.iter().map(|r| r.p_clean).sum::<f64>() / n,
        mean_p_corrupt: results.iter().map(|r| r.p_corrupt).sum::<f64>() / n,
        flip_rate: results.iter().map(|r| r.flipped_samples).sum::<usize>() as f64 / pairs as f64,
        critical_fraction: config.critical_fraction,
        block_range: critical_block_range(&critical_levels, model.config().num_layers),
        critical_levels,
        grid,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_from(rows: &[(TokenCategory, Vec<f64>)], levels: usize) -> TraceGrid {
        let mut cells = vec![vec![None; levels]; 7];
        for (c, v) in rows {
            cells[c.index()] = v.iter().map(|&x| Some(x)).collect();
        }
        TraceGrid { cells }
    }

    #[test]
    fn zero_noise_leaves_states_unchanged() {
        let clean = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = corrupt_embeddings(&clean, Span { start: 1, end: 2 }, 0.0, &mut rng).unwrap();
        assert_eq!(out, clean);
    }

    #[test]
    fn noise_touches_only_subject_rows() {
        let clean = Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = corrupt_embeddings(&clean, Span { start: 1, end: 3 }, 1.0, &mut rng).unwrap();
        assert_eq!(out.row(0), clean.row(0));
        assert_eq!(out.row(3), clean.row(3));
        assert_ne!(out.row(1), clean.row(1));
        assert!(corrupt_embeddings(&clean, Span { start: 2, end: 2 }, 1.0, &mut rng).is_err());
        assert!(corrupt_embeddings(&clean, Span { start: 2, end: 5 }, 1.0, &mut rng).is_err());
    }

    #[test]
    fn uniform_grid_selects_every_level() {
        let g = grid_from(&[(TokenCategory::SubjectLast, vec![0.3; 4])], 4);
        assert_eq!(identify_critical_layers(&g, 0.5), (0..4).collect());
    }

    #[test]
    fn point_mass_selects_its_level() {
        let g = grid_from(
            &[(TokenCategory::SubjectLast, vec![0.0, 0.0, 0.4, 0.0]), (TokenCategory::RelationLast, vec![0.9; 4])],
            4,
        );
        assert_eq!(identify_critical_layers(&g, 0.5), BTreeSet::from([2]));
        let empty = grid_from(&[(TokenCategory::Interrogative, vec![0.2; 4])], 4);
        assert!(identify_critical_layers(&empty, 0.5).is_empty());
    }

    #[test]
    fn block_range_caps_at_last_block() {
        assert_eq!(critical_block_range(&BTreeSet::from([1, 3]), 8), Some((0, 3)));
        assert_eq!(critical_block_range(&BTreeSet::from([8]), 8), Some((0, 7)));
        assert_eq!(critical_block_range(&BTreeSet::new(), 8), None);
    }

    fn result(id: &str, cats: Vec<TokenCategory>, effect: Vec<f64>, levels: usize) -> TraceResult {
        TraceResult {
            example_id: id.into(),
            p_clean: 0.9,
            p_corrupt: 0.1,
            effect: Tensor::new(vec![cats.len(), levels], effect).unwrap(),
            flipped_samples: 1,
            samples: 1,
            categories: cats,
        }
    }

    #[test]
    fn single_token_spans_leave_other_rows_absent() {
        use TokenCategory::*;
        let r = result("a", vec![Interrogative, SubjectLast, RelationLast], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 2);
        let g = aggregate_grid(&[r]).unwrap();
        assert_eq!(g.get(Interrogative, 1), Some(0.2));
        assert_eq!(g.get(SubjectLast, 0), Some(0.3));
        assert_eq!(g.get(RelationLast, 1), Some(0.6));
        for c in [SubjectFirst, SubjectMiddle, RelationFirst, RelationMiddle] {
            assert_eq!(g.get(c, 0), None);
        }
        assert!(g.to_csv().contains("s_f,NA,NA\n"));
        assert!(g.to_csv().starts_with("category,0,1\n"));
    }

    #[test]
    fn categories_average_within_then_across_facts() {
        use TokenCategory::*;
        let a = result("a", vec![Interrogative, SubjectFirst, SubjectMiddle, SubjectMiddle, SubjectLast], vec![0.0, 0.0, 0.2, 0.4, 1.0], 1);
        let b = result("b", vec![Interrogative, SubjectFirst, SubjectMiddle, SubjectLast], vec![0.0, 0.0, 0.8, 0.0], 1);
        let g = aggregate_grid(&[a.clone(), b.clone()]).unwrap();
        // fact a: s_m = mean(0.2, 0.4) = 0.3; fact b: s_m = 0.8
        assert!((g.get(SubjectMiddle, 0).unwrap() - 0.55).abs() < 1e-15);
        assert_eq!(aggregate_grid(&[b, a]).unwrap(), g);
        assert!(aggregate_grid(&[]).is_err());
    }
}
