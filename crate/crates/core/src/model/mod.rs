//! Small pre-norm decoder-only transformer.
//!
//! Every parameter tensor belongs to exactly one [`GroupId`], a
//! `(layer, kind)` pair, so training code can freeze or select whole
//! module families. The residual stream can be captured at every level
//! (level 0 is token + position embedding, level `l ≥ 1` is the output of
//! block `l - 1`) and overwritten position by position with [`Patch`]es.

mod checkpoint;
mod generate;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax, ParamKey, Segment, Tape, Tensor, Var};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Token id reserved for end-of-sequence.
pub const EOS_TOKEN: u32 = 0;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const PARAMS_PER_BLOCK: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { num_layers: 8, d_model: 128, num_heads: 4, d_mlp: 512, vocab_size: 0, max_seq_len: 64, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Model(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Model(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModuleKind {
    Mhsa,
    Mlp,
    Embed,
    Norm,
    LmHead,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 5] = [Self::Mhsa, Self::Mlp, Self::Embed, Self::Norm, Self::LmHead];

    pub fn code(self) -> u8 {
        match self {
            Self::Mhsa => 0,
            Self::Mlp => 1,
            Self::Embed => 2,
            Self::Norm => 3,
            Self::LmHead => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Mhsa => "MHSA",
            Self::Mlp => "MLP",
            Self::Embed => "EMBED",
            Self::Norm => "NORM",
            Self::LmHead => "LM_HEAD",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MHSA" | "ATTN" | "ATTENTION" => Ok(Self::Mhsa),
            "MLP" => Ok(Self::Mlp),
            "EMBED" => Ok(Self::Embed),
            "NORM" => Ok(Self::Norm),
            "LM_HEAD" => Ok(Self::LmHead),
            other => Err(Error::Model(format!("unknown module kind {other:?}"))),
        }
    }
}

/// `(layer, kind)` address of a parameter group; `layer` is `None` for the
/// embedding tables, the final norm and the output head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupId {
    pub layer: Option<usize>,
    pub kind: ModuleKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub group: GroupId,
    pub name: &'static str,
    pub shape: Vec<usize>,
}

/// A set of trainable parameters, by key.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParameterSet(BTreeSet<ParamKey>);

impl ParameterSet {
    pub fn contains(&self, key: ParamKey) -> bool {
        self.0.contains(&key)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.0.iter().copied()
    }

    pub fn is_disjoint(&self, other: &ParameterSet) -> bool {
        self.0.is_disjoint(&other.0)
    }

    pub fn union(&self, other: &ParameterSet) -> ParameterSet {
        ParameterSet(self.0.union(&other.0).copied().collect())
    }
}

impl FromIterator<ParamKey> for ParameterSet {
    fn from_iter<I: IntoIterator<Item = ParamKey>>(iter: I) -> Self {
        ParameterSet(iter.into_iter().collect())
    }
}

/// Replacement residual-stream vector at one `(position, level)` site.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub position: usize,
    pub layer: usize,
    pub vector: Vec<f64>,
}

/// Residual-stream states for levels `0..=L` plus output probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStateCache {
    levels: Vec<Tensor>,
    probs: Tensor,
}

impl HiddenStateCache {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn seq_len(&self) -> usize {
        self.levels[0].rows()
    }

    pub fn level(&self, layer: usize) -> &Tensor {
        &self.levels[layer]
    }

    pub fn state(&self, position: usize, layer: usize) -> &[f64] {
        self.levels[layer].row(position)
    }

    /// Output distribution per position, `T × V`.
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub cache: Option<HiddenStateCache>,
}

/// A prompt/continuation pair packed as one token sequence; positions
/// `prompt_len - 1 .. len - 1` predict the continuation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSequence {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

impl LabeledSequence {
    pub fn new(prompt: &[u32], output: &[u32]) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::Model("empty prompt".into()));
        }
        if output.is_empty() {
            return Err(Error::Model("empty output sequence".into()));
        }
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(output);
        Ok(Self { tokens, prompt_len: prompt.len() })
    }

    pub fn output_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    /// Per-position next-token targets and loss mask.
    pub fn targets_and_mask(&self) -> (Vec<usize>, Vec<bool>) {
        let t = self.tokens.len();
        let mut targets = vec![0; t];
        let mut mask = vec![false; t];
        for p in self.prompt_len - 1..t - 1 {
            targets[p] = self.tokens[p + 1] as usize;
            mask[p] = true;
        }
        (targets, mask)
    }
}

#[derive(Clone)]
struct Parameter {
    info: ParamInfo,
    value: Arc<Tensor>,
}

/// Decoder-only language model with addressable parameter groups.
#[derive(Clone)]
pub struct TransformerModel {
    config: ModelConfig,
    params: Vec<Parameter>,
}

impl fmt::Debug for TransformerModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransformerModel")
            .field("config", &self.config)
            .field("num_parameters", &self.num_scalars())
            .finish()
    }
}

/// Parameter layout in the fixed order used everywhere, including
/// checkpoints: token and position embeddings; per block the attention
/// norm, `wq bq wk bk wv bv wo bo`, the MLP norm, `w_in b_in w_out b_out`;
/// then the final norm and the output head.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<ParamInfo> {
    let (d, f, v) = (cfg.d_model, cfg.d_mlp, cfg.vocab_size);
    let info = |layer, kind, name, shape: Vec<usize>| ParamInfo { group: GroupId { layer, kind }, name, shape };
    let mut out = vec![
        info(None, ModuleKind::Embed, "token", vec![v, d]),
        info(None, ModuleKind::Embed, "position", vec![cfg.max_seq_len, d]),
    ];
    for l in 0..cfg.num_layers {
        let l = Some(l);
        out.extend([
            info(l, ModuleKind::Norm, "attn_norm.gamma", vec![d]),
            info(l, ModuleKind::Norm, "attn_norm.beta", vec![d]),
            info(l, ModuleKind::Mhsa, "wq", vec![d, d]),
            info(l, ModuleKind::Mhsa, "bq", vec![d]),
            info(l, ModuleKind::Mhsa, "wk", vec![d, d]),
            info(l, ModuleKind::Mhsa, "bk", vec![d]),
            info(l, ModuleKind::Mhsa, "wv", vec![d, d]),
            info(l, ModuleKind::Mhsa, "bv", vec![d]),
            info(l, ModuleKind::Mhsa, "wo", vec![d, d]),
            info(l, ModuleKind::Mhsa, "bo", vec![d]),
            info(l, ModuleKind::Norm, "mlp_norm.gamma", vec![d]),
            info(l, ModuleKind::Norm, "mlp_norm.beta", vec![d]),
            info(l, ModuleKind::Mlp, "w_in", vec![d, f]),
            info(l, ModuleKind::Mlp, "b_in", vec![f]),
            info(l, ModuleKind::Mlp, "w_out", vec![f, d]),
            info(l, ModuleKind::Mlp, "b_out", vec![d]),
        ]);
    }
    out.extend([
        info(None, ModuleKind::Norm, "final_norm.gamma", vec![d]),
        info(None, ModuleKind::Norm, "final_norm.beta", vec![d]),
        info(None, ModuleKind::LmHead, "weight", vec![d, v]),
        info(None, ModuleKind::LmHead, "bias", vec![v]),
    ]);
    out
}

/// Tape handles for every parameter, registered once per tape.
struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    fn block(&self, layer: usize, slot: usize) -> Var<'t> {
        self.vars[2 + layer * PARAMS_PER_BLOCK + slot]
    }
}

impl TransformerModel {
    /// Freshly initialized model: normal(0, 0.02) weights, unit norm gains,
    /// zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = parameter_layout(&config)
            .into_iter()
            .map(|info| {
                let n: usize = info.shape.iter().product();
                let data = if info.name.ends_with("gamma") {
                    vec![1.0; n]
                } else if info.shape.len() == 2 {
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                } else {
                    vec![0.0; n]
                };
                let value = Arc::new(Tensor::new(info.shape.clone(), data).expect("layout shape"));
                Parameter { info, value }
            })
            .collect();
        Ok(Self { config, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != tensors.len() {
            return Err(Error::Model(format!("expected {} tensors, got {}", layout.len(), tensors.len())));
        }
        let params = layout
            .into_iter()
            .zip(tensors)
            .map(|(info, t)| {
                if t.shape() != info.shape.as_slice() {
                    return Err(Error::Shape(format!("{} expects {:?}, got {:?}", info.name, info.shape, t.shape())));
                }
                Ok(Parameter { info, value: Arc::new(t) })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_info(&self, key: ParamKey) -> &ParamInfo {
        &self.params[key.0].info
    }

    pub fn param(&self, key: ParamKey) -> &Tensor {
        &self.params[key.0].value
    }

    pub fn param_mut(&mut self, key: ParamKey) -> &mut Tensor {
        Arc::make_mut(&mut self.params[key.0].value)
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> {
        (0..self.params.len()).map(ParamKey)
    }

    pub fn all_parameters(&self) -> ParameterSet {
        self.keys().collect()
    }

    /// Scalar count across a parameter set.
    pub fn count_scalars(&self, set: &ParameterSet) -> usize {
        set.iter().map(|k| self.param(k).len()).sum()
    }

    /// Mutable access to the tensors of `set`, in key order.
    pub fn params_mut<'a>(&'a mut self, set: &ParameterSet) -> Vec<(ParamKey, &'a mut Tensor)> {
        self.params
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| set.contains(ParamKey(*i)))
            .map(|(i, p)| (ParamKey(i), Arc::make_mut(&mut p.value)))
            .collect()
    }

    /// Parameters whose group lies in `layers` (inclusive) with a kind in
    /// `kinds`.
    pub fn select_parameters(&self, layers: (usize, usize), kinds: &[ModuleKind]) -> Result<ParameterSet> {
        let (lo, hi) = layers;
        if lo > hi || hi >= self.config.num_layers {
            return Err(Error::Model(format!(
                "layer range {lo}-{hi} outside 0-{}",
                self.config.num_layers - 1
            )));
        }
        if kinds.is_empty() {
            return Err(Error::Model("no module kinds selected".into()));
        }
        let set: ParameterSet = self
            .keys()
            .filter(|&k| {
                let g = self.param_info(k).group;
                kinds.contains(&g.kind) && g.layer.is_some_and(|l| (lo..=hi).contains(&l))
            })
            .collect();
        if set.is_empty() {
            return Err(Error::Model(format!("selection {lo}-{hi} {kinds:?} matches no parameters")));
        }
        Ok(set)
    }

    /// Standard deviation of all token-embedding entries.
    pub fn embedding_std(&self) -> f64 {
        let table = self.param(ParamKey(0)).data();
        let n = table.len() as f64;
        let mean = table.iter().sum::<f64>() / n;
        (table.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    }

    fn bind<'t>(&self, tape: &'t Tape, trainable: &ParameterSet) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if trainable.contains(ParamKey(i)) {
                    tape.param(ParamKey(i), Arc::clone(&p.value))
                } else {
                    tape.frozen(Arc::clone(&p.value))
                }
            })
            .collect();
        Bound { vars }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Model("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Model(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Model(format!("token {t} outside vocabulary {}", self.config.vocab_size)));
        }
        Ok(())
    }

    fn check_patches(&self, t: usize, patches: &[Patch], min_level: usize) -> Result<()> {
        for p in patches {
            if p.position >= t || p.layer > self.config.num_layers || p.layer < min_level {
                return Err(Error::Model(format!(
                    "patch at position {} level {} outside {t} positions, levels {min_level}..={}",
                    p.position, p.layer, self.config.num_layers
                )));
            }
            if p.vector.len() != self.config.d_model {
                return Err(Error::Model(format!("patch width {} != d_model {}", p.vector.len(), self.config.d_model)));
            }
        }
        Ok(())
    }

    fn embed<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, ids: &[usize], positions: &[usize]) -> Var<'t> {
        let tok = tape.embedding(bound.vars[0], ids);
        let pos = tape.embedding(bound.vars[1], positions);
        tok.add(pos)
    }

    fn block<'t>(&self, tape: &'t Tape, b: &Bound<'t>, layer: usize, x: Var<'t>, segments: &[Segment]) -> Var<'t> {
        let p = |slot| b.block(layer, slot);
        let h = x.layer_norm(p(0), p(1), LN_EPS);
        let q = h.matmul(p(2)).add_row(p(3));
        let k = h.matmul(p(4)).add_row(p(5));
        let v = h.matmul(p(6)).add_row(p(7));
        let attn = tape.causal_attention(q, k, v, self.config.num_heads, segments);
        let x = x.add(attn.matmul(p(8)).add_row(p(9)));
        let h = x.layer_norm(p(10), p(11), LN_EPS);
        let m = h.matmul(p(12)).add_row(p(13)).gelu().matmul(p(14)).add_row(p(15));
        x.add(m)
    }

    fn head<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let n = b.vars.len();
        x.layer_norm(b.vars[n - 4], b.vars[n - 3], LN_EPS).matmul(b.vars[n - 2]).add_row(b.vars[n - 1])
    }

    /// Runs blocks `start..L` on residual states at level `start`, applying
    /// patches as each level is produced. Returns the final residual.
    #[allow(clippy::too_many_arguments)]
    fn run_blocks<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        start: usize,
        mut x: Var<'t>,
        segments: &[Segment],
        patches: &[Patch],
        mut capture: Option<&mut Vec<Tensor>>,
    ) -> Var<'t> {
        x = apply_patches(x, patches, start);
        if let Some(c) = capture.as_deref_mut() {
            c.push((*x.value()).clone());
        }
        for layer in start..self.config.num_layers {
            x = self.block(tape, b, layer, x, segments);
            x = apply_patches(x, patches, layer + 1);
            if let Some(c) = capture.as_deref_mut() {
                c.push((*x.value()).clone());
            }
        }
        x
    }

    /// One forward pass over `tokens` with optional residual capture and
    /// patching. Logits are `T × V`.
    pub fn forward(&self, tokens: &[u32], capture: bool, patches: &[Patch]) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        self.check_patches(tokens.len(), patches, 0)?;
        let t = tokens.len();
        let tape = Tape::new();
        let b = self.bind(&tape, &ParameterSet::default());
        let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let x = self.embed(&tape, &b, &ids, &positions);
        let segments = [Segment { start: 0, len: t }];
        let mut levels = Vec::new();
        let x = self.run_blocks(&tape, &b, 0, x, &segments, patches, capture.then_some(&mut levels));
        let logits = (*self.head(&b, x).value()).clone();
        let cache = capture.then(|| {
            let v = logits.cols();
            let mut probs = Tensor::zeros(vec![t, v]);
            for i in 0..t {
                crate::tensor::softmax_into(logits.row(i), probs.row_mut(i));
            }
            HiddenStateCache { levels, probs }
        });
        Ok(ForwardOutput { logits, cache })
    }

    /// Continues a forward pass from residual `states` (`T × d`) at `level`,
    /// returning the logits of the last position only. Equivalent to the
    /// corresponding rows of [`Self::forward`] with the same effective
    /// residual stream.
    pub fn resume_last_logits(&self, level: usize, states: &Tensor, patches: &[Patch]) -> Result<Vec<f64>> {
        if level > self.config.num_layers {
            return Err(Error::Model(format!("level {level} beyond {}", self.config.num_layers)));
        }
        if states.shape().len() != 2 || states.cols() != self.config.d_model || states.rows() == 0 {
            return Err(Error::Shape(format!("resume states {:?}", states.shape())));
        }
        let t = states.rows();
        self.check_patches(t, patches, level)?;
        let tape = Tape::new();
        let b = self.bind(&tape, &ParameterSet::default());
        let x = tape.constant(states.clone());
        let segments = [Segment { start: 0, len: t }];
        let x = self.run_blocks(&tape, &b, level, x, &segments, patches, None);
        let last = x.select_rows(&[t - 1]);
        Ok(self.head(&b, last).value().data().to_vec())
    }

    /// Continues a forward pass from residual `states` at `level` and
    /// returns the states of levels `level..=L`.
    pub fn resume_states(&self, level: usize, states: &Tensor) -> Result<Vec<Tensor>> {
        if level > self.config.num_layers {
            return Err(Error::Model(format!("level {level} beyond {}", self.config.num_layers)));
        }
        if states.shape().len() != 2 || states.cols() != self.config.d_model || states.rows() == 0 {
            return Err(Error::Shape(format!("resume states {:?}", states.shape())));
        }
        let t = states.rows();
        let tape = Tape::new();
        let b = self.bind(&tape, &ParameterSet::default());
        let x = tape.constant(states.clone());
        let mut levels = Vec::with_capacity(self.config.num_layers + 1 - level);
        self.run_blocks(&tape, &b, level, x, &[Segment { start: 0, len: t }], &[], Some(&mut levels));
        Ok(levels)
    }

    /// Packs `seqs` into one tape pass and returns logits for the output
    /// positions only, with the next-token target and owning sequence of
    /// each row.
    pub fn output_logits<'t>(
        &self,
        tape: &'t Tape,
        trainable: &ParameterSet,
        seqs: &[&LabeledSequence],
    ) -> Result<(Var<'t>, Vec<usize>, Vec<usize>)> {
        if seqs.is_empty() {
            return Err(Error::Model("empty batch".into()));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut owners = Vec::new();
        for (s, seq) in seqs.iter().enumerate() {
            self.check_tokens(&seq.tokens)?;
            if seq.prompt_len == 0 || seq.prompt_len >= seq.tokens.len() {
                return Err(Error::Model("sequence needs a nonempty prompt and output".into()));
            }
            let start = ids.len();
            let (tg, mask) = seq.targets_and_mask();
            for (p, &tok) in seq.tokens.iter().enumerate() {
                ids.push(tok as usize);
                positions.push(p);
                if mask[p] {
                    rows.push(start + p);
                    targets.push(tg[p]);
                    owners.push(s);
                }
            }
            segments.push(Segment { start, len: seq.tokens.len() });
        }
        let b = self.bind(tape, trainable);
        let x = self.embed(tape, &b, &ids, &positions);
        let x = self.run_blocks(tape, &b, 0, x, &segments, &[], None);
        let logits = self.head(&b, x.select_rows(&rows));
        Ok((logits, targets, owners))
    }

    /// Mean over `seqs` of the summed output-token negative log-likelihood,
    /// as a differentiable scalar.
    pub fn mean_sequence_nll<'t>(
        &self,
        tape: &'t Tape,
        trainable: &ParameterSet,
        seqs: &[&LabeledSequence],
    ) -> Result<Var<'t>> {
        let (logits, targets, _) = self.output_logits(tape, trainable, seqs)?;
        let mask = vec![true; targets.len()];
        Ok(tape.masked_cross_entropy(logits, &targets, &mask)?.scale(1.0 / seqs.len() as f64))
    }

    /// Summed output-token negative log-likelihood of each sequence.
    pub fn sequence_nlls(&self, seqs: &[&LabeledSequence]) -> Result<Vec<f64>> {
        const CHUNK: usize = 32;
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(CHUNK) {
            let tape = Tape::new();
            let (logits, targets, owners) = self.output_logits(&tape, &ParameterSet::default(), chunk)?;
            let z = logits.value();
            let mut sums = vec![0.0; chunk.len()];
            for (r, (&t, &o)) in targets.iter().zip(&owners).enumerate() {
                sums[o] -= log_softmax(z.row(r))[t];
            }
            out.extend(sums);
        }
        Ok(out)
    }

    /// `-log P(y | x)` summed over the output tokens.
    pub fn sequence_nll(&self, input: &[u32], output: &[u32]) -> Result<f64> {
        let seq = LabeledSequence::new(input, output)?;
        Ok(self.sequence_nlls(&[&seq])?[0])
    }

    /// Log-probabilities at the output positions, `R × V`, for use as a
    /// frozen reference distribution.
    pub fn output_log_probs(&self, seqs: &[&LabeledSequence]) -> Result<Tensor> {
        let tape = Tape::new();
        let (logits, _, _) = self.output_logits(&tape, &ParameterSet::default(), seqs)?;
        let z = logits.value();
        let mut out = Tensor::zeros(z.shape().to_vec());
        for r in 0..z.rows() {
            out.row_mut(r).copy_from_slice(&log_softmax(z.row(r)));
        }
        Ok(out)
    }
}

fn apply_patches<'t>(x: Var<'t>, patches: &[Patch], level: usize) -> Var<'t> {
    let rows: Vec<(usize, &[f64])> = patches
        .iter()
        .filter(|p| p.layer == level)
        .map(|p| (p.position, p.vector.as_slice()))
        .collect();
    if rows.is_empty() {
        x
    } else {
        x.replace_rows(&rows)
    }
}
