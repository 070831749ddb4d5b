//! Synthetic fact corpus: PII question answering and short biographical
//! completions, split by subject into forget / retain / holdout sets plus a
//! utility probe set of generic facts.

mod pools;
pub mod tokenizer;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LabeledSequence, EOS_TOKEN};
use pools::*;
pub use tokenizer::Tokenizer;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Task {
    Qa,
    Completion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Forget,
    Retain,
    Holdout,
    Utility,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Forget, Split::Retain, Split::Holdout, Split::Utility];

    pub fn name(self) -> &'static str {
        match self {
            Split::Forget => "forget",
            Split::Retain => "retain",
            Split::Holdout => "holdout",
            Split::Utility => "utility",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Half-open token range `[start, end)` within a prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactSpans {
    pub interrogative: Span,
    pub subject: Span,
    pub relation: Span,
}

/// One `(interrogative, subject, relation, attribute)` fact. The prompt is
/// `interrogative + subject + relation`; the attribute is the expected
/// answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    pub interrogative: String,
    pub subject: String,
    pub relation: String,
    pub attribute: String,
    pub spans: FactSpans,
    pub prompt_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub task: Task,
    pub split: Split,
    /// Name of the entity the example is about.
    pub subject: String,
    pub x: String,
    pub y: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fact: Option<FactRecord>,
}

/// Number of examples to generate. QA counts are per split; `completions`
/// is the number of biographies per person split, written about the first
/// subjects of that split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub forget: usize,
    pub retain: usize,
    pub holdout: usize,
    pub utility: usize,
    pub completions: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self { forget: 120, retain: 120, holdout: 60, utility: 60, completions: 20 }
    }
}

impl SplitCounts {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("forget", self.forget),
            ("retain", self.retain),
            ("holdout", self.holdout),
            ("utility", self.utility),
            ("completions", self.completions),
        ];
        for (name, n) in fields {
            if n == 0 {
                return Err(Error::Corpus(format!("{name} count must be positive")));
            }
        }
        let smallest = self.forget.min(self.retain).min(self.holdout);
        if self.completions > smallest {
            return Err(Error::Corpus(format!(
                "completions ({}) exceed the smallest person split ({smallest})",
                self.completions
            )));
        }
        Ok(())
    }
}

/// Token category of a prompt position, used to aggregate tracing results.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TokenCategory {
    Interrogative,
    SubjectFirst,
    SubjectMiddle,
    SubjectLast,
    RelationFirst,
    RelationMiddle,
    RelationLast,
}

impl TokenCategory {
    pub const ALL: [TokenCategory; 7] = [
        TokenCategory::Interrogative,
        TokenCategory::SubjectFirst,
        TokenCategory::SubjectMiddle,
        TokenCategory::SubjectLast,
        TokenCategory::RelationFirst,
        TokenCategory::RelationMiddle,
        TokenCategory::RelationLast,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            TokenCategory::Interrogative => "i",
            TokenCategory::SubjectFirst => "s_f",
            TokenCategory::SubjectMiddle => "s_m",
            TokenCategory::SubjectLast => "s_l",
            TokenCategory::RelationFirst => "r_f",
            TokenCategory::RelationMiddle => "r_m",
            TokenCategory::RelationLast => "r_l",
        }
    }

    pub fn is_subject(self) -> bool {
        matches!(self, TokenCategory::SubjectFirst | TokenCategory::SubjectMiddle | TokenCategory::SubjectLast)
    }
}

impl fmt::Display for TokenCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

fn span_categories(len: usize, first: TokenCategory, middle: TokenCategory, last: TokenCategory) -> Vec<TokenCategory> {
    match len {
        0 => Vec::new(),
        1 => vec![last],
        n => {
            let mut v = vec![first];
            v.extend(std::iter::repeat_n(middle, n - 2));
            v.push(last);
            v
        }
    }
}

/// Checks a QA example's spans against its tokenization and labels every
/// prompt token with its category.
pub fn annotate_spans(example: &Example, tokenizer: &Tokenizer) -> Result<(FactRecord, Vec<TokenCategory>)> {
    let fact = example
        .fact
        .as_ref()
        .ok_or_else(|| Error::Corpus(format!("{}: not a QA example", example.id)))?;
    let prompt = tokenizer.tokenize(&example.x)?;
    let sp = &fact.spans;
    let parts = [
        (&fact.interrogative, sp.interrogative),
        (&fact.subject, sp.subject),
        (&fact.relation, sp.relation),
    ];
    let mut cursor = 0;
    for (text, span) in parts {
        let ids = tokenizer.tokenize(text)?;
        if span.start != cursor || span.is_empty() || span.end > prompt.len() || prompt[span.range()] != ids[..] {
            return Err(Error::Corpus(format!(
                "{}: span {:?} for {text:?} not found in the tokenized prompt",
                example.id, span
            )));
        }
        cursor = span.end;
    }
    if cursor != prompt.len() || fact.prompt_len != prompt.len() {
        return Err(Error::Corpus(format!("{}: spans do not cover the prompt", example.id)));
    }
    use TokenCategory::*;
    let mut cats = vec![Interrogative; sp.interrogative.len()];
    cats.extend(span_categories(sp.subject.len(), SubjectFirst, SubjectMiddle, SubjectLast));
    cats.extend(span_categories(sp.relation.len(), RelationFirst, RelationMiddle, RelationLast));
    Ok((fact.clone(), cats))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub tokenizer: Tokenizer,
}

struct Draft {
    task: Task,
    split: Split,
    subject: String,
    x: String,
    y: String,
    parts: Option<[String; 4]>,
}

const INTERROGATIVE: &str = "What is";

#[derive(Clone, Copy)]
enum Identifier {
    Ssn,
    Phone,
    Address,
    Email,
}

impl Identifier {
    const ALL: [Identifier; 4] = [Identifier::Ssn, Identifier::Phone, Identifier::Address, Identifier::Email];

    fn label(self) -> &'static str {
        match self {
            Identifier::Ssn => "Social Security Number",
            Identifier::Phone => "phone number",
            Identifier::Address => "home address",
            Identifier::Email => "email address",
        }
    }

    fn sample(self, rng: &mut ChaCha8Rng, first: &str, last: &str) -> String {
        let mut digits = |n: usize| -> String { (0..n).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect() };
        match self {
            Identifier::Ssn => format!("{}-{}-{}", digits(3), digits(2), digits(4)),
            Identifier::Phone => format!("{}-{}-{}", digits(3), digits(3), digits(4)),
            Identifier::Address => {
                let number = rng.random_range(1..1000u32);
                let street = STREETS.choose(rng).expect("nonempty");
                let suffix = STREET_SUFFIXES.choose(rng).expect("nonempty");
                format!("{number} {street} {suffix}")
            }
            Identifier::Email => {
                let n = rng.random_range(10..100u32);
                let domain = EMAIL_DOMAINS.choose(rng).expect("nonempty");
                format!("{}.{}{n}@{domain}.com", first.to_lowercase(), last.to_lowercase())
            }
        }
    }
}

fn qa_draft(split: Split, subject: &str, relation: &str, attribute: String) -> Draft {
    let parts = [INTERROGATIVE.to_string(), format!(" {subject}'s"), format!(" {relation}?"), format!(" {attribute}")];
    Draft {
        task: Task::Qa,
        split,
        subject: subject.to_string(),
        x: parts[..3].concat(),
        y: parts[3].clone(),
        parts: Some(parts),
    }
}

fn biography(rng: &mut ChaCha8Rng, split: Split, first: &str, last: &str) -> Draft {
    let city = CITIES.choose(rng).expect("nonempty");
    let year = rng.random_range(1950..2000u32);
    let job = OCCUPATIONS.choose(rng).expect("nonempty");
    let hobby = HOBBIES.choose(rng).expect("nonempty");
    let day = WEEKDAYS.choose(rng).expect("nonempty");
    let article = if job.starts_with(['a', 'e', 'i', 'o', 'u']) { "an" } else { "a" };
    Draft {
        task: Task::Completion,
        split,
        subject: format!("{first} {last}"),
        x: format!("{first} {last} was born in {city} in {year}. {first} {last} works as {article} {job}."),
        y: format!(" {first} likes to {hobby} on {day}."),
        parts: None,
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(h) => h.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

fn place_names(rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut names = Vec::with_capacity(SYLLABLES.len().pow(3));
    for a in SYLLABLES {
        for b in SYLLABLES {
            for c in SYLLABLES {
                names.push(capitalize(&format!("{a}{b}{c}")));
            }
        }
    }
    names.shuffle(rng);
    names
}

fn utility_fact(rng: &mut ChaCha8Rng) -> (&'static str, String) {
    let word = |rng: &mut ChaCha8Rng| {
        let a = SYLLABLES.choose(rng).expect("nonempty");
        let b = SYLLABLES.choose(rng).expect("nonempty");
        capitalize(&format!("{a}{b}"))
    };
    match rng.random_range(0..4) {
        0 => ("capital city", word(rng)),
        1 => ("national flower", FLOWERS.choose(rng).expect("nonempty").to_string()),
        2 => ("largest river", format!("{} River", word(rng))),
        _ => ("founding year", rng.random_range(1200..1900u32).to_string()),
    }
}

/// Generates a corpus; a pure function of `(seed, counts)`.
pub fn generate_corpus(seed: u64, counts: &SplitCounts) -> Result<Corpus> {
    counts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut people: Vec<(&str, &str)> = Vec::with_capacity(FIRST_NAMES.len() * LAST_NAMES.len());
    for f in FIRST_NAMES {
        for l in LAST_NAMES {
            people.push((f, l));
        }
    }
    let demand = counts.forget + counts.retain + counts.holdout;
    if demand > people.len() {
        return Err(Error::Corpus(format!("{demand} subjects requested but the name pool holds {}", people.len())));
    }
    people.shuffle(&mut rng);
    let places = place_names(&mut rng);
    if counts.utility > places.len() {
        return Err(Error::Corpus(format!(
            "{} utility subjects requested but the place pool holds {}",
            counts.utility,
            places.len()
        )));
    }

    let mut drafts = Vec::new();
    let mut next = 0;
    for (split, n) in [(Split::Forget, counts.forget), (Split::Retain, counts.retain), (Split::Holdout, counts.holdout)] {
        let subjects = &people[next..next + n];
        next += n;
        for &(first, last) in subjects {
            let kind = *Identifier::ALL.choose(&mut rng).expect("nonempty");
            let attribute = kind.sample(&mut rng, first, last);
            drafts.push(qa_draft(split, &format!("{first} {last}"), kind.label(), attribute));
        }
        for &(first, last) in &subjects[..counts.completions] {
            drafts.push(biography(&mut rng, split, first, last));
        }
    }
    for place in &places[..counts.utility] {
        let (relation, attribute) = utility_fact(&mut rng);
        drafts.push(qa_draft(Split::Utility, place, relation, attribute));
    }

    let tokenizer = Tokenizer::build(drafts.iter().flat_map(|d| [d.x.as_str(), d.y.as_str()]))?;
    let mut examples = Vec::with_capacity(drafts.len());
    let mut seen = std::collections::BTreeMap::<(Split, Task), usize>::new();
    for d in drafts {
        let k = seen.entry((d.split, d.task)).or_default();
        let id = format!("{}-{}-{:04}", d.split, if d.task == Task::Qa { "qa" } else { "completion" }, *k);
        *k += 1;
        let fact = match d.parts {
            Some([i, s, r, a]) => {
                let li = tokenizer.tokenize(&i)?.len();
                let ls = tokenizer.tokenize(&s)?.len();
                let lr = tokenizer.tokenize(&r)?.len();
                let spans = FactSpans {
                    interrogative: Span { start: 0, end: li },
                    subject: Span { start: li, end: li + ls },
                    relation: Span { start: li + ls, end: li + ls + lr },
                };
                Some(FactRecord {
                    interrogative: i,
                    subject: s,
                    relation: r,
                    attribute: a,
                    spans,
                    prompt_len: li + ls + lr,
                })
            }
            None => None,
        };
        examples.push(Example { id, task: d.task, split: d.split, subject: d.subject, x: d.x, y: d.y, fact });
    }
    let corpus = Corpus { examples, tokenizer };
    corpus.validate()?;
    Ok(corpus)
}

impl Corpus {
    /// Checks the corpus invariants: nonempty outputs, spans that match the
    /// tokenization, and disjoint subjects across splits.
    pub fn validate(&self) -> Result<()> {
        for e in &self.examples {
            if e.y.is_empty() {
                return Err(Error::Corpus(format!("{}: empty expected output", e.id)));
            }
            match (e.task, &e.fact) {
                (Task::Qa, Some(f)) => {
                    annotate_spans(e, &self.tokenizer)?;
                    if f.attribute != e.y {
                        return Err(Error::Corpus(format!("{}: attribute differs from expected output", e.id)));
                    }
                }
                (Task::Qa, None) => return Err(Error::Corpus(format!("{}: QA example without a fact", e.id))),
                (Task::Completion, Some(_)) => {
                    return Err(Error::Corpus(format!("{}: completion example carries a fact", e.id)))
                }
                (Task::Completion, None) => {}
            }
        }
        for (i, a) in Split::ALL.iter().enumerate() {
            for b in &Split::ALL[i + 1..] {
                if !self.subjects(*a).is_disjoint(&self.subjects(*b)) {
                    return Err(Error::Corpus(format!("{a} and {b} share subjects")));
                }
            }
        }
        Ok(())
    }

    pub fn subjects(&self, split: Split) -> BTreeSet<&str> {
        self.examples.iter().filter(|e| e.split == split).map(|e| e.subject.as_str()).collect()
    }

    pub fn examples(&self, split: Split, task: Option<Task>) -> impl Iterator<Item = &Example> {
        self.examples
            .iter()
            .filter(move |e| e.split == split && task.is_none_or(|t| e.task == t))
    }

    pub fn split(&self, split: Split) -> Vec<&Example> {
        self.examples(split, None).collect()
    }

    /// `x ‖ y ‖ EOS` as a training sequence with `x` as the prompt.
    pub fn labeled(&self, example: &Example) -> Result<LabeledSequence> {
        let prompt = self.tokenizer.tokenize(&example.x)?;
        let mut output = self.tokenizer.tokenize(&example.y)?;
        output.push(EOS_TOKEN);
        LabeledSequence::new(&prompt, &output)
    }

    pub fn labeled_split(&self, split: Split) -> Result<Vec<LabeledSequence>> {
        self.examples(split, None).map(|e| self.labeled(e)).collect()
    }

    /// Corpus file body: one JSON record per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.examples {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(body: &str, tokenizer: Tokenizer) -> Result<Self> {
        let mut examples = Vec::new();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: Example = serde_json::from_str(line)
                .map_err(|err| Error::Corpus(format!("corpus line {}: {err}", i + 1)))?;
            examples.push(e);
        }
        let corpus = Corpus { examples, tokenizer };
        corpus.validate()?;
        Ok(corpus)
    }

    /// Writes `corpus.jsonl` and `vocab.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CORPUS_FILE), self.to_jsonl()?)?;
        fs::write(dir.join(VOCAB_FILE), self.tokenizer.to_vocab_file())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingArtifact {
                    path,
                    hint: "run `gen-data` first".into(),
                },
                _ => e.into(),
            })
        };
        let tokenizer = Tokenizer::from_vocab_file(&read(VOCAB_FILE)?)?;
        Self::from_jsonl(&read(CORPUS_FILE)?, tokenizer)
    }
}
