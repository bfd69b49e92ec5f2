//! Task examples, their JSON-lines schemas, the translation store, and the
//! synthetic cipher benchmark.
//!
//! One line per example. Common fields are `id` and `lang`; the rest depend
//! on the task:
//!
//! | task                | fields                                                   |
//! |---------------------|----------------------------------------------------------|
//! | classification      | `words`, `n_label`, `label` (absent when unlabeled)      |
//! | span-extraction     | `question`, `context`, `answer_start`, `answer_end`      |
//! | sequence-labeling   | `words`, `n_label`, `tags` (absent when unlabeled)       |
//!
//! Span answers are inclusive word indices into `context`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classification,
    SpanExtraction,
    SequenceLabeling,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::SpanExtraction => "span-extraction",
            Task::SequenceLabeling => "sequence-labeling",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "classification" | "cls" => Ok(Task::Classification),
            "span-extraction" | "span" | "qa" => Ok(Task::SpanExtraction),
            "sequence-labeling" | "labeling" | "tagging" => Ok(Task::SequenceLabeling),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Ground truth `G(x)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Gold {
    Label(usize),
    /// Inclusive context word indices.
    Span { start: usize, end: usize },
    Tags(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub lang: String,
    /// Sentence words, or the context for span extraction.
    pub words: Vec<String>,
    /// Question words (span extraction only).
    pub question: Vec<String>,
    pub gold: Option<Gold>,
}

impl Example {
    /// Words fed to the encoder: question followed by context.
    pub fn input_words(&self) -> Vec<&str> {
        self.question
            .iter()
            .chain(&self.words)
            .map(String::as_str)
            .collect()
    }

    pub fn n_input_words(&self) -> usize {
        self.question.len() + self.words.len()
    }

    /// Input word index of context word 0.
    pub fn context_offset(&self) -> usize {
        self.question.len()
    }

    pub fn is_labeled(&self) -> bool {
        self.gold.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub task: Task,
    /// Classes for classification, tag classes for labeling, 0 for spans.
    pub n_labels: usize,
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn new(task: Task, n_labels: usize) -> Self {
        Self {
            task,
            n_labels,
            examples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Record {
    id: String,
    lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    words: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    question: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tags: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer_start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer_end: Option<usize>,
}

fn field<T>(v: Option<T>, name: &str, line: usize) -> Result<T> {
    v.ok_or_else(|| DataError::Parse {
        line,
        message: format!("missing field `{name}`"),
    })
}

fn record_to_example(r: Record, task: Task, line: usize, n_labels: &mut Option<usize>) -> Result<Example> {
    let err = |message: String| DataError::Parse { line, message };
    let mut check_n = |n: usize| -> Result<()> {
        match *n_labels {
            Some(prev) if prev != n => Err(DataError::Parse {
                line,
                message: format!("n_label {n} disagrees with earlier lines ({prev})"),
            }),
            _ => {
                *n_labels = Some(n);
                Ok(())
            }
        }
    };
    let (words, question, gold) = match task {
        Task::Classification => {
            let words = field(r.words, "words", line)?;
            let n = field(r.n_label, "n_label", line)?;
            check_n(n)?;
            if let Some(l) = r.label {
                if l >= n {
                    return Err(err(format!("label {l} is not below n_label {n}")));
                }
            }
            (words, Vec::new(), r.label.map(Gold::Label))
        }
        Task::SpanExtraction => {
            let context = field(r.context, "context", line)?;
            let question = r.question.unwrap_or_default();
            let gold = match (r.answer_start, r.answer_end) {
                (Some(s), Some(e)) => {
                    if s > e || e >= context.len() {
                        return Err(err(format!(
                            "answer [{s}, {e}] outside context of {} words",
                            context.len()
                        )));
                    }
                    Some(Gold::Span { start: s, end: e })
                }
                (None, None) => None,
                _ => return Err(err("answer_start and answer_end must appear together".into())),
            };
            (context, question, gold)
        }
        Task::SequenceLabeling => {
            let words = field(r.words, "words", line)?;
            let n = field(r.n_label, "n_label", line)?;
            check_n(n)?;
            if let Some(tags) = &r.tags {
                if tags.len() != words.len() {
                    return Err(err(format!(
                        "{} tags for {} words",
                        tags.len(),
                        words.len()
                    )));
                }
                if let Some(&t) = tags.iter().find(|&&t| t >= n) {
                    return Err(err(format!("tag {t} is not below n_label {n}")));
                }
            }
            (words, Vec::new(), r.tags.map(Gold::Tags))
        }
    };
    if words.is_empty() || words.iter().chain(&question).any(|w| w.is_empty() || w.contains(char::is_whitespace)) {
        return Err(err("words must be non-empty and contain no whitespace".into()));
    }
    Ok(Example {
        id: r.id,
        lang: r.lang,
        words,
        question,
        gold,
    })
}

/// Parses a JSON-lines dataset; returns the corpus and any warnings.
pub fn parse_jsonl(text: &str, task: Task) -> Result<(Corpus, Vec<String>)> {
    let mut n_labels = None;
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        examples.push(record_to_example(record, task, i + 1, &mut n_labels)?);
    }
    let mut warnings = Vec::new();
    if examples.is_empty() {
        warnings.push("dataset is empty".to_string());
    }
    Ok((
        Corpus {
            task,
            n_labels: n_labels.unwrap_or(0),
            examples,
        },
        warnings,
    ))
}

pub fn load_jsonl(path: impl AsRef<Path>, task: Task) -> Result<(Corpus, Vec<String>)> {
    let path = path.as_ref();
    let (corpus, warnings) = parse_jsonl(&fs::read_to_string(path)?, task)?;
    for w in &warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok((corpus, warnings))
}

fn example_to_record(ex: &Example, task: Task, n_labels: usize) -> Record {
    let mut r = Record {
        id: ex.id.clone(),
        lang: ex.lang.clone(),
        ..Default::default()
    };
    match task {
        Task::Classification => {
            r.words = Some(ex.words.clone());
            r.n_label = Some(n_labels);
            if let Some(Gold::Label(l)) = ex.gold {
                r.label = Some(l);
            }
        }
        Task::SpanExtraction => {
            r.question = Some(ex.question.clone());
            r.context = Some(ex.words.clone());
            if let Some(Gold::Span { start, end }) = ex.gold {
                r.answer_start = Some(start);
                r.answer_end = Some(end);
            }
        }
        Task::SequenceLabeling => {
            r.words = Some(ex.words.clone());
            r.n_label = Some(n_labels);
            if let Some(Gold::Tags(t)) = &ex.gold {
                r.tags = Some(t.clone());
            }
        }
    }
    r
}

pub fn to_jsonl(corpus: &Corpus) -> String {
    let mut out = String::new();
    for ex in &corpus.examples {
        let r = example_to_record(ex, corpus.task, corpus.n_labels);
        out.push_str(&serde_json::to_string(&r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_jsonl(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_jsonl(corpus))?;
    Ok(())
}

/// A stored translation of one source example into one language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Translation {
    pub example_id: String,
    pub lang: String,
    pub words: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub question: Vec<String>,
    /// Present for classification only; equal to the source label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

/// Translations keyed by `(example id, language)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TranslationStore {
    entries: BTreeMap<(String, String), Translation>,
}

impl TranslationStore {
    pub fn insert(&mut self, t: Translation) {
        self.entries.insert((t.example_id.clone(), t.lang.clone()), t);
    }

    pub fn get(&self, example_id: &str, lang: &str) -> Option<&Translation> {
        self.entries.get(&(example_id.to_string(), lang.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn languages(&self) -> Vec<String> {
        let mut langs: Vec<String> = self.entries.keys().map(|k| k.1.clone()).collect();
        langs.sort();
        langs.dedup();
        langs
    }

    pub fn iter(&self) -> impl Iterator<Item = &Translation> {
        self.entries.values()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut store = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let t: Translation = serde_json::from_str(line).map_err(|e| DataError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            store.insert(t);
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .values()
            .map(|t| serde_json::to_string(t).expect("translation serializes") + "\n")
            .collect()
    }
}

/// How gold labels are derived from the lemma sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelRule {
    /// Each lemma `k` belongs to class `k mod n_labels`; the label is the most
    /// frequent class (ties to the smaller class).
    Plurality,
    /// Number of even-indexed lemmas, mod 2.
    EvenParity,
}

/// Parameters of the cipher benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub task: Task,
    pub lemma_count: usize,
    /// First entry is the source language.
    pub languages: Vec<String>,
    pub rule: LabelRule,
    pub n_labels: usize,
    pub train_examples: usize,
    /// Test examples per language (the same lemma sentences in every language).
    pub test_examples: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of lemmas that appear in the bilingual dictionaries.
    pub dictionary_coverage: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(task: Task) -> Self {
        let n_labels = match task {
            Task::Classification => 3,
            Task::SpanExtraction => 0,
            Task::SequenceLabeling => 4,
        };
        Self {
            task,
            lemma_count: 40,
            languages: vec!["en".into(), "xa".into(), "xb".into()],
            rule: LabelRule::Plurality,
            n_labels,
            train_examples: 500,
            test_examples: 200,
            min_len: 4,
            max_len: 8,
            dictionary_coverage: 1.0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.languages.len() < 2 {
            return Err(DataError::Spec("need a source and at least one target language".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(DataError::Spec("sentence length range is empty".into()));
        }
        match self.task {
            Task::SpanExtraction if self.lemma_count < 8 || self.max_len < 4 => Err(DataError::Spec(
                "span extraction needs at least 8 lemmas and sentences of 4+ words".into(),
            )),
            Task::Classification | Task::SequenceLabeling if self.n_labels == 0 => {
                Err(DataError::Spec("n_labels must be positive".into()))
            }
            Task::Classification if self.rule == LabelRule::EvenParity && self.n_labels != 2 => {
                Err(DataError::Spec("the parity rule has two labels".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Surface form of `lemma` in `lang`; the source language (first in the
/// list) writes the bare lemma.
pub fn surface(lemma: usize, lang: &str, source: &str) -> String {
    if lang == source {
        format!("w{lemma}")
    } else {
        format!("w{lemma}\u{a7}{lang}")
    }
}

/// Gold payload implied by a lemma sentence.
pub fn gold_from_lemmas(spec: &SyntheticSpec, lemmas: &[usize], answer: Option<(usize, usize)>) -> Gold {
    match spec.task {
        Task::Classification => match spec.rule {
            LabelRule::Plurality => {
                let mut counts = vec![0usize; spec.n_labels];
                for &k in lemmas {
                    counts[k % spec.n_labels] += 1;
                }
                let best = counts.iter().copied().max().unwrap_or(0);
                Gold::Label(counts.iter().position(|&c| c == best).unwrap_or(0))
            }
            LabelRule::EvenParity => Gold::Label(lemmas.iter().filter(|&&k| k % 2 == 0).count() % 2),
        },
        Task::SequenceLabeling => Gold::Tags(lemmas.iter().map(|&k| k % spec.n_labels).collect()),
        Task::SpanExtraction => {
            let (start, end) = answer.expect("span sentences carry an answer");
            Gold::Span { start, end }
        }
    }
}

/// Lemma roles for span extraction: lemma 0 is the question word, followed
/// by a block of answer-start lemmas and a block of answer-end lemmas.
fn span_roles(lemma_count: usize) -> (usize, std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
    let block = (lemma_count / 8).max(1);
    (0, 1..1 + block, 1 + block..1 + 2 * block, 1 + 2 * block..lemma_count)
}

struct LemmaSentence {
    question: Vec<usize>,
    context: Vec<usize>,
    answer: Option<(usize, usize)>,
}

fn sample_sentence<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> LemmaSentence {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    match spec.task {
        Task::SpanExtraction => {
            let (q, starts, ends, fillers) = span_roles(spec.lemma_count);
            let len = len.max(4);
            let fillers: Vec<usize> = fillers.collect();
            let mut context: Vec<usize> = (0..len - 3)
                .map(|_| *fillers.choose(rng).expect("filler lemmas"))
                .collect();
            let at = rng.random_range(0..=context.len());
            let s = rng.random_range(starts);
            let e = rng.random_range(ends);
            context.splice(at..at, [q, s, e]);
            LemmaSentence {
                question: vec![q],
                context,
                answer: Some((at + 1, at + 2)),
            }
        }
        _ => LemmaSentence {
            question: Vec::new(),
            context: (0..len).map(|_| rng.random_range(0..spec.lemma_count)).collect(),
            answer: None,
        },
    }
}

/// Output of [`generate_cipher_corpus`].
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    /// Labeled source-language training data.
    pub train: Corpus,
    /// Parallel test sets, one per language.
    pub test: BTreeMap<String, Corpus>,
    /// Source-to-target dictionaries, one per target language.
    pub dictionaries: Vec<crate::augment::BilingualDictionary>,
    /// Exact translations of every training example into every target.
    pub translations: TranslationStore,
    /// Tokenizer training texts: every word occurrence in `train` and
    /// `translations`, prefixed with the word-boundary marker.
    pub unigram_corpus: Vec<String>,
}

impl SyntheticCorpus {
    pub fn source(&self) -> &str {
        &self.spec.languages[0]
    }

    pub fn targets(&self) -> &[String] {
        &self.spec.languages[1..]
    }
}

/// Generates the cipher benchmark: lemma `k` is written `wk` in the source and
/// `wk§L` in language `L`, labels are computed from lemmas only, and the
/// dictionaries and translations are exact.
pub fn generate_cipher_corpus<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let source = spec.languages[0].clone();
    let render = |lemmas: &[usize], lang: &str| -> Vec<String> {
        lemmas.iter().map(|&k| surface(k, lang, &source)).collect()
    };
    let mut train = Corpus::new(spec.task, spec.n_labels);
    let mut translations = TranslationStore::default();
    let mut unigram_corpus = Vec::new();
    for i in 0..spec.train_examples {
        let s = sample_sentence(spec, rng);
        let gold = gold_from_lemmas(spec, &s.context, s.answer);
        let id = format!("train-{i}");
        for lang in &spec.languages {
            let words = render(&s.context, lang);
            let question = render(&s.question, lang);
            unigram_corpus.extend(
                question
                    .iter()
                    .chain(&words)
                    .map(|w| format!("{}{w}", crate::tokenizer::DEFAULT_MARKER)),
            );
            if *lang == source {
                train.examples.push(Example {
                    id: id.clone(),
                    lang: lang.clone(),
                    words,
                    question,
                    gold: Some(gold.clone()),
                });
            } else {
                let label = match gold {
                    Gold::Label(l) => Some(l),
                    _ => None,
                };
                translations.insert(Translation {
                    example_id: id.clone(),
                    lang: lang.clone(),
                    words,
                    question,
                    label,
                });
            }
        }
    }
    let mut test: BTreeMap<String, Corpus> = spec
        .languages
        .iter()
        .map(|l| (l.clone(), Corpus::new(spec.task, spec.n_labels)))
        .collect();
    for i in 0..spec.test_examples {
        let s = sample_sentence(spec, rng);
        let gold = gold_from_lemmas(spec, &s.context, s.answer);
        for lang in &spec.languages {
            test.get_mut(lang).expect("language corpus").examples.push(Example {
                id: format!("test-{i}"),
                lang: lang.clone(),
                words: render(&s.context, lang),
                question: render(&s.question, lang),
                gold: Some(gold.clone()),
            });
        }
    }
    let covered: Vec<usize> = (0..spec.lemma_count)
        .filter(|_| rng.random::<f64>() < spec.dictionary_coverage)
        .collect();
    let dictionaries = spec.languages[1..]
        .iter()
        .map(|lang| {
            let mut d = crate::augment::BilingualDictionary::new(&source, lang);
            for &k in &covered {
                d.insert(&surface(k, &source, &source), &surface(k, lang, &source));
            }
            d
        })
        .collect();
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        train,
        test,
        dictionaries,
        translations,
        unigram_corpus,
    })
}
