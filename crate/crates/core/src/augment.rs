//! Data augmentation: subword sampling (SS), Gaussian noise (GN), code-switch
//! substitution (CS) and machine translation (MT), plus the augmented corpus
//! `D_A = D ∪ {A(x)}`.
//!
//! Alignment and modification flags are indexed over input words (question
//! words first, then the sentence or context).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Corpus, Example, Gold, Task, TranslationStore};
use crate::tokenizer::{Segmentation, TokenizerError, UnigramVocab};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Contract(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "SS")]
    SubwordSampling,
    #[serde(rename = "GN")]
    GaussianNoise,
    #[serde(rename = "CS")]
    CodeSwitch,
    #[serde(rename = "MT")]
    MachineTranslation,
    /// `A(x) = x`; used for null-case checks.
    #[serde(rename = "ID")]
    Identity,
}

impl StrategyKind {
    pub fn code(self) -> &'static str {
        match self {
            StrategyKind::SubwordSampling => "SS",
            StrategyKind::GaussianNoise => "GN",
            StrategyKind::CodeSwitch => "CS",
            StrategyKind::MachineTranslation => "MT",
            StrategyKind::Identity => "ID",
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ss" | "subword-sampling" => Ok(StrategyKind::SubwordSampling),
            "gn" | "gaussian-noise" => Ok(StrategyKind::GaussianNoise),
            "cs" | "code-switch" => Ok(StrategyKind::CodeSwitch),
            "mt" | "machine-translation" => Ok(StrategyKind::MachineTranslation),
            "id" | "identity" => Ok(StrategyKind::Identity),
            other => Err(format!("unknown augmentation strategy {other:?}")),
        }
    }
}

/// Strategy parameters shared by every augmenter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyParams {
    /// SS temperature.
    pub alpha: f64,
    /// GN standard deviation on input embeddings.
    pub sigma: f64,
    /// CS per-word replacement probability.
    pub word_ratio: f64,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            alpha: crate::tokenizer::DEFAULT_ALPHA,
            sigma: 1e-2,
            word_ratio: 0.3,
        }
    }
}

impl StrategyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(AugmentError::Contract(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(AugmentError::Contract(format!("sigma {} must be >= 0", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.word_ratio) {
            return Err(AugmentError::Contract(format!("word_ratio {} must lie in [0, 1]", self.word_ratio)));
        }
        Ok(())
    }
}

/// Source-to-target word translations. Lookups lowercase the query and the
/// stored keys with Unicode `to_lowercase`; translations keep their case.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BilingualDictionary {
    pub src_lang: String,
    pub tgt_lang: String,
    forward: BTreeMap<String, Vec<String>>,
    backward: BTreeMap<String, Vec<String>>,
}

fn normalize(word: &str) -> String {
    word.to_lowercase()
}

impl BilingualDictionary {
    pub fn new(src_lang: &str, tgt_lang: &str) -> Self {
        Self {
            src_lang: src_lang.to_string(),
            tgt_lang: tgt_lang.to_string(),
            ..Default::default()
        }
    }

    pub fn insert(&mut self, source: &str, target: &str) {
        let fwd = self.forward.entry(normalize(source)).or_default();
        if !fwd.iter().any(|t| t == target) {
            fwd.push(target.to_string());
        }
        let bwd = self.backward.entry(normalize(target)).or_default();
        if !bwd.iter().any(|s| s == source) {
            bwd.push(source.to_string());
        }
    }

    pub fn lookup(&self, word: &str) -> Option<&[String]> {
        self.forward.get(&normalize(word)).map(Vec::as_slice)
    }

    pub fn reverse_lookup(&self, word: &str) -> Option<&[String]> {
        self.backward.get(&normalize(word)).map(Vec::as_slice)
    }

    /// Number of distinct source entries.
    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn n_pairs(&self) -> usize {
        self.forward.values().map(Vec::len).sum()
    }

    /// Parses `source<whitespace>target` lines; blank lines are skipped.
    /// Returns the dictionary and any warnings.
    pub fn parse(text: &str, src_lang: &str, tgt_lang: &str) -> Result<(Self, Vec<String>)> {
        let mut dict = Self::new(src_lang, tgt_lang);
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                [] => continue,
                [s, t] => dict.insert(s, t),
                _ => {
                    return Err(AugmentError::Parse {
                        line: i + 1,
                        message: format!("expected 2 fields, found {}", fields.len()),
                    })
                }
            }
        }
        let warnings = if dict.is_empty() {
            vec![format!("dictionary {src_lang}-{tgt_lang} is empty")]
        } else {
            Vec::new()
        };
        Ok((dict, warnings))
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (s, ts) in &self.forward {
            for t in ts {
                out.push_str(s);
                out.push('\t');
                out.push_str(t);
                out.push('\n');
            }
        }
        out
    }
}

pub fn load_dictionary(path: impl AsRef<Path>, src_lang: &str, tgt_lang: &str) -> Result<BilingualDictionary> {
    let path = path.as_ref();
    let (dict, warnings) = BilingualDictionary::parse(&fs::read_to_string(path)?, src_lang, tgt_lang)?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    log::info!(
        "{}: {} entries, {} pairs",
        path.display(),
        dict.len(),
        dict.n_pairs()
    );
    Ok(dict)
}

/// An augmented view `A(x)` of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedExample {
    /// Augmented text; `gold` holds the projected payload when available.
    pub example: Example,
    pub strategy: StrategyKind,
    /// Original input word → augmented input word.
    pub alignment: Vec<Option<usize>>,
    /// Per augmented input word.
    pub modified: Vec<bool>,
    pub label_available: bool,
    /// Sampled segmentation (SS only); other views use Viterbi.
    pub segmentation: Option<Segmentation>,
    /// Embedding noise applied at encode time (GN only).
    pub noise_sigma: f64,
}

impl AugmentedExample {
    pub fn identity(ex: &Example) -> Self {
        let n = ex.n_input_words();
        Self {
            example: ex.clone(),
            strategy: StrategyKind::Identity,
            alignment: (0..n).map(Some).collect(),
            modified: vec![false; n],
            label_available: ex.gold.is_some(),
            segmentation: None,
            noise_sigma: 0.0,
        }
    }

    pub fn n_modified(&self) -> usize {
        self.modified.iter().filter(|&&m| m).count()
    }
}

/// Replaces each input word with probability `word_ratio` by a translation
/// drawn uniformly from a uniformly chosen dictionary that contains it.
pub fn code_switch<R: Rng + ?Sized>(
    ex: &Example,
    dictionaries: &[BilingualDictionary],
    word_ratio: f64,
    rng: &mut R,
) -> Result<AugmentedExample> {
    if dictionaries.is_empty() {
        return Err(AugmentError::Contract("code-switch needs at least one dictionary".into()));
    }
    if !(0.0..=1.0).contains(&word_ratio) {
        return Err(AugmentError::Contract(format!("word_ratio {word_ratio} must lie in [0, 1]")));
    }
    let mut out = AugmentedExample::identity(ex);
    out.strategy = StrategyKind::CodeSwitch;
    let q = ex.question.len();
    for i in 0..ex.n_input_words() {
        if !rng.random_bool(word_ratio) {
            continue;
        }
        let word = if i < q { &ex.question[i] } else { &ex.words[i - q] };
        let options: Vec<&[String]> = dictionaries.iter().filter_map(|d| d.lookup(word)).collect();
        let Some(translations) = options.choose(rng) else {
            continue;
        };
        let replacement = translations.choose(rng).expect("translation lists are non-empty").clone();
        if i < q {
            out.example.question[i] = replacement;
        } else {
            out.example.words[i - q] = replacement;
        }
        out.modified[i] = true;
    }
    Ok(out)
}

/// Draws a fresh segmentation of every input word at temperature `alpha`.
pub fn subword_resample<R: Rng + ?Sized>(
    ex: &Example,
    vocab: &UnigramVocab,
    alpha: f64,
    rng: &mut R,
) -> Result<AugmentedExample> {
    let words = ex.input_words();
    let mut per_word = Vec::with_capacity(words.len());
    let mut modified = Vec::with_capacity(words.len());
    for w in &words {
        let sampled = vocab.sample_word(w, alpha, rng)?;
        modified.push(sampled != vocab.viterbi_word(w)?);
        per_word.push(sampled);
    }
    let mut out = AugmentedExample::identity(ex);
    out.strategy = StrategyKind::SubwordSampling;
    out.modified = modified;
    out.segmentation = Some(Segmentation::from_words(per_word));
    Ok(out)
}

/// Same text, marked for embedding noise at encode time.
pub fn gaussian_noise(ex: &Example, sigma: f64) -> Result<AugmentedExample> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(AugmentError::Contract(format!("sigma {sigma} must be >= 0")));
    }
    let mut out = AugmentedExample::identity(ex);
    out.strategy = StrategyKind::GaussianNoise;
    out.noise_sigma = sigma;
    Ok(out)
}

/// One view per requested language found in `store`; missing translations
/// are skipped and reported.
pub fn translate(
    ex: &Example,
    store: &TranslationStore,
    target_languages: &[String],
    task: Task,
) -> (Vec<AugmentedExample>, Vec<String>) {
    let mut views = Vec::new();
    let mut warnings = Vec::new();
    for lang in target_languages {
        let Some(t) = store.get(&ex.id, lang) else {
            warnings.push(format!("no {lang} translation for example {}", ex.id));
            continue;
        };
        let label_available = task == Task::Classification;
        let gold = if label_available {
            t.label.map(Gold::Label).or_else(|| ex.gold.clone())
        } else {
            None
        };
        let example = Example {
            id: ex.id.clone(),
            lang: lang.clone(),
            words: t.words.clone(),
            question: t.question.clone(),
            gold,
        };
        let n_orig = ex.n_input_words();
        let n_aug = example.n_input_words();
        views.push(AugmentedExample {
            example,
            strategy: StrategyKind::MachineTranslation,
            alignment: vec![None; n_orig],
            modified: vec![true; n_aug],
            label_available: label_available && ex.gold.is_some(),
            segmentation: None,
            noise_sigma: 0.0,
        });
    }
    (views, warnings)
}

/// Where an augmentation is consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UseIn {
    R1,
    R2,
    Corpus,
}

/// Recommended strategy ordering for a task and use.
#[derive(Debug, Clone, PartialEq)]
pub struct Advice {
    pub recommended: Vec<StrategyKind>,
    pub note: &'static str,
}

/// Rejects MT in R1 for span extraction and sequence labeling, where the two
/// sides cannot be aligned; everything else is accepted with advice.
pub fn validate_strategy(task: Task, use_in: UseIn, kind: StrategyKind) -> Result<Advice> {
    use StrategyKind::*;
    if use_in == UseIn::R1 && kind == MachineTranslation && task != Task::Classification {
        return Err(AugmentError::Validation(format!(
            "machine translation cannot be used for example consistency (R1) on {task}: \
             predictions of a sentence and its translation cannot be aligned position by position"
        )));
    }
    let advice = match (task, use_in) {
        (Task::Classification, _) => Advice {
            recommended: vec![MachineTranslation, CodeSwitch, SubwordSampling, GaussianNoise],
            note: "translation when available, otherwise code-switch, subword sampling, Gaussian noise",
        },
        (Task::SpanExtraction, UseIn::R1) => Advice {
            recommended: vec![CodeSwitch, SubwordSampling, GaussianNoise],
            note: "code-switch when R1 is used alone; subword sampling when the corpus already contains translations",
        },
        (Task::SequenceLabeling, UseIn::R1) => Advice {
            recommended: vec![SubwordSampling, CodeSwitch, GaussianNoise],
            note: "subword sampling; code-switch is noisier on token-level labels",
        },
        (Task::SequenceLabeling, _) => Advice {
            recommended: vec![MachineTranslation, SubwordSampling, CodeSwitch, GaussianNoise],
            note: "translation to augment the corpus when available, otherwise subword sampling",
        },
        (Task::SpanExtraction, _) => Advice {
            recommended: vec![MachineTranslation, CodeSwitch, SubwordSampling, GaussianNoise],
            note: "no ordering beyond preferring translations for the corpus",
        },
    };
    Ok(advice)
}

/// Inputs an augmenter may need.
#[derive(Debug, Clone, Copy)]
pub struct Resources<'a> {
    pub vocab: &'a UnigramVocab,
    pub dictionaries: &'a [BilingualDictionary],
    pub store: &'a TranslationStore,
    pub targets: &'a [String],
}

/// Views of `ex` under `kind`: one for SS/GN/CS/ID, one per found
/// translation for MT. Warnings (missing translations) are appended.
pub fn augment<R: Rng + ?Sized>(
    ex: &Example,
    task: Task,
    kind: StrategyKind,
    params: &StrategyParams,
    res: &Resources<'_>,
    rng: &mut R,
    warnings: &mut Vec<String>,
) -> Result<Vec<AugmentedExample>> {
    Ok(match kind {
        StrategyKind::SubwordSampling => vec![subword_resample(ex, res.vocab, params.alpha, rng)?],
        StrategyKind::GaussianNoise => vec![gaussian_noise(ex, params.sigma)?],
        StrategyKind::CodeSwitch => vec![code_switch(ex, res.dictionaries, params.word_ratio, rng)?],
        StrategyKind::Identity => vec![AugmentedExample::identity(ex)],
        StrategyKind::MachineTranslation => {
            let (views, w) = translate(ex, res.store, res.targets, task);
            warnings.extend(w);
            views
        }
    })
}

/// `D_A`: the originals followed by their augmentations, with pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedCorpus {
    pub task: Task,
    pub n_labels: usize,
    pub strategy: StrategyKind,
    pub originals: Vec<Example>,
    pub augmented: Vec<AugmentedExample>,
    /// `(original index, augmented index)`, one per augmentation.
    pub pairs: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

impl AugmentedCorpus {
    pub fn len(&self) -> usize {
        self.originals.len() + self.augmented.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every member of `D_A` as an augmented example (originals as identity
    /// views), originals first.
    pub fn items(&self) -> Vec<AugmentedExample> {
        self.originals
            .iter()
            .map(AugmentedExample::identity)
            .chain(self.augmented.iter().cloned())
            .collect()
    }

    /// `D_A` as a plain corpus; unlabeled views carry no gold.
    pub fn to_corpus(&self) -> Corpus {
        let mut examples = self.originals.clone();
        examples.extend(self.augmented.iter().map(|a| {
            let mut e = a.example.clone();
            if !a.label_available {
                e.gold = None;
            }
            e
        }));
        Corpus {
            task: self.task,
            n_labels: self.n_labels,
            examples,
        }
    }
}

/// Builds `D_A = D ∪ {A(x) | x ∈ D}` at augmentation ratio 1.0.
pub fn build_augmented_corpus<R: Rng + ?Sized>(
    corpus: &Corpus,
    kind: StrategyKind,
    params: &StrategyParams,
    res: &Resources<'_>,
    rng: &mut R,
) -> Result<AugmentedCorpus> {
    validate_strategy(corpus.task, UseIn::Corpus, kind)?;
    params.validate()?;
    let mut out = AugmentedCorpus {
        task: corpus.task,
        n_labels: corpus.n_labels,
        strategy: kind,
        originals: corpus.examples.clone(),
        augmented: Vec::new(),
        pairs: Vec::new(),
        warnings: Vec::new(),
    };
    for (i, ex) in corpus.examples.iter().enumerate() {
        for view in augment(ex, corpus.task, kind, params, res, rng, &mut out.warnings)? {
            out.pairs.push((i, out.augmented.len()));
            out.augmented.push(view);
        }
    }
    for w in &out.warnings {
        log::warn!("{w}");
    }
    Ok(out)
}


#[cfg(test)]
mod properties {
    use super::*;
    use crate::data::{generate_cipher_corpus, SyntheticCorpus, SyntheticSpec};
    use crate::tokenizer::{build_vocab, VocabBuilder};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn fixture() -> &'static (SyntheticCorpus, UnigramVocab) {
        static F: OnceLock<(SyntheticCorpus, UnigramVocab)> = OnceLock::new();
        F.get_or_init(|| {
            let spec = SyntheticSpec {
                train_examples: 40,
                test_examples: 4,
                ..SyntheticSpec::new(Task::SpanExtraction)
            };
            let syn = generate_cipher_corpus(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let (vocab, _) = build_vocab(&VocabBuilder::new(120, 8, 2), &syn.unigram_corpus).unwrap();
            (syn, vocab)
        })
    }

    fn resources() -> Resources<'static> {
        let (syn, vocab) = fixture();
        Resources {
            vocab,
            dictionaries: &syn.dictionaries,
            store: &syn.translations,
            targets: syn.targets(),
        }
    }

    const LOCAL: [StrategyKind; 3] = [StrategyKind::SubwordSampling, StrategyKind::CodeSwitch, StrategyKind::GaussianNoise];

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn local_strategies_keep_words_aligned(
            idx in 0usize..40,
            seed in any::<u64>(),
            ratio in 0.0f64..=1.0,
            alpha in 0.0f64..1.0,
        ) {
            let (syn, _) = fixture();
            let ex = &syn.train.examples[idx];
            let params = StrategyParams { alpha, sigma: 0.1, word_ratio: ratio };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let originals = ex.input_words();
            for kind in LOCAL {
                let mut warnings = Vec::new();
                let views = augment(ex, Task::SpanExtraction, kind, &params, &resources(), &mut rng, &mut warnings).unwrap();
                prop_assert_eq!(views.len(), 1);
                let v = &views[0];
                prop_assert_eq!(v.example.n_input_words(), ex.n_input_words());
                prop_assert_eq!(&v.alignment, &(0..ex.n_input_words()).map(Some).collect::<Vec<_>>());
                prop_assert_eq!(v.modified.len(), ex.n_input_words());
                prop_assert_eq!(&v.example.gold, &ex.gold);
                if kind == StrategyKind::CodeSwitch {
                    for (i, (new, old)) in v.example.input_words().iter().zip(&originals).enumerate() {
                        if !v.modified[i] {
                            prop_assert_eq!(new.as_bytes(), old.as_bytes());
                        }
                    }
                }
            }
        }

        #[test]
        fn corpora_have_one_view_per_example_and_replay(seed in any::<u64>(), k in 0usize..3) {
            let (syn, _) = fixture();
            let kind = LOCAL[k];
            let params = StrategyParams::default();
            let build = || build_augmented_corpus(&syn.train, kind, &params, &resources(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let da = build();
            let n = syn.train.len();
            prop_assert_eq!(da.len(), 2 * n);
            let mut covered: Vec<usize> = da.pairs.iter().map(|p| p.0).collect();
            covered.sort_unstable();
            prop_assert_eq!(covered, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(da, build());
        }
    }
}
