//! Two-stage training: stage 1 fits a teacher θ* with the task loss and R1
//! under `A*`; stage 2 fits a student θ on `D_A` (built with `A`) with
//! `L_task + λ1·R1(A′) + λ2·R2(θ*)`.
//!
//! Randomness comes from one seed split into named ChaCha8 streams
//! ([`Stream`]); every stage restarts the batching, sampling and noise
//! streams, so runs that differ only in loss weights see the same data order.

use std::collections::{BTreeMap, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{
    self, AugmentError, AugmentedExample, BilingualDictionary, Resources, StrategyKind, StrategyParams, UseIn,
};
use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::consistency::{self, ConsistencyError, ViewAlignment};
use crate::data::{Corpus, Example, Gold, Task, TranslationStore};
use crate::model::{self, ModelConfig, ModelError, ModelParams, Pooling, Prediction, Target};
use crate::presets::{self, Benchmark, Setting};
use crate::tokenizer::{Segmentation, TokenizerError, UnigramVocab};

pub const MANIFEST_FORMAT: &str = "xtune-run v1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("{stage} step {step}: non-finite loss (task {task}, r1 {r1}, r2 {r2})")]
    NonFinite {
        stage: String,
        step: usize,
        task: f64,
        r1: f64,
        r2: f64,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which objectives a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Task loss only, on the labeled part of the training corpus.
    Baseline,
    /// Stage 1 only: task loss plus R1 under `A*`.
    R1Only,
    /// Plain stage-1 teacher, then stage 2 with λ1 = 0.
    R2Only,
    /// Both stages.
    Xtune,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::R1Only, Mode::R2Only, Mode::Xtune];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::R1Only => "r1-only",
            Mode::R2Only => "r2-only",
            Mode::Xtune => "xtune",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected baseline, r1-only, r2-only or xtune)"))
    }
}

/// Which examples stage 1 trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage1Corpus {
    /// Source plus translations for r1-only under translate-train-all,
    /// source only otherwise.
    Auto,
    Source,
    SourceAndTranslations,
}

/// Named random streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Sampling = 2,
    Augmentation = 3,
    Batching = 4,
    Noise = 5,
    Synthesis = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub setting: Setting,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Weight of R1 in stage 1.
    pub stage1_r1_weight: f64,
    pub a_star: StrategyKind,
    pub a: StrategyKind,
    pub a_prime: StrategyKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub seed: u64,
    pub alpha: f64,
    pub sigma: f64,
    pub word_ratio: f64,
    /// Detach the fixed side of each KL term in R1.
    pub stopgrad: bool,
    /// Start the student from θ* instead of a fresh initialization.
    pub warm_start_student: bool,
    pub stage1_corpus: Stage1Corpus,
    /// With `A′ = MT`, pair translations with their source example instead
    /// of a random other rendering.
    pub mt_pair_with_source: bool,
    pub d: usize,
    pub max_len: usize,
    pub pooling: Pooling,
    pub init_std: f64,
    /// Record the task-loss gradient reaching unlabeled examples each step.
    pub instrument: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Xtune,
            setting: Setting::CrossLingualTransfer,
            lambda1: 5.0,
            lambda2: 5.0,
            stage1_r1_weight: 1.0,
            a_star: StrategyKind::CodeSwitch,
            a: StrategyKind::CodeSwitch,
            a_prime: StrategyKind::CodeSwitch,
            lr: 1e-2,
            batch_size: 32,
            epochs: 10,
            warmup_frac: 0.1,
            seed: 0,
            alpha: crate::tokenizer::DEFAULT_ALPHA,
            sigma: 1e-2,
            word_ratio: 0.3,
            stopgrad: true,
            warm_start_student: false,
            stage1_corpus: Stage1Corpus::Auto,
            mt_pair_with_source: false,
            d: 16,
            max_len: 64,
            pooling: Pooling::FirstSubword,
            init_std: 0.02,
            instrument: false,
        }
    }
}

impl TrainConfig {
    /// Default configuration with a benchmark's strategies and loss weights.
    pub fn from_preset(bench: Benchmark, setting: Setting) -> Self {
        let p = presets::preset(bench, setting);
        Self {
            setting,
            a_star: p.a_star,
            a: p.a,
            a_prime: p.a_prime,
            lambda1: p.lambda1,
            lambda2: p.lambda2,
            pooling: if bench == Benchmark::Pos {
                Pooling::Average
            } else {
                Pooling::FirstSubword
            },
            ..Self::default()
        }
    }

    pub fn strategy_params(&self) -> StrategyParams {
        StrategyParams {
            alpha: self.alpha,
            sigma: self.sigma,
            word_ratio: self.word_ratio,
        }
    }

    pub fn validate(&self, task: Task) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("stage1_r1_weight", self.stage1_r1_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac = {} must lie in [0, 1)", self.warmup_frac));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        self.strategy_params().validate()?;
        match self.mode {
            Mode::Baseline => {}
            Mode::R1Only => {
                augment::validate_strategy(task, UseIn::R1, self.a_star)?;
            }
            Mode::R2Only => {
                augment::validate_strategy(task, UseIn::Corpus, self.a)?;
            }
            Mode::Xtune => {
                augment::validate_strategy(task, UseIn::R1, self.a_star)?;
                augment::validate_strategy(task, UseIn::Corpus, self.a)?;
                augment::validate_strategy(task, UseIn::R1, self.a_prime)?;
            }
        }
        Ok(())
    }

    fn stage1_uses_translations(&self) -> bool {
        match self.stage1_corpus {
            Stage1Corpus::Source => false,
            Stage1Corpus::SourceAndTranslations => true,
            Stage1Corpus::Auto => self.mode == Mode::R1Only && self.setting == Setting::TranslateTrainAll,
        }
    }
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut Adam, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Config("adam_step: parameter, gradient and state counts differ".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(TrainError::Config(format!(
                "adam_step: gradient shape {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Learning rate at 1-based `step`: linear ramp to `base` over
/// `round(warmup_frac·total)` steps, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, base: f64, warmup_frac: f64) -> f64 {
    let warmup = (warmup_frac * total as f64).round() as usize;
    if step <= warmup && warmup > 0 {
        return base * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    base * (total - step) as f64 / (total - warmup) as f64
}

/// Loss components of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub task: f64,
    pub r1: f64,
    pub r2: f64,
    /// Examples contributing to the task loss.
    pub n_task: usize,
    /// Batch members without usable labels.
    pub n_unlabeled: usize,
    /// Largest |∂L_task/∂output| over unlabeled batch members (instrumented
    /// runs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unlabeled_task_grad: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub name: String,
    pub n_items: usize,
    pub n_labeled: usize,
    pub steps: Vec<StepLog>,
}

impl StageLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.total).collect()
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub task: Task,
    pub seed: u64,
    pub config: TrainConfig,
    /// SHA-256 of each input, keyed by role.
    pub inputs: BTreeMap<String, String>,
    pub stages: Vec<StageLog>,
    pub warnings: Vec<String>,
    #[serde(default)]
    pub metrics: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Training inputs besides the configuration.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    /// Labeled source-language corpus `D`.
    pub train: &'a Corpus,
    pub vocab: &'a UnigramVocab,
    pub dictionaries: &'a [BilingualDictionary],
    pub store: &'a TranslationStore,
    /// Languages requested from `store`.
    pub targets: &'a [String],
}

impl<'a> TrainData<'a> {
    fn resources(&self) -> Resources<'a> {
        Resources {
            vocab: self.vocab,
            dictionaries: self.dictionaries,
            store: self.store,
            targets: self.targets,
        }
    }

    pub fn digests(&self) -> BTreeMap<String, String> {
        let mut d = BTreeMap::new();
        d.insert("train".into(), sha256_hex(crate::data::to_jsonl(self.train).as_bytes()));
        d.insert("vocab".into(), sha256_hex(self.vocab.to_file_string().as_bytes()));
        for dict in self.dictionaries {
            d.insert(
                format!("dictionary:{}-{}", dict.src_lang, dict.tgt_lang),
                sha256_hex(dict.to_file_string().as_bytes()),
            );
        }
        if !self.store.is_empty() {
            d.insert("translations".into(), sha256_hex(self.store.to_jsonl().as_bytes()));
        }
        d
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// θ* when the mode has a second stage.
    pub teacher: Option<ModelParams>,
    /// The model to evaluate.
    pub model: ModelParams,
    pub manifest: RunManifest,
}

/// Converts word-level gold to subword coordinates under `seg`.
pub fn target_for(ex: &Example, seg: &Segmentation) -> Option<Target> {
    Some(match ex.gold.as_ref()? {
        Gold::Label(l) => Target::Label(*l),
        Gold::Span { start, end } => {
            let first = seg.first_positions();
            let q = ex.context_offset();
            Target::Span {
                start: first[q + start],
                end: first[q + end],
            }
        }
        Gold::Tags(t) => Target::Tags(t.clone()),
    })
}

struct Item {
    view: AugmentedExample,
    seg: Segmentation,
    target: Option<Target>,
}

impl Item {
    fn new(view: AugmentedExample, vocab: &UnigramVocab) -> Result<Self> {
        let seg = match &view.segmentation {
            Some(s) => s.clone(),
            None => vocab.segment_words(&view.example.input_words())?,
        };
        let target = if view.label_available {
            target_for(&view.example, &seg)
        } else {
            None
        };
        Ok(Self { view, seg, target })
    }
}

/// Objective of one stage.
struct Objective<'a> {
    r1: Option<(StrategyKind, f64)>,
    r2: Option<(&'a ModelParams, f64)>,
}

struct Ctx<'a> {
    task: Task,
    config: &'a TrainConfig,
    data: TrainData<'a>,
    /// Source examples by id, for MT pairing.
    sources: HashMap<&'a str, &'a Example>,
}

impl<'a> Ctx<'a> {
    /// Fresh `A′` view of `item` for R1.
    fn r1_view<R: Rng + ?Sized>(&self, item: &Item, kind: StrategyKind, rng: &mut R) -> Result<AugmentedExample> {
        let ex = &item.view.example;
        if kind == StrategyKind::MachineTranslation {
            let source = self.sources.get(ex.id.as_str()).copied();
            let source_lang = source.map(|s| s.lang.as_str());
            let mut langs: Vec<String> = Vec::new();
            if let Some(src) = source_lang {
                if src != ex.lang {
                    langs.push(src.to_string());
                }
            }
            if !(self.config.mt_pair_with_source && source_lang.is_some_and(|s| s != ex.lang)) {
                langs.extend(
                    self.data
                        .targets
                        .iter()
                        .filter(|l| **l != ex.lang && self.data.store.get(&ex.id, l).is_some())
                        .cloned(),
                );
            }
            let Some(lang) = langs.choose(rng) else {
                return Ok(AugmentedExample::identity(ex));
            };
            if Some(lang.as_str()) == source_lang {
                let mut v = AugmentedExample::identity(source.expect("source known"));
                v.strategy = StrategyKind::MachineTranslation;
                v.alignment = vec![None; ex.n_input_words()];
                return Ok(v);
            }
            let base = source.unwrap_or(ex);
            let (mut views, _) = augment::translate(base, self.data.store, std::slice::from_ref(lang), self.task);
            let mut v = views.pop().expect("translation present");
            v.alignment = vec![None; ex.n_input_words()];
            return Ok(v);
        }
        let mut warnings = Vec::new();
        let mut views = augment::augment(
            ex,
            self.task,
            kind,
            &self.config.strategy_params(),
            &self.data.resources(),
            rng,
            &mut warnings,
        )?;
        Ok(views.swap_remove(0))
    }

    fn run_stage(
        &self,
        name: &str,
        items: &[Item],
        mut params: ModelParams,
        objective: &Objective<'_>,
    ) -> Result<(ModelParams, StageLog)> {
        let cfg = self.config;
        let mut batching = stream_rng(cfg.seed, Stream::Batching);
        let mut sampling = stream_rng(cfg.seed, Stream::Sampling);
        let mut noise = stream_rng(cfg.seed, Stream::Noise);
        let per_epoch = items.len().div_ceil(cfg.batch_size);
        let total = per_epoch * cfg.epochs;
        let mut adam = Adam::new(&params.tensors);
        let mut log = StageLog {
            name: name.to_string(),
            n_items: items.len(),
            n_labeled: items.iter().filter(|i| i.target.is_some()).count(),
            steps: Vec::with_capacity(total),
        };
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut step = 0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut batching);
            for batch in order.chunks(cfg.batch_size) {
                step += 1;
                let lr = lr_at(step, total, cfg.lr, cfg.warmup_frac);
                let (grads, entry) =
                    self.batch_step(items, batch, &params, objective, &mut sampling, &mut noise, step, lr)?;
                if !entry.total.is_finite() {
                    return Err(TrainError::NonFinite {
                        stage: name.to_string(),
                        step,
                        task: entry.task,
                        r1: entry.r1,
                        r2: entry.r2,
                    });
                }
                adam_step(&mut params.tensors, &grads, &mut adam, lr)?;
                log.steps.push(entry);
            }
        }
        Ok((params, log))
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_step(
        &self,
        items: &[Item],
        batch: &[usize],
        params: &ModelParams,
        objective: &Objective<'_>,
        sampling: &mut ChaCha8Rng,
        noise_rng: &mut ChaCha8Rng,
        step: usize,
        lr: f64,
    ) -> Result<(Vec<Tensor>, StepLog)> {
        let mut g = Graph::new();
        let pv = params.bind(&mut g);
        let teacher_vars = objective.r2.map(|(t, _)| t.bind(&mut g));
        let mut task_terms = Vec::new();
        let mut r1_terms = Vec::new();
        let mut r2_terms = Vec::new();
        let mut unlabeled_outputs: Vec<Prediction> = Vec::new();
        for &i in batch {
            let item = &items[i];
            let noise = model::draw_noise(params, item.seg.len(), item.view.noise_sigma, noise_rng)?;
            let h = model::encode_with(&mut g, params, &pv, &item.seg, noise.as_ref())?;
            let pred = model::predict(&mut g, params, &pv, h, &item.seg, None)?;
            match &item.target {
                Some(t) => task_terms.push(model::task_loss(&mut g, &pred, t)?),
                None => unlabeled_outputs.push(pred),
            }
            if let Some((kind, _)) = objective.r1 {
                let view = self.r1_view(item, kind, sampling)?;
                let view_seg = match &view.segmentation {
                    Some(s) => s.clone(),
                    None => self.data.vocab.segment_words(&view.example.input_words())?,
                };
                let view_noise = model::draw_noise(params, view_seg.len(), view.noise_sigma, noise_rng)?;
                let vh = model::encode_with(&mut g, params, &pv, &view_seg, view_noise.as_ref())?;
                let view_pred = model::predict(&mut g, params, &pv, vh, &view_seg, None)?;
                let align = ViewAlignment {
                    orig_seg: &item.seg,
                    aug_seg: &view_seg,
                    alignment: &view.alignment,
                    modified: &view.modified,
                };
                r1_terms.push(consistency::r1_example_consistency(
                    &mut g,
                    &pred,
                    &view_pred,
                    &align,
                    self.config.stopgrad,
                )?);
            }
            if let (Some((teacher, _)), Some(tv)) = (objective.r2, &teacher_vars) {
                let th = model::encode_with(&mut g, teacher, tv, &item.seg, noise.as_ref())?;
                let tpred = model::predict(&mut g, teacher, tv, th, &item.seg, None)?.detach(&mut g);
                r2_terms.push(consistency::r2_from_predictions(&mut g, &tpred, &pred)?);
            }
        }
        let n_task = task_terms.len();
        let task = mean(&mut g, &task_terms)?;
        let mut total = task;
        let r1 = match objective.r1 {
            Some((_, w)) => {
                let m = mean(&mut g, &r1_terms)?;
                let weighted = g.scale(m, w);
                total = g.add(total, weighted)?;
                Some(m)
            }
            None => None,
        };
        let r2 = match objective.r2 {
            Some((_, w)) => {
                let m = mean(&mut g, &r2_terms)?;
                let weighted = g.scale(m, w);
                total = g.add(total, weighted)?;
                Some(m)
            }
            None => None,
        };
        let unlabeled_task_grad = if self.config.instrument {
            g.backward(task)?;
            let mut worst: f64 = 0.0;
            for p in &unlabeled_outputs {
                for v in p.parts() {
                    for x in g.grad(v).data() {
                        worst = worst.max(x.abs());
                    }
                }
            }
            g.zero_grad();
            Some(worst)
        } else {
            None
        };
        g.backward(total)?;
        let grads = pv.vars.iter().map(|&v| g.grad(v)).collect();
        let value = |v: Option<Var>| v.map(|v| g.scalar_value(v)).unwrap_or(0.0);
        let entry = StepLog {
            step,
            lr,
            total: g.scalar_value(total),
            task: g.scalar_value(task),
            r1: value(r1),
            r2: value(r2),
            n_task,
            n_unlabeled: batch.len() - n_task,
            unlabeled_task_grad,
        };
        Ok((grads, entry))
    }
}

fn mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(g.leaf(Tensor::scalar(0.0)));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

fn model_config(task: Task, vocab: &UnigramVocab, n_labels: usize, cfg: &TrainConfig) -> ModelConfig {
    ModelConfig {
        task,
        vocab_size: vocab.len(),
        n_labels,
        d: cfg.d,
        max_len: cfg.max_len,
        pooling: cfg.pooling,
        init_std: cfg.init_std,
    }
}

/// Runs the configured mode end to end.
pub fn train(data: TrainData<'_>, config: &TrainConfig) -> Result<TrainOutcome> {
    let task = data.train.task;
    config.validate(task)?;
    if data.train.is_empty() {
        return Err(TrainError::Config("training corpus is empty".into()));
    }
    let ctx = Ctx {
        task,
        config,
        data,
        sources: data.train.examples.iter().map(|e| (e.id.as_str(), e)).collect(),
    };
    let res = data.resources();
    let sp = config.strategy_params();
    let mut warnings = Vec::new();
    let fresh = || -> Result<ModelParams> {
        let mut init = stream_rng(config.seed, Stream::Init);
        Ok(ModelParams::init(model_config(task, data.vocab, data.train.n_labels, config), &mut init)?)
    };
    let to_items = |views: Vec<AugmentedExample>| -> Result<Vec<Item>> {
        views.into_iter().map(|v| Item::new(v, data.vocab)).collect()
    };
    let source_items = || to_items(data.train.examples.iter().map(AugmentedExample::identity).collect());
    let translated_corpus = |rng: &mut ChaCha8Rng, warnings: &mut Vec<String>| -> Result<Vec<Item>> {
        let mt = augment::build_augmented_corpus(data.train, StrategyKind::MachineTranslation, &sp, &res, rng)?;
        warnings.extend(mt.warnings.iter().cloned());
        to_items(mt.items())
    };

    let mut stages = Vec::new();
    let (teacher, model) = match config.mode {
        Mode::Baseline => {
            let items = if config.setting == Setting::TranslateTrainAll {
                let mut aug = stream_rng(config.seed, Stream::Augmentation);
                translated_corpus(&mut aug, &mut warnings)?
            } else {
                source_items()?
            };
            let labeled: Vec<Item> = items.into_iter().filter(|i| i.target.is_some()).collect();
            let (p, log) = ctx.run_stage("baseline", &labeled, fresh()?, &Objective { r1: None, r2: None })?;
            stages.push(log);
            (None, p)
        }
        Mode::R1Only | Mode::R2Only | Mode::Xtune => {
            let with_r1 = config.mode != Mode::R2Only;
            let stage1_items = if config.stage1_uses_translations() {
                let mut aug = stream_rng(config.seed, Stream::Augmentation);
                translated_corpus(&mut aug, &mut warnings)?
            } else {
                source_items()?
            };
            let objective = Objective {
                r1: with_r1.then_some((config.a_star, config.stage1_r1_weight)),
                r2: None,
            };
            let (teacher, log) = ctx.run_stage("stage1", &stage1_items, fresh()?, &objective)?;
            stages.push(log);
            if config.mode == Mode::R1Only {
                (None, teacher)
            } else {
                let lambda1 = if config.mode == Mode::R2Only { 0.0 } else { config.lambda1 };
                let items = stage2_items(&ctx, lambda1, config.lambda2, &mut warnings)?;
                let objective = Objective {
                    r1: (lambda1 > 0.0).then_some((config.a_prime, lambda1)),
                    r2: (config.lambda2 > 0.0).then_some((&teacher, config.lambda2)),
                };
                let init = if config.warm_start_student {
                    teacher.clone()
                } else {
                    fresh()?
                };
                let (student, log) = ctx.run_stage("stage2", &items, init, &objective)?;
                stages.push(log);
                (Some(teacher), student)
            }
        }
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        task,
        seed: config.seed,
        config: config.clone(),
        inputs: data.digests(),
        stages,
        warnings,
        metrics: BTreeMap::new(),
    };
    Ok(TrainOutcome {
        teacher,
        model,
        manifest,
    })
}

/// `D_A` under `A`, keeping only members that feed some loss term.
fn stage2_items(ctx: &Ctx<'_>, lambda1: f64, lambda2: f64, warnings: &mut Vec<String>) -> Result<Vec<Item>> {
    let cfg = ctx.config;
    let data = ctx.data;
    let views = if cfg.a == StrategyKind::Identity {
        // Identity views coincide with their originals, so D_A = D.
        data.train.examples.iter().map(AugmentedExample::identity).collect()
    } else {
        let mut aug = stream_rng(cfg.seed, Stream::Augmentation);
        let da = augment::build_augmented_corpus(data.train, cfg.a, &cfg.strategy_params(), &data.resources(), &mut aug)?;
        warnings.extend(da.warnings.iter().cloned());
        da.items()
    };
    let regularized = lambda1 > 0.0 || lambda2 > 0.0;
    Ok(views
        .into_iter()
        .map(|v| Item::new(v, data.vocab))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|i| regularized || i.target.is_some())
        .collect())
}
