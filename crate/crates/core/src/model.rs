//! A one-layer position-aware encoder and the three task heads.
//!
//! Every head returns log-probabilities laid out as rows of a 2-D tensor:
//! `[1, n_label]` for classification, two `[1, n_subword]` rows for span
//! extraction and `[n_word, n_label]` for sequence labeling. Regularizers
//! consume these rows directly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::data::Task;
use crate::tokenizer::Segmentation;

pub const CHECKPOINT_MAGIC: &str = "xtune-checkpoint v1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("input of {len} subwords exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("{0}")]
    Contract(String),
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Word representation for sequence labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    FirstSubword,
    Average,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::FirstSubword => "first-subword",
            Pooling::Average => "average",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "first-subword" | "first" => Ok(Pooling::FirstSubword),
            "average" | "avg" | "mean" => Ok(Pooling::Average),
            other => Err(format!("unknown pooling {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub vocab_size: usize,
    pub n_labels: usize,
    pub d: usize,
    pub max_len: usize,
    /// Used by sequence labeling only.
    pub pooling: Pooling,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn new(task: Task, vocab_size: usize, n_labels: usize) -> Self {
        Self {
            task,
            vocab_size,
            n_labels,
            d: 16,
            max_len: 64,
            pooling: Pooling::FirstSubword,
            init_std: 0.02,
        }
    }

    fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let d = self.d;
        let mut s = vec![
            ("tok_emb", vec![self.vocab_size, d]),
            ("pos_emb", vec![self.max_len, d]),
            ("mix_w", vec![d, d]),
            ("mix_b", vec![1, d]),
        ];
        match self.task {
            Task::Classification => {
                s.push(("cls_w", vec![d, self.n_labels]));
                s.push(("cls_b", vec![1, self.n_labels]));
            }
            Task::SpanExtraction => {
                s.push(("start_w", vec![d, 1]));
                s.push(("end_w", vec![d, 1]));
            }
            Task::SequenceLabeling => {
                s.push(("tag_w", vec![d, self.n_labels]));
                s.push(("tag_b", vec![1, self.n_labels]));
            }
        }
        s
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return Err(ModelError::Contract("d, max_len and vocab_size must be positive".into()));
        }
        if self.task != Task::SpanExtraction && self.n_labels == 0 {
            return Err(ModelError::Contract("n_labels must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder and head parameters in a fixed order (see [`ModelParams::names`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
}

/// Parameter leaves of one graph, in [`ModelParams`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: Vec<Var>,
}

impl ParamVars {
    fn tok_emb(&self) -> Var {
        self.vars[0]
    }
    fn pos_emb(&self) -> Var {
        self.vars[1]
    }
    fn mix_w(&self) -> Var {
        self.vars[2]
    }
    fn mix_b(&self) -> Var {
        self.vars[3]
    }
    fn head(&self, i: usize) -> Var {
        self.vars[4 + i]
    }
}

impl ModelParams {
    /// Embeddings and weights drawn from N(0, init_std²), biases zero.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| ModelError::Contract(format!("init_std: {e}")))?;
        let tensors = config
            .shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with("_b") {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| normal.sample(rng)).collect()
                };
                Tensor::new(shape, data).expect("shape matches buffer")
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.config.shapes().into_iter().map(|(n, _)| n).collect()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            vars: self.tensors.iter().map(|t| g.leaf(t.clone())).collect(),
        }
    }

    pub fn same_architecture(&self, other: &ModelParams) -> bool {
        self.config.task == other.config.task
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
            && self.tensors.len() == other.tensors.len()
    }

    pub fn to_checkpoint_string(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(out, "task {}", c.task.name()).unwrap();
        writeln!(out, "vocab_size {}", c.vocab_size).unwrap();
        writeln!(out, "n_labels {}", c.n_labels).unwrap();
        writeln!(out, "d {}", c.d).unwrap();
        writeln!(out, "max_len {}", c.max_len).unwrap();
        writeln!(out, "pooling {}", c.pooling.name()).unwrap();
        writeln!(out, "init_std {}", c.init_std).unwrap();
        for (name, t) in self.names().into_iter().zip(&self.tensors) {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(out, "tensor {name} {}", dims.join(" ")).unwrap();
            let cols = *t.shape().last().unwrap_or(&1);
            for row in t.data().chunks(cols.max(1)) {
                let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", vals.join(" ")).unwrap();
            }
        }
        writeln!(out, "end").unwrap();
        out
    }

    pub fn parse_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines.next().ok_or_else(|| ModelError::Checkpoint {
                line: 0,
                message: format!("unexpected end of file, expected {what}"),
            })
        };
        let bad = |line: usize, message: String| ModelError::Checkpoint { line, message };
        let (n, magic) = next("header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(bad(n, format!("expected {CHECKPOINT_MAGIC:?}")));
        }
        let mut header = |key: &str| -> Result<(usize, String)> {
            let (n, line) = next(key)?;
            match line.split_once(' ') {
                Some((k, v)) if k == key => Ok((n, v.to_string())),
                _ => Err(bad(n, format!("expected `{key} <value>`"))),
            }
        };
        let parse_usize = |(n, v): (usize, String)| -> Result<usize> {
            v.parse().map_err(|e| bad(n, format!("{e}")))
        };
        let (tn, task) = header("task")?;
        let task: Task = task.parse().map_err(|e| bad(tn, e))?;
        let vocab_size = parse_usize(header("vocab_size")?)?;
        let n_labels = parse_usize(header("n_labels")?)?;
        let d = parse_usize(header("d")?)?;
        let max_len = parse_usize(header("max_len")?)?;
        let (pn, pooling) = header("pooling")?;
        let pooling: Pooling = pooling.parse().map_err(|e| bad(pn, e))?;
        let (sn, init_std) = header("init_std")?;
        let init_std: f64 = init_std.parse().map_err(|e| bad(sn, format!("{e}")))?;
        let config = ModelConfig {
            task,
            vocab_size,
            n_labels,
            d,
            max_len,
            pooling,
            init_std,
        };
        config.validate()?;
        let mut tensors = Vec::new();
        for (name, shape) in config.shapes() {
            let (n, line) = next("tensor header")?;
            let mut parts = line.split(' ');
            if parts.next() != Some("tensor") || parts.next() != Some(name) {
                return Err(bad(n, format!("expected `tensor {name} ...`")));
            }
            let dims: Vec<usize> = parts
                .map(|p| p.parse().map_err(|e| bad(n, format!("{e}"))))
                .collect::<Result<_>>()?;
            if dims != shape {
                return Err(bad(n, format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
            }
            let rows: usize = shape[..shape.len() - 1].iter().product();
            let mut data = Vec::with_capacity(shape.iter().product());
            for _ in 0..rows {
                let (n, line) = next("tensor row")?;
                let row: Vec<f64> = line
                    .split(' ')
                    .map(|v| v.parse::<f64>().map_err(|e| bad(n, format!("{e}"))))
                    .collect::<Result<_>>()?;
                if row.len() != shape[shape.len() - 1] {
                    return Err(bad(n, format!("row has {} values, expected {}", row.len(), shape[shape.len() - 1])));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(bad(n, "non-finite value".into()));
                }
                data.extend(row);
            }
            tensors.push(Tensor::new(shape, data)?);
        }
        let (n, end) = next("end")?;
        if end != "end" {
            return Err(bad(n, "expected `end`".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_checkpoint(&fs::read_to_string(path)?)
    }
}

/// Output distributions of one forward pass (log-probabilities).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    /// `[1, n_label]`.
    Classification(Var),
    /// `[1, n_subword]` each.
    Span { start: Var, end: Var },
    /// `[n_word, n_label]`.
    Labeling(Var),
}

impl Prediction {
    pub fn task(&self) -> Task {
        match self {
            Prediction::Classification(_) => Task::Classification,
            Prediction::Span { .. } => Task::SpanExtraction,
            Prediction::Labeling(_) => Task::SequenceLabeling,
        }
    }

    /// The distribution nodes, in a fixed per-task order.
    pub fn parts(&self) -> Vec<Var> {
        match *self {
            Prediction::Classification(v) | Prediction::Labeling(v) => vec![v],
            Prediction::Span { start, end } => vec![start, end],
        }
    }

    pub fn detach(&self, g: &mut Graph) -> Prediction {
        match *self {
            Prediction::Classification(v) => Prediction::Classification(g.detach(v)),
            Prediction::Span { start, end } => Prediction::Span {
                start: g.detach(start),
                end: g.detach(end),
            },
            Prediction::Labeling(v) => Prediction::Labeling(g.detach(v)),
        }
    }
}

/// Hidden states `tanh((E[ids] + P[0..n) + ε)·W + b)`, shaped `[n_subword, d]`,
/// with `ε ~ N(0, noise_sigma²)` per element.
pub fn encode<R: Rng + ?Sized>(
    g: &mut Graph,
    params: &ModelParams,
    pv: &ParamVars,
    seg: &Segmentation,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Var> {
    let noise = draw_noise(params, seg.len(), noise_sigma, rng)?;
    encode_with(g, params, pv, seg, noise.as_ref())
}

/// Embedding noise for an input of `n` subwords; `None` when `sigma` is 0.
pub fn draw_noise<R: Rng + ?Sized>(params: &ModelParams, n: usize, sigma: f64, rng: &mut R) -> Result<Option<Tensor>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(ModelError::Contract(format!("noise_sigma {sigma} must be finite and >= 0")));
    }
    if sigma == 0.0 {
        return Ok(None);
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let d = params.config.d;
    let data: Vec<f64> = (0..n * d).map(|_| normal.sample(rng)).collect();
    Ok(Some(Tensor::new(vec![n, d], data)?))
}

/// [`encode`] with a fixed `[n_subword, d]` noise tensor.
pub fn encode_with(
    g: &mut Graph,
    params: &ModelParams,
    pv: &ParamVars,
    seg: &Segmentation,
    noise: Option<&Tensor>,
) -> Result<Var> {
    let n = seg.len();
    if n == 0 {
        return Err(ModelError::EmptyInput);
    }
    if n > params.config.max_len {
        return Err(ModelError::TooLong {
            len: n,
            max_len: params.config.max_len,
        });
    }
    let emb = g.embedding_lookup(pv.tok_emb(), &seg.ids)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = g.gather_rows(pv.pos_emb(), &positions)?;
    let mut x = g.add(emb, pos)?;
    if let Some(eps) = noise {
        let eps = g.leaf(eps.clone());
        x = g.add(x, eps)?;
    }
    let z = g.matmul(x, pv.mix_w())?;
    let z = g.add_bias(z, pv.mix_b())?;
    Ok(g.tanh(z))
}

/// Applies the task head to hidden states `h` of segmentation `seg`.
///
/// `pooling` must be `None` except for sequence labeling, where `None` means
/// the configured pooling.
pub fn predict(
    g: &mut Graph,
    params: &ModelParams,
    pv: &ParamVars,
    h: Var,
    seg: &Segmentation,
    pooling: Option<Pooling>,
) -> Result<Prediction> {
    let task = params.config.task;
    if pooling.is_some() && task != Task::SequenceLabeling {
        return Err(ModelError::Contract(format!("pooling is only defined for sequence labeling, not {task}")));
    }
    match task {
        Task::Classification => {
            let pooled = g.mean_rows(h)?;
            let logits = g.matmul(pooled, pv.head(0))?;
            let logits = g.add_bias(logits, pv.head(1))?;
            Ok(Prediction::Classification(g.log_softmax(logits, 1)?))
        }
        Task::SpanExtraction => {
            let n = seg.len();
            let mut row = |w: Var| -> Result<Var> {
                let s = g.matmul(h, w)?;
                let s = g.reshape(s, vec![1, n])?;
                Ok(g.log_softmax(s, 1)?)
            };
            let start = row(pv.head(0))?;
            let end = row(pv.head(1))?;
            Ok(Prediction::Span { start, end })
        }
        Task::SequenceLabeling => {
            let words = match pooling.unwrap_or(params.config.pooling) {
                Pooling::FirstSubword => g.gather_rows(h, &seg.first_positions())?,
                Pooling::Average => {
                    let spans = seg.word_spans();
                    let mut avg = vec![0.0; spans.len() * seg.len()];
                    for (w, span) in spans.iter().enumerate() {
                        let weight = 1.0 / span.len() as f64;
                        for p in span.clone() {
                            avg[w * seg.len() + p] = weight;
                        }
                    }
                    let a = g.leaf(Tensor::new(vec![spans.len(), seg.len()], avg)?);
                    g.matmul(a, h)?
                }
            };
            let logits = g.matmul(words, pv.head(0))?;
            let logits = g.add_bias(logits, pv.head(1))?;
            Ok(Prediction::Labeling(g.log_softmax(logits, 1)?))
        }
    }
}

/// Encoder followed by the head with the configured pooling.
pub fn forward<R: Rng + ?Sized>(
    g: &mut Graph,
    params: &ModelParams,
    pv: &ParamVars,
    seg: &Segmentation,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Prediction> {
    let h = encode(g, params, pv, seg, noise_sigma, rng)?;
    predict(g, params, pv, h, seg, None)
}

/// Gold payload in subword coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Label(usize),
    /// Subword positions.
    Span { start: usize, end: usize },
    Tags(Vec<usize>),
}

/// Negative log-likelihood of `target`; span loss sums start and end, the
/// sequence loss averages over words.
pub fn task_loss(g: &mut Graph, pred: &Prediction, target: &Target) -> Result<Var> {
    let out_of_range = |what: &str, i: usize, n: usize| {
        ModelError::Contract(format!("{what} {i} out of range for {n} classes"))
    };
    match (pred, target) {
        (Prediction::Classification(lp), Target::Label(l)) => {
            let n = g.shape(*lp)[1];
            if *l >= n {
                return Err(out_of_range("label", *l, n));
            }
            let picked = g.take(*lp, &[*l])?;
            Ok(g.scale(picked, -1.0))
        }
        (Prediction::Span { start, end }, Target::Span { start: s, end: e }) => {
            let n = g.shape(*start)[1];
            if *s >= n || *e >= n {
                return Err(out_of_range("span position", (*s).max(*e), n));
            }
            let a = g.take(*start, &[*s])?;
            let b = g.take(*end, &[*e])?;
            let both = g.add(a, b)?;
            Ok(g.scale(both, -1.0))
        }
        (Prediction::Labeling(lp), Target::Tags(tags)) => {
            let (rows, n) = (g.shape(*lp)[0], g.shape(*lp)[1]);
            if tags.len() != rows {
                return Err(ModelError::Contract(format!("{} tags for {rows} words", tags.len())));
            }
            if let Some(&t) = tags.iter().find(|&&t| t >= n) {
                return Err(out_of_range("tag", t, n));
            }
            let idx: Vec<usize> = tags.iter().enumerate().map(|(i, &t)| i * n + t).collect();
            let picked = g.take(*lp, &idx)?;
            let total = g.sum(picked);
            Ok(g.scale(total, -1.0 / rows as f64))
        }
        _ => Err(ModelError::Contract(format!(
            "gold payload does not match a {} prediction",
            pred.task()
        ))),
    }
}

/// Forward values of one prediction, as plain rows.
#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Classification(Vec<f64>),
    Span { start: Vec<f64>, end: Vec<f64> },
    Labeling(Vec<Vec<f64>>),
}

impl Output {
    pub fn read(g: &Graph, pred: &Prediction) -> Self {
        match *pred {
            Prediction::Classification(v) => Output::Classification(g.value(v).data().to_vec()),
            Prediction::Span { start, end } => Output::Span {
                start: g.value(start).data().to_vec(),
                end: g.value(end).data().to_vec(),
            },
            Prediction::Labeling(v) => {
                let t = g.value(v);
                Output::Labeling((0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect())
            }
        }
    }
}

/// Deterministic noise-free forward pass.
pub fn infer(params: &ModelParams, seg: &Segmentation) -> Result<Output> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g);
    // sigma = 0 never draws, so any generator will do.
    let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let pred = forward(&mut g, params, &pv, seg, 0.0, &mut unused)?;
    Ok(Output::read(&g, &pred))
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn params(task: Task, n_labels: usize, std: f64, seed: u64) -> ModelParams {
        let mut c = ModelConfig::new(task, 7, n_labels);
        c.d = 4;
        c.max_len = 6;
        c.init_std = std;
        let mut p = ModelParams::init(c, &mut rng(seed)).unwrap();
        for t in &mut p.tensors {
            for v in t.data_mut() {
                if *v == 0.0 {
                    *v = 0.1;
                }
            }
        }
        p
    }

    fn seg() -> Segmentation {
        Segmentation::from_words(vec![vec![1, 2], vec![3], vec![4, 5, 6]])
    }

    fn sums_to_one(rows: &[f64], width: usize) {
        for r in rows.chunks(width) {
            let s: f64 = r.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9, "{s}");
        }
    }

    #[test]
    fn deterministic_without_noise_and_continuous_in_sigma() {
        let p = params(Task::Classification, 3, 0.5, 1);
        let s = seg();
        let run = |sigma: f64, seed: u64| {
            let mut g = Graph::new();
            let pv = p.bind(&mut g);
            let h = encode(&mut g, &p, &pv, &s, sigma, &mut rng(seed)).unwrap();
            g.value(h).data().to_vec()
        };
        assert_eq!(run(0.0, 1), run(0.0, 2));
        let a = run(0.0, 3);
        let b = run(1e-8, 3);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
        assert_ne!(a, b);
    }

    #[test]
    fn over_length_input_rejected() {
        let p = params(Task::Classification, 3, 0.5, 1);
        let long = Segmentation::single(vec![1; 7]);
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        assert!(matches!(
            encode(&mut g, &p, &pv, &long, 0.0, &mut rng(0)),
            Err(ModelError::TooLong { len: 7, max_len: 6 })
        ));
    }

    #[test]
    fn noisy_embedding_mean_matches_clean() {
        // With W = I and b = 0 the pre-activation is the noisy embedding itself.
        let mut p = params(Task::Classification, 2, 0.5, 2);
        let d = p.config.d;
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        p.tensors[2] = Tensor::new(vec![d, d], eye).unwrap();
        p.tensors[3] = Tensor::zeros(vec![1, d]);
        let s = Segmentation::single(vec![3]);
        let sigma = 0.1;
        let trials = 10_000;
        let mut r = rng(5);
        let mut mean = vec![0.0; d];
        for _ in 0..trials {
            let mut g = Graph::new();
            let pv = p.bind(&mut g);
            let h = encode(&mut g, &p, &pv, &s, sigma, &mut r).unwrap();
            for (m, v) in mean.iter_mut().zip(g.value(h).data()) {
                *m += v.atanh() / trials as f64;
            }
        }
        let clean: Vec<f64> = (0..d)
            .map(|j| p.tensors[0].row(3)[j] + p.tensors[1].row(0)[j])
            .collect();
        let bound = 3.0 * sigma / (trials as f64).sqrt();
        for (m, c) in mean.iter().zip(&clean) {
            assert!((m - c).abs() < bound, "{m} vs {c}");
        }
    }

    #[test]
    fn heads_are_normalized_and_shaped() {
        let s = seg();
        for (task, n) in [
            (Task::Classification, 3),
            (Task::SpanExtraction, 0),
            (Task::SequenceLabeling, 4),
        ] {
            let p = params(task, n, 0.7, 3);
            let mut g = Graph::new();
            let pv = p.bind(&mut g);
            let pred = forward(&mut g, &p, &pv, &s, 0.0, &mut rng(0)).unwrap();
            match pred {
                Prediction::Classification(v) => {
                    assert_eq!(g.shape(v), &[1, 3]);
                    sums_to_one(g.value(v).data(), 3);
                }
                Prediction::Span { start, end } => {
                    for v in [start, end] {
                        assert_eq!(g.shape(v), &[1, 6]);
                        sums_to_one(g.value(v).data(), 6);
                    }
                }
                Prediction::Labeling(v) => {
                    assert_eq!(g.shape(v), &[3, 4]);
                    sums_to_one(g.value(v).data(), 4);
                }
            }
        }
    }

    #[test]
    fn degenerate_single_label_softmax() {
        let p = params(Task::Classification, 1, 0.7, 3);
        match infer(&p, &seg()).unwrap() {
            Output::Classification(v) => assert_eq!(v, vec![0.0]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn span_head_three_subwords() {
        let p = params(Task::SpanExtraction, 0, 0.7, 3);
        let s = Segmentation::from_words(vec![vec![1, 2], vec![3]]);
        match infer(&p, &s).unwrap() {
            Output::Span { start, end } => {
                assert_eq!(start.len(), 3);
                assert_eq!(end.len(), 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn poolings_coincide_on_single_piece_word() {
        let p = params(Task::SequenceLabeling, 3, 0.7, 4);
        let s = Segmentation::from_words(vec![vec![2]]);
        let run = |pool| {
            let mut g = Graph::new();
            let pv = p.bind(&mut g);
            let h = encode(&mut g, &p, &pv, &s, 0.0, &mut rng(0)).unwrap();
            let pred = predict(&mut g, &p, &pv, h, &s, Some(pool)).unwrap();
            Output::read(&g, &pred)
        };
        assert_eq!(run(Pooling::FirstSubword), run(Pooling::Average));
    }

    #[test]
    fn pooling_flag_rejected_outside_labeling() {
        let p = params(Task::Classification, 2, 0.7, 4);
        let s = seg();
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let h = encode(&mut g, &p, &pv, &s, 0.0, &mut rng(0)).unwrap();
        assert!(predict(&mut g, &p, &pv, h, &s, Some(Pooling::Average)).is_err());
    }

    #[test]
    fn analytic_task_losses() {
        let mut g = Graph::new();
        let zero = g.leaf(Tensor::from_rows(&[vec![0.0, -1e300]]).unwrap());
        let l = task_loss(&mut g, &Prediction::Classification(zero), &Target::Label(0)).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);

        let uni2 = g.leaf(Tensor::from_rows(&[vec![0.5f64.ln(); 2]]).unwrap());
        let l = task_loss(&mut g, &Prediction::Classification(uni2), &Target::Label(1)).unwrap();
        assert!((g.scalar_value(l) - 2f64.ln()).abs() < 1e-12);

        let uni4 = g.leaf(Tensor::from_rows(&[vec![0.25f64.ln(); 4]]).unwrap());
        let pred = Prediction::Span { start: uni4, end: uni4 };
        for (s, e) in [(0, 3), (2, 2)] {
            let l = task_loss(&mut g, &pred, &Target::Span { start: s, end: e }).unwrap();
            assert!((g.scalar_value(l) - 2.0 * 4f64.ln()).abs() < 1e-12);
        }
        assert!(task_loss(&mut g, &pred, &Target::Span { start: 4, end: 0 }).is_err());
        assert!(task_loss(&mut g, &pred, &Target::Label(0)).is_err());
    }

    #[test]
    fn task_loss_gradients_match_finite_differences() {
        let s = seg();
        let cases = [
            (Task::Classification, 3, Target::Label(2)),
            (Task::SpanExtraction, 0, Target::Span { start: 2, end: 4 }),
            (Task::SequenceLabeling, 3, Target::Tags(vec![0, 2, 1])),
        ];
        for (task, n, target) in cases {
            for pooling in [Pooling::FirstSubword, Pooling::Average] {
                let mut p = params(task, n, 0.6, 9);
                p.config.pooling = pooling;
                let cfg = p.clone();
                let err = grad_check(&p.tensors, 1e-6, |g, vars| {
                    let pv = ParamVars { vars: vars.to_vec() };
                    let pred = forward(g, &cfg, &pv, &s, 0.0, &mut rng(0)).map_err(unwrap_ad)?;
                    task_loss(g, &pred, &target).map_err(unwrap_ad)
                })
                .unwrap();
                assert!(err < 1e-4, "{task} {pooling:?}: {err}");
            }
        }
    }

    fn unwrap_ad(e: ModelError) -> AutodiffError {
        match e {
            ModelError::Autodiff(a) => a,
            other => panic!("{other}"),
        }
    }

    #[test]
    fn labeling_rows_follow_word_count_under_resegmentation() {
        let p = params(Task::SequenceLabeling, 2, 0.5, 5);
        for words in [
            vec![vec![1], vec![2], vec![3]],
            vec![vec![1, 4], vec![2, 5, 6], vec![3]],
        ] {
            match infer(&p, &Segmentation::from_words(words)).unwrap() {
                Output::Labeling(rows) => assert_eq!(rows.len(), 3),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = params(Task::SequenceLabeling, 3, 0.3, 8);
        let text = p.to_checkpoint_string();
        let back = ModelParams::parse_checkpoint(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_checkpoint_string(), text);
        let broken = text.replacen("tensor pos_emb", "tensor pos", 1);
        assert!(matches!(
            ModelParams::parse_checkpoint(&broken),
            Err(ModelError::Checkpoint { .. })
        ));
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let c = ModelConfig::new(Task::Classification, 10, 3);
        let a = ModelParams::init(c.clone(), &mut rng(1)).unwrap();
        let b = ModelParams::init(c, &mut rng(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.tensors[3].data().iter().all(|&v| v == 0.0));
        assert!(a.tensors[5].data().iter().all(|&v| v == 0.0));
        assert!(a.tensors[0].data().iter().all(|v| v.abs() < 0.2));
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use crate::tokenizer::{UnigramVocab, DEFAULT_MARKER};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(task: Task, pooling: Pooling, seed: u64) -> ModelParams {
        let n = if task == Task::SpanExtraction { 0 } else { 4 };
        let mut c = ModelConfig::new(task, 12, n);
        c.d = 5;
        c.max_len = 40;
        c.init_std = 0.5;
        c.pooling = pooling;
        ModelParams::init(c, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn vocab() -> UnigramVocab {
        let pieces = ["\u{2581}", "a", "b", "c", "\u{2581}a", "ab", "bc", "\u{2581}ab", "abc", "ca", "cc", "\u{2581}c"];
        let lp = -(pieces.len() as f64).ln();
        UnigramVocab::new(pieces.iter().map(|p| (p.to_string(), lp)).collect(), DEFAULT_MARKER).unwrap()
    }

    fn rows_normalized(rows: &[Vec<f64>]) -> bool {
        rows.iter().all(|r| (r.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn predictions_are_normalized(
            ws in prop::collection::vec("[abc]{1,5}", 1..6),
            seed in any::<u64>(),
            average in any::<bool>(),
        ) {
            let v = vocab();
            let seg = v.segment_words(&ws).unwrap();
            let pooling = if average { Pooling::Average } else { Pooling::FirstSubword };
            for task in [Task::Classification, Task::SpanExtraction, Task::SequenceLabeling] {
                let ok = match infer(&params(task, pooling, seed), &seg).unwrap() {
                    Output::Classification(p) => rows_normalized(&[p]),
                    Output::Span { start, end } => rows_normalized(&[start, end]),
                    Output::Labeling(rows) => rows_normalized(&rows),
                };
                prop_assert!(ok, "{task} output not normalized");
            }
        }

        #[test]
        fn labeling_rows_follow_words(
            ws in prop::collection::vec("[abc]{1,5}", 1..6),
            seed in any::<u64>(),
            alpha in 0.0f64..1.0,
        ) {
            let v = vocab();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let segs = [v.segment_words(&ws).unwrap(), v.sample_words(&ws, alpha, &mut rng).unwrap()];
            for pooling in [Pooling::FirstSubword, Pooling::Average] {
                let p = params(Task::SequenceLabeling, pooling, seed);
                for seg in &segs {
                    let Output::Labeling(rows) = infer(&p, seg).unwrap() else { unreachable!() };
                    prop_assert_eq!(rows.len(), ws.len());
                }
            }
        }
    }
}
