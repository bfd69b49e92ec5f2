//! Example consistency (R1) and model consistency (R2).
//!
//! All distributions arrive as log-probability rows (see [`crate::model`]).

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::model::{self, ModelError, ModelParams, Prediction};
use crate::tokenizer::Segmentation;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, ConsistencyError>;

fn same_shape(g: &Graph, p: Var, q: Var, op: &str) -> Result<()> {
    if g.shape(p) != g.shape(q) {
        return Err(ConsistencyError::Contract(format!(
            "{op}: distributions of shape {:?} and {:?}",
            g.shape(p),
            g.shape(q)
        )));
    }
    Ok(())
}

/// `Σ p_i (log p_i − log q_i)` summed over every row, with both log terms
/// floored at `ln 1e-12`.
pub fn kl(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    same_shape(g, p, q, "kl")?;
    let floor = PROB_FLOOR.ln();
    let lp = g.clamp_min(p, floor);
    let lq = g.clamp_min(q, floor);
    let weight = g.exp(p);
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(weight, diff)?;
    Ok(g.sum(terms))
}

/// `KL(P‖Q) + KL(Q‖P)`; with `stopgrad` the first argument of each term is
/// detached, so P's parents only see the second term and Q's only the first.
pub fn symmetric_kl(g: &mut Graph, p: Var, q: Var, stopgrad: bool) -> Result<Var> {
    same_shape(g, p, q, "symmetric_kl")?;
    let (p_fixed, q_fixed) = if stopgrad { (g.detach(p), g.detach(q)) } else { (p, q) };
    let a = kl(g, p_fixed, q)?;
    let b = kl(g, q_fixed, p)?;
    Ok(g.add(a, b)?)
}

pub fn symmetric_kl_stopgrad(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    symmetric_kl(g, p, q, true)
}

fn zero(g: &mut Graph) -> Var {
    g.leaf(Tensor::scalar(0.0))
}

/// Subword positions R1 may compare for span extraction: first subwords of
/// words that are aligned, unmodified and identically segmented on both
/// sides. Returns `(original positions, augmented positions)`.
pub fn span_alignment(
    orig_seg: &Segmentation,
    aug_seg: &Segmentation,
    alignment: &[Option<usize>],
    modified: &[bool],
) -> (Vec<usize>, Vec<usize>) {
    let orig_first = orig_seg.first_positions();
    let aug_first = aug_seg.first_positions();
    let mut pos_o = Vec::new();
    let mut pos_a = Vec::new();
    for (i, a) in alignment.iter().enumerate() {
        let Some(j) = *a else { continue };
        if modified.get(j).copied().unwrap_or(true) || i >= orig_first.len() || j >= aug_first.len() {
            continue;
        }
        if orig_seg.word_pieces(i) == aug_seg.word_pieces(j) {
            pos_o.push(orig_first[i]);
            pos_a.push(aug_first[j]);
        }
    }
    (pos_o, pos_a)
}

/// Log-probabilities of `dist` (`[1, n]`) at `positions`, renormalized.
fn restrict(g: &mut Graph, dist: Var, positions: &[usize]) -> Result<Var> {
    let picked = g.take(dist, positions)?;
    let row = g.reshape(picked, vec![1, positions.len()])?;
    Ok(g.log_softmax(row, 1)?)
}

/// Word-level correspondence between an example and its augmented view.
#[derive(Debug, Clone, Copy)]
pub struct ViewAlignment<'a> {
    pub orig_seg: &'a Segmentation,
    pub aug_seg: &'a Segmentation,
    /// Original input word → augmented input word.
    pub alignment: &'a [Option<usize>],
    /// Per augmented input word.
    pub modified: &'a [bool],
}

/// R1 for one pair `(x, A(x))`.
///
/// Classification compares `p_cls`; span extraction compares start and end
/// distributions restricted to [`span_alignment`] positions (0 when that set
/// is empty); sequence labeling averages over word rows.
pub fn r1_example_consistency(
    g: &mut Graph,
    orig: &Prediction,
    aug: &Prediction,
    view: &ViewAlignment<'_>,
    stopgrad: bool,
) -> Result<Var> {
    match (orig, aug) {
        (Prediction::Classification(p), Prediction::Classification(q)) => symmetric_kl(g, *p, *q, stopgrad),
        (Prediction::Span { start: s1, end: e1 }, Prediction::Span { start: s2, end: e2 }) => {
            let (pos_o, pos_a) = span_alignment(view.orig_seg, view.aug_seg, view.alignment, view.modified);
            if pos_o.is_empty() {
                return Ok(zero(g));
            }
            let mut total = None;
            for (p, q) in [(*s1, *s2), (*e1, *e2)] {
                let rp = restrict(g, p, &pos_o)?;
                let rq = restrict(g, q, &pos_a)?;
                let term = symmetric_kl(g, rp, rq, stopgrad)?;
                total = Some(match total {
                    None => term,
                    Some(t) => g.add(t, term)?,
                });
            }
            Ok(total.expect("two terms"))
        }
        (Prediction::Labeling(p), Prediction::Labeling(q)) => {
            let (np, nq) = (g.shape(*p)[0], g.shape(*q)[0]);
            if np != nq {
                return Err(ConsistencyError::Contract(format!(
                    "sequence-labeling R1 needs equal word counts, got {np} and {nq}"
                )));
            }
            let total = symmetric_kl(g, *p, *q, stopgrad)?;
            Ok(g.scale(total, 1.0 / np as f64))
        }
        _ => Err(ConsistencyError::Contract("R1 pair has mismatched task heads".into())),
    }
}

/// Noise-free teacher forward whose outputs are detached.
pub fn teacher_forward(g: &mut Graph, teacher: &ModelParams, seg: &Segmentation) -> Result<Prediction> {
    let tv = teacher.bind(g);
    // sigma = 0 never draws.
    let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let pred = model::forward(g, teacher, &tv, seg, 0.0, &mut unused)?;
    Ok(pred.detach(g))
}

/// `KL(f(x;θ*)‖f(x;θ))` summed over the task's distributions; the labeling
/// value is the per-word mean. `teacher` must already be detached.
pub fn r2_from_predictions(g: &mut Graph, teacher: &Prediction, student: &Prediction) -> Result<Var> {
    if teacher.task() != student.task() {
        return Err(ConsistencyError::Contract("R2 teacher and student heads differ".into()));
    }
    let mut total = None;
    for (t, s) in teacher.parts().into_iter().zip(student.parts()) {
        let term = kl(g, t, s)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let total = total.expect("at least one distribution");
    Ok(match student {
        Prediction::Labeling(v) => {
            let rows = g.shape(*v)[0];
            g.scale(total, 1.0 / rows as f64)
        }
        _ => total,
    })
}

/// R2 for one example: the teacher runs gradient-free on the same input.
pub fn r2_model_consistency<R: Rng + ?Sized>(
    g: &mut Graph,
    teacher: &ModelParams,
    student: &ModelParams,
    student_vars: &model::ParamVars,
    seg: &Segmentation,
    rng: &mut R,
) -> Result<Var> {
    if !teacher.same_architecture(student) {
        return Err(ConsistencyError::Contract("teacher and student architectures differ".into()));
    }
    let t = teacher_forward(g, teacher, seg)?;
    let s = model::forward(g, student, student_vars, seg, 0.0, rng)?;
    r2_from_predictions(g, &t, &s)
}
