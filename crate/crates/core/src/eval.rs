//! Metrics, per-language reports and the cross-lingual transfer gap.
//!
//! Span F1 is computed over word positions, so there is no string
//! normalization step. Tag F1 is token-level micro F1; with an ignored tag
//! (an "outside" class) only the remaining tags count as positives, and
//! without one it coincides with accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Corpus, Example, Gold, Task};
use crate::model::{self, argmax, ModelError, ModelParams, Output};
use crate::tokenizer::{TokenizerError, UnigramVocab};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(EvalError::Contract(format!("{a} predictions for {b} gold entries")));
    }
    if a == 0 {
        return Err(EvalError::Contract("no predictions to score".into()));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_lengths(pred.len(), gold.len())?;
    Ok(pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / pred.len() as f64)
}

/// Word-overlap F1 of two inclusive spans.
pub fn span_f1(pred: (usize, usize), gold: (usize, usize)) -> f64 {
    let lo = pred.0.max(gold.0);
    let hi = pred.1.min(gold.1);
    if pred.0 > pred.1 || gold.0 > gold.1 || lo > hi {
        return 0.0;
    }
    let overlap = (hi - lo + 1) as f64;
    let precision = overlap / (pred.1 - pred.0 + 1) as f64;
    let recall = overlap / (gold.1 - gold.0 + 1) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// `(mean F1, exact-match rate)` over inclusive word spans.
pub fn span_f1_em(pred: &[(usize, usize)], gold: &[(usize, usize)]) -> Result<(f64, f64)> {
    check_lengths(pred.len(), gold.len())?;
    let n = pred.len() as f64;
    let f1 = pred.iter().zip(gold).map(|(&p, &g)| span_f1(p, g)).sum::<f64>() / n;
    let em = pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / n;
    Ok((f1, em))
}

/// `(token accuracy, micro F1)`; `ignore` names a tag that never counts as
/// a positive.
pub fn tag_scores(pred: &[Vec<usize>], gold: &[Vec<usize>], ignore: Option<usize>) -> Result<(f64, f64)> {
    check_lengths(pred.len(), gold.len())?;
    let (mut correct, mut total, mut tp, mut pred_pos, mut gold_pos) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        if p.len() != g.len() {
            return Err(EvalError::Contract(format!("{} predicted tags for {} gold tags", p.len(), g.len())));
        }
        for (&a, &b) in p.iter().zip(g) {
            total += 1;
            correct += usize::from(a == b);
            let a_pos = Some(a) != ignore;
            let b_pos = Some(b) != ignore;
            pred_pos += usize::from(a_pos);
            gold_pos += usize::from(b_pos);
            tp += usize::from(a_pos && a == b);
        }
    }
    if total == 0 {
        return Err(EvalError::Contract("no tags to score".into()));
    }
    let precision = if pred_pos == 0 { 0.0 } else { tp as f64 / pred_pos as f64 };
    let recall = if gold_pos == 0 { 0.0 } else { tp as f64 / gold_pos as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((correct as f64 / total as f64, f1))
}

/// Source score minus the mean score of every other language.
pub fn transfer_gap(scores: &BTreeMap<String, f64>, source: &str) -> Result<f64> {
    let src = *scores
        .get(source)
        .ok_or_else(|| EvalError::Contract(format!("no score for source language {source:?}")))?;
    let others: Vec<f64> = scores.iter().filter(|(l, _)| *l != source).map(|(_, &s)| s).collect();
    if others.is_empty() {
        return Err(EvalError::Contract("transfer gap needs at least one non-source language".into()));
    }
    Ok(src - others.iter().sum::<f64>() / others.len() as f64)
}

/// Scores of one corpus. `score` is the headline number: accuracy, mean of
/// span F1 and EM, or tag F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub n: usize,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub em: Option<f64>,
}

impl Scores {
    pub fn from_accuracy(n: usize, acc: f64) -> Self {
        Self {
            n,
            score: acc,
            accuracy: Some(acc),
            f1: None,
            em: None,
        }
    }

    pub fn from_span(n: usize, f1: f64, em: f64) -> Self {
        Self {
            n,
            score: (f1 + em) / 2.0,
            accuracy: None,
            f1: Some(f1),
            em: Some(em),
        }
    }

    pub fn from_tags(n: usize, acc: f64, f1: f64) -> Self {
        Self {
            n,
            score: f1,
            accuracy: Some(acc),
            f1: Some(f1),
            em: None,
        }
    }
}

/// Best span with `start <= end`, both inside the context, mapped to
/// inclusive context word indices.
pub fn decode_span(start: &[f64], end: &[f64], word_index: &[usize], context_offset: usize) -> (usize, usize) {
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for s in 0..start.len() {
        if word_index[s] < context_offset {
            continue;
        }
        for e in s..end.len() {
            let v = start[s] + end[e];
            if v > best.0 {
                best = (v, s, e);
            }
        }
    }
    (word_index[best.1] - context_offset, word_index[best.2] - context_offset)
}

/// Model decision for one example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Label(usize),
    Span(usize, usize),
    Tags(Vec<usize>),
}

pub fn decide(params: &ModelParams, vocab: &UnigramVocab, ex: &Example) -> Result<Decision> {
    let seg = vocab.segment_words(&ex.input_words())?;
    Ok(match model::infer(params, &seg)? {
        Output::Classification(lp) => Decision::Label(argmax(&lp)),
        Output::Span { start, end } => {
            let (s, e) = decode_span(&start, &end, &seg.word_index, ex.context_offset());
            Decision::Span(s, e)
        }
        Output::Labeling(rows) => Decision::Tags(rows.iter().map(|r| argmax(r)).collect()),
    })
}

/// Scores `params` on the labeled examples of `corpus`.
pub fn evaluate(params: &ModelParams, vocab: &UnigramVocab, corpus: &Corpus, ignore_tag: Option<usize>) -> Result<Scores> {
    if params.config.task != corpus.task {
        return Err(EvalError::Contract(format!(
            "model is for {}, corpus is {}",
            params.config.task, corpus.task
        )));
    }
    let labeled: Vec<&Example> = corpus.examples.iter().filter(|e| e.gold.is_some()).collect();
    let n = labeled.len();
    match corpus.task {
        Task::Classification => {
            let mut pred = Vec::with_capacity(n);
            let mut gold = Vec::with_capacity(n);
            for ex in labeled {
                if let (Decision::Label(p), Some(Gold::Label(g))) = (decide(params, vocab, ex)?, &ex.gold) {
                    pred.push(p);
                    gold.push(*g);
                }
            }
            Ok(Scores::from_accuracy(n, accuracy(&pred, &gold)?))
        }
        Task::SpanExtraction => {
            let mut pred = Vec::with_capacity(n);
            let mut gold = Vec::with_capacity(n);
            for ex in labeled {
                if let (Decision::Span(s, e), Some(Gold::Span { start, end })) = (decide(params, vocab, ex)?, &ex.gold) {
                    pred.push((s, e));
                    gold.push((*start, *end));
                }
            }
            let (f1, em) = span_f1_em(&pred, &gold)?;
            Ok(Scores::from_span(n, f1, em))
        }
        Task::SequenceLabeling => {
            let mut pred = Vec::with_capacity(n);
            let mut gold = Vec::with_capacity(n);
            for ex in labeled {
                if let (Decision::Tags(p), Some(Gold::Tags(g))) = (decide(params, vocab, ex)?, &ex.gold) {
                    pred.push(p);
                    gold.push(g.clone());
                }
            }
            let (acc, f1) = tag_scores(&pred, &gold, ignore_tag)?;
            Ok(Scores::from_tags(n, acc, f1))
        }
    }
}

/// Per-language scores and the transfer gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task: Task,
    pub source: String,
    pub languages: BTreeMap<String, Scores>,
    /// Mean headline score over non-source languages.
    pub target_mean: f64,
    pub gap: f64,
}

impl Report {
    pub fn new(task: Task, source: &str, languages: BTreeMap<String, Scores>) -> Result<Self> {
        let headline: BTreeMap<String, f64> = languages.iter().map(|(l, s)| (l.clone(), s.score)).collect();
        let gap = transfer_gap(&headline, source)?;
        let targets: Vec<f64> = headline.iter().filter(|(l, _)| *l != source).map(|(_, &v)| v).collect();
        Ok(Self {
            task,
            source: source.to_string(),
            target_mean: targets.iter().sum::<f64>() / targets.len() as f64,
            languages,
            gap,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned table with scores as percentages.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into());
        let mut out = String::new();
        writeln!(out, "{:<8} {:>6} {:>8} {:>8} {:>8} {:>8}", "lang", "n", "score", "acc", "f1", "em").unwrap();
        for (lang, s) in &self.languages {
            let tag = if *lang == self.source { format!("{lang}*") } else { lang.clone() };
            writeln!(
                out,
                "{:<8} {:>6} {:>8} {:>8} {:>8} {:>8}",
                tag,
                s.n,
                pct(Some(s.score)),
                pct(s.accuracy),
                pct(s.f1),
                pct(s.em)
            )
            .unwrap();
        }
        writeln!(out, "target mean {:.2}", 100.0 * self.target_mean).unwrap();
        writeln!(out, "transfer gap {:+.2}", 100.0 * self.gap).unwrap();
        out
    }
}

/// Evaluates every language corpus and builds the report.
pub fn evaluate_languages(
    params: &ModelParams,
    vocab: &UnigramVocab,
    corpora: &BTreeMap<String, Corpus>,
    source: &str,
    ignore_tag: Option<usize>,
) -> Result<Report> {
    let mut languages = BTreeMap::new();
    for (lang, corpus) in corpora {
        languages.insert(lang.clone(), evaluate(params, vocab, corpus, ignore_tag)?);
    }
    Report::new(params.config.task, source, languages)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(span_f1_em(&[(1, 2)], &[(1, 2)]).unwrap(), (1.0, 1.0));
        assert_eq!(tag_scores(&[vec![0, 1]], &[vec![0, 1]], None).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn partial_overlap() {
        assert_eq!(span_f1((2, 3), (3, 4)), 0.5);
        assert_eq!(span_f1_em(&[(2, 3)], &[(3, 4)]).unwrap(), (0.5, 0.0));
        assert_eq!(span_f1((0, 0), (3, 4)), 0.0);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert!(accuracy(&[], &[]).is_err());
        assert!(span_f1_em(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
        assert!(tag_scores(&[vec![1]], &[vec![1, 2]], None).is_err());
    }

    #[test]
    fn tag_f1_with_outside_class() {
        let pred = vec![vec![0, 1, 2, 0]];
        let gold = vec![vec![0, 1, 1, 2]];
        let (acc, f1) = tag_scores(&pred, &gold, Some(0)).unwrap();
        assert_eq!(acc, 0.5);
        // tp = 1, predicted positives = 2, gold positives = 3.
        assert!((f1 - 2.0 * 0.5 * (1.0 / 3.0) / (0.5 + 1.0 / 3.0)).abs() < 1e-12);
        let (acc, f1) = tag_scores(&pred, &gold, None).unwrap();
        assert_eq!(acc, f1);
    }

    #[test]
    fn gaps() {
        let s = |v: &[(&str, f64)]| v.iter().map(|(l, x)| (l.to_string(), *x)).collect::<BTreeMap<_, _>>();
        assert_eq!(transfer_gap(&s(&[("en", 90.0), ("de", 80.0), ("fr", 85.0)]), "en").unwrap(), 7.5);
        assert_eq!(transfer_gap(&s(&[("en", 70.0), ("de", 70.0)]), "en").unwrap(), 0.0);
        assert!(transfer_gap(&s(&[("de", 70.0)]), "en").is_err());
        assert!(transfer_gap(&s(&[("en", 70.0)]), "en").is_err());
        let en = Scores::from_span(1, 0.8, 0.6);
        let xx = Scores::from_span(1, 0.7, 0.5);
        let r = Report::new(
            Task::SpanExtraction,
            "en",
            [("en".to_string(), en), ("xx".to_string(), xx)].into_iter().collect(),
        )
        .unwrap();
        assert!((r.gap - 0.1).abs() < 1e-12);
        assert!(r.to_table().contains("en*"));
    }

    #[test]
    fn span_decoding_stays_in_context_and_ordered() {
        // Question occupies word 0 (position 0); context words 1..=2.
        let word_index = [0, 1, 2, 2];
        let start = [0.0, -5.0, -0.1, -3.0];
        let end = [0.0, -0.1, -4.0, -2.0];
        assert_eq!(decode_span(&start, &end, &word_index, 1), (1, 1));
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    fn permuted<T: Clone>(xs: &[T], keys: &[u64]) -> Vec<T> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by_key(|&i| keys[i % keys.len()].wrapping_mul(i as u64 + 1));
        idx.into_iter().map(|i| xs[i].clone()).collect()
    }

    fn span() -> impl Strategy<Value = (usize, usize)> {
        (0usize..8, 0usize..4).prop_map(|(s, len)| (s, s + len))
    }

    proptest! {
        #[test]
        fn metrics_lie_in_unit_interval_and_ignore_order(
            labels in prop::collection::vec((0usize..4, 0usize..4), 1..30),
            spans in prop::collection::vec((span(), span()), 1..30),
            tags in prop::collection::vec(prop::collection::vec((0usize..3, 0usize..3), 1..6), 1..10),
            keys in prop::collection::vec(any::<u64>(), 1..8),
            ignore in prop::option::of(0usize..3),
        ) {
            let unit = |x: f64| (0.0..=1.0).contains(&x);

            let (p, g): (Vec<usize>, Vec<usize>) = labels.iter().copied().unzip();
            let acc = accuracy(&p, &g).unwrap();
            prop_assert!(unit(acc));
            let shuffled = permuted(&labels, &keys);
            let (p2, g2): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
            prop_assert!((accuracy(&p2, &g2).unwrap() - acc).abs() < 1e-12);

            let (p, g): (Vec<_>, Vec<_>) = spans.iter().copied().unzip();
            let (f1, em) = span_f1_em(&p, &g).unwrap();
            prop_assert!(unit(f1) && unit(em) && em <= f1 + 1e-12);
            let (p2, g2): (Vec<_>, Vec<_>) = permuted(&spans, &keys).into_iter().unzip();
            let (f1b, emb) = span_f1_em(&p2, &g2).unwrap();
            prop_assert!((f1 - f1b).abs() < 1e-12 && (em - emb).abs() < 1e-12);

            let split = |rows: &[Vec<(usize, usize)>]| -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
                rows.iter().map(|r| r.iter().copied().unzip()).unzip()
            };
            let (p, g) = split(&tags);
            let (ta, tf) = tag_scores(&p, &g, ignore).unwrap();
            prop_assert!(unit(ta) && unit(tf));
            let (p2, g2) = split(&permuted(&tags, &keys));
            let (tb, tg) = tag_scores(&p2, &g2, ignore).unwrap();
            prop_assert!((ta - tb).abs() < 1e-12 && (tf - tg).abs() < 1e-12);
        }

        #[test]
        fn gap_is_signed(src in 0.0f64..1.0, others in prop::collection::vec(0.0f64..1.0, 1..5)) {
            let mut scores = BTreeMap::new();
            scores.insert("en".to_string(), src);
            for (i, s) in others.iter().enumerate() {
                scores.insert(format!("x{i}"), *s);
            }
            let gap = transfer_gap(&scores, "en").unwrap();
            let expected = src - others.iter().sum::<f64>() / others.len() as f64;
            prop_assert!((gap - expected).abs() < 1e-12);
        }
    }
}
