//! Unigram language-model subword tokenizer.
//!
//! Every input string is turned into a segmentation lattice whose edges are
//! vocabulary pieces. [`UnigramVocab::viterbi`] returns the most probable path
//! and [`UnigramVocab::sample`] draws a path with probability proportional to
//! `P(s)^alpha` by forward filtering and backward sampling over the full
//! lattice. Words are segmented independently with the word-boundary marker
//! prepended, which keeps word/subword alignment trivial.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

pub const DEFAULT_MARKER: char = '\u{2581}';
pub const DEFAULT_ALPHA: f64 = 0.2;
/// Longest text accepted by [`UnigramVocab::enumerate`].
pub const ENUMERATION_LIMIT: usize = 12;
/// Score differences below this are treated as ties by Viterbi.
pub const TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate piece {0:?}")]
    DuplicatePiece(String),
    #[error("invalid vocabulary: {0}")]
    Validation(String),
    #[error("character {0:?} is not covered by the vocabulary")]
    Coverage(char),
    #[error("cannot segment empty text")]
    EmptyText,
    #[error("text has {len} characters; enumeration is limited to {limit}")]
    TooLong { len: usize, limit: usize },
    #[error("sampling temperature must be non-negative, got {0}")]
    BadAlpha(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

/// Subword vocabulary with log-probabilities in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct UnigramVocab {
    pieces: Vec<String>,
    log_probs: Vec<f64>,
    index: HashMap<String, usize>,
    max_piece_len: usize,
    marker: char,
}

/// Piece sequence for one or more words.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Segmentation {
    pub ids: Vec<usize>,
    /// Source word of each piece.
    pub word_index: Vec<usize>,
    /// True on the first piece of every word.
    pub first: Vec<bool>,
}

impl Segmentation {
    /// Segmentation of a single word (or raw text) from piece ids.
    pub fn single(ids: Vec<usize>) -> Self {
        let n = ids.len();
        let mut first = vec![false; n];
        if n > 0 {
            first[0] = true;
        }
        Self {
            ids,
            word_index: vec![0; n],
            first,
        }
    }

    /// Concatenates per-word piece lists.
    pub fn from_words(words: Vec<Vec<usize>>) -> Self {
        let mut seg = Self {
            ids: Vec::new(),
            word_index: Vec::new(),
            first: Vec::new(),
        };
        for (w, pieces) in words.into_iter().enumerate() {
            for (k, id) in pieces.into_iter().enumerate() {
                seg.ids.push(id);
                seg.word_index.push(w);
                seg.first.push(k == 0);
            }
        }
        seg
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_words(&self) -> usize {
        self.first.iter().filter(|&&f| f).count()
    }

    /// Subword position range of each word.
    pub fn word_spans(&self) -> Vec<Range<usize>> {
        let mut spans: Vec<Range<usize>> = Vec::new();
        for (pos, &f) in self.first.iter().enumerate() {
            if f {
                spans.push(pos..pos + 1);
            } else if let Some(last) = spans.last_mut() {
                last.end = pos + 1;
            }
        }
        spans
    }

    /// Position of the first subword of every word.
    pub fn first_positions(&self) -> Vec<usize> {
        self.first
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }

    pub fn word_pieces(&self, word: usize) -> &[usize] {
        let spans = self.word_spans();
        &self.ids[spans[word].clone()]
    }
}

struct Lattice {
    /// `starts[i]` lists `(end, piece)` for pieces beginning at char `i`.
    starts: Vec<Vec<(usize, usize)>>,
    /// `ends[j]` lists `(start, piece)` for pieces ending at char `j`.
    ends: Vec<Vec<(usize, usize)>>,
}

fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl UnigramVocab {
    /// Builds a vocabulary, checking that log-probabilities are finite and
    /// non-positive, pieces are unique, and that every character used inside
    /// any piece is itself a piece.
    pub fn new(entries: Vec<(String, f64)>, marker: char) -> Result<Self> {
        if entries.is_empty() {
            return Err(TokenizerError::Validation(
                "vocabulary is empty, no character is covered".into(),
            ));
        }
        let mut index = HashMap::with_capacity(entries.len());
        let mut pieces = Vec::with_capacity(entries.len());
        let mut log_probs = Vec::with_capacity(entries.len());
        let mut max_piece_len = 0;
        for (piece, lp) in entries {
            if piece.is_empty() {
                return Err(TokenizerError::Validation("empty piece".into()));
            }
            if !lp.is_finite() || lp > 0.0 {
                return Err(TokenizerError::Validation(format!(
                    "piece {piece:?} has log-probability {lp}, expected finite and <= 0"
                )));
            }
            if index.contains_key(&piece) {
                return Err(TokenizerError::DuplicatePiece(piece));
            }
            max_piece_len = max_piece_len.max(piece.chars().count());
            index.insert(piece.clone(), pieces.len());
            pieces.push(piece);
            log_probs.push(lp);
        }
        let vocab = Self {
            pieces,
            log_probs,
            index,
            max_piece_len,
            marker,
        };
        for piece in &vocab.pieces {
            for ch in piece.chars() {
                if !vocab.index.contains_key(ch.encode_utf8(&mut [0; 4]) as &str) {
                    return Err(TokenizerError::Validation(format!(
                        "character {ch:?} of piece {piece:?} has no single-character piece"
                    )));
                }
            }
        }
        Ok(vocab)
    }

    /// Reads `piece<TAB>log_prob` lines.
    pub fn load(path: impl AsRef<Path>, marker: char) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, marker)
    }

    pub fn parse(text: &str, marker: char) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (piece, lp) = line.rsplit_once('\t').ok_or_else(|| TokenizerError::Parse {
                line: i + 1,
                message: "expected piece<TAB>log_prob".into(),
            })?;
            let lp: f64 = lp.trim().parse().map_err(|_| TokenizerError::Parse {
                line: i + 1,
                message: format!("bad log-probability {lp:?}"),
            })?;
            entries.push((piece.to_string(), lp));
        }
        Self::new(entries, marker)
    }

    /// Serializes in the same format [`UnigramVocab::parse`] reads.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (p, lp) in self.pieces.iter().zip(&self.log_probs) {
            out.push_str(p);
            out.push('\t');
            out.push_str(&lp.to_string());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn marker(&self) -> char {
        self.marker
    }

    pub fn max_piece_len(&self) -> usize {
        self.max_piece_len
    }

    pub fn piece(&self, id: usize) -> &str {
        &self.pieces[id]
    }

    pub fn log_prob(&self, id: usize) -> f64 {
        self.log_probs[id]
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn pieces(&self) -> impl Iterator<Item = (&str, f64)> {
        self.pieces
            .iter()
            .map(String::as_str)
            .zip(self.log_probs.iter().copied())
    }

    fn lattice(&self, chars: &[char], exclude: Option<usize>) -> Result<Lattice> {
        let n = chars.len();
        if n == 0 {
            return Err(TokenizerError::EmptyText);
        }
        let mut starts = vec![Vec::new(); n];
        let mut ends = vec![Vec::new(); n + 1];
        let mut buf = String::new();
        for i in 0..n {
            buf.clear();
            for j in i..n.min(i + self.max_piece_len) {
                buf.push(chars[j]);
                match self.index.get(buf.as_str()) {
                    Some(&id) if Some(id) != exclude => {
                        starts[i].push((j + 1, id));
                        ends[j + 1].push((i, id));
                    }
                    _ if j == i && !self.index.contains_key(buf.as_str()) => {
                        return Err(TokenizerError::Coverage(chars[i]));
                    }
                    _ => {}
                }
            }
        }
        Ok(Lattice { starts, ends })
    }

    fn best_path(&self, chars: &[char], exclude: Option<usize>) -> Result<Option<(Vec<usize>, f64)>> {
        let lattice = self.lattice(chars, exclude)?;
        let n = chars.len();
        // best[i]: (score, pieces, first piece end) of the best suffix from i
        let mut best: Vec<Option<(f64, usize, usize, usize)>> = vec![None; n + 1];
        best[n] = Some((0.0, 0, n, usize::MAX));
        for i in (0..n).rev() {
            let mut cur: Option<(f64, usize, usize, usize)> = None;
            for &(end, id) in &lattice.starts[i] {
                let Some((rest, count, _, _)) = best[end] else { continue };
                let cand = (self.log_probs[id] + rest, count + 1, end, id);
                let better = match cur {
                    None => true,
                    Some((s, c, e, _)) => {
                        if cand.0 > s + TIE_EPSILON {
                            true
                        } else if cand.0 < s - TIE_EPSILON {
                            false
                        } else {
                            cand.1 < c || (cand.1 == c && cand.2 > e)
                        }
                    }
                };
                if better {
                    cur = Some(cand);
                }
            }
            best[i] = cur;
        }
        let Some((score, _, _, _)) = best[0] else { return Ok(None) };
        let mut ids = Vec::new();
        let mut i = 0;
        while i < n {
            let (_, _, end, id) = best[i].expect("reachable suffix");
            ids.push(id);
            i = end;
        }
        Ok(Some((ids, score)))
    }

    /// Most probable segmentation of `text`. Ties (within [`TIE_EPSILON`])
    /// go to fewer pieces, then to the leftmost-longest piece sequence.
    pub fn viterbi(&self, text: &str) -> Result<Vec<usize>> {
        let chars: Vec<char> = text.chars().collect();
        Ok(self
            .best_path(&chars, None)?
            .expect("full character coverage guarantees a path")
            .0)
    }

    fn forward(&self, lattice: &Lattice, alpha: f64) -> Vec<f64> {
        let n = lattice.ends.len() - 1;
        let mut fwd = vec![f64::NEG_INFINITY; n + 1];
        fwd[0] = 0.0;
        for j in 1..=n {
            fwd[j] = log_sum_exp(
                lattice.ends[j]
                    .iter()
                    .map(|&(i, id)| fwd[i] + alpha * self.log_probs[id]),
            );
        }
        fwd
    }

    /// `ln Σ_s P(s)^alpha` over all segmentations of `text`.
    pub fn log_partition(&self, text: &str, alpha: f64) -> Result<f64> {
        let chars: Vec<char> = text.chars().collect();
        let lattice = self.lattice(&chars, None)?;
        Ok(self.forward(&lattice, alpha)[chars.len()])
    }

    /// Draws a segmentation with probability `P(s)^alpha / Σ P(s')^alpha`.
    pub fn sample<R: Rng + ?Sized>(&self, text: &str, alpha: f64, rng: &mut R) -> Result<Vec<usize>> {
        if !(alpha >= 0.0) {
            return Err(TokenizerError::BadAlpha(alpha));
        }
        let chars: Vec<char> = text.chars().collect();
        let lattice = self.lattice(&chars, None)?;
        let fwd = self.forward(&lattice, alpha);
        let mut ids = Vec::new();
        let mut j = chars.len();
        while j > 0 {
            let edges = &lattice.ends[j];
            let weights: Vec<f64> = edges
                .iter()
                .map(|&(i, id)| (fwd[i] + alpha * self.log_probs[id] - fwd[j]).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = edges.len() - 1;
            for (k, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = k;
                    break;
                }
                u -= w;
            }
            let (i, id) = edges[pick];
            ids.push(id);
            j = i;
        }
        ids.reverse();
        Ok(ids)
    }

    /// Every segmentation of `text` with its probability `Π p(piece)`.
    pub fn enumerate(&self, text: &str) -> Result<Vec<(Vec<usize>, f64)>> {
        let chars: Vec<char> = text.chars().collect();
        if chars.len() > ENUMERATION_LIMIT {
            return Err(TokenizerError::TooLong {
                len: chars.len(),
                limit: ENUMERATION_LIMIT,
            });
        }
        let lattice = self.lattice(&chars, None)?;
        let mut out = Vec::new();
        let mut path = Vec::new();
        self.enumerate_from(&lattice, 0, chars.len(), &mut path, &mut out);
        Ok(out)
    }

    fn enumerate_from(
        &self,
        lattice: &Lattice,
        i: usize,
        n: usize,
        path: &mut Vec<usize>,
        out: &mut Vec<(Vec<usize>, f64)>,
    ) {
        if i == n {
            let lp: f64 = path.iter().map(|&id| self.log_probs[id]).sum();
            out.push((path.clone(), lp.exp()));
            return;
        }
        for &(end, id) in &lattice.starts[i] {
            path.push(id);
            self.enumerate_from(lattice, end, n, path, out);
            path.pop();
        }
    }

    fn word_text(&self, word: &str) -> String {
        let mut s = String::with_capacity(word.len() + 3);
        s.push(self.marker);
        s.push_str(word);
        s
    }

    /// Viterbi pieces of one word, marker included.
    pub fn viterbi_word(&self, word: &str) -> Result<Vec<usize>> {
        self.viterbi(&self.word_text(word))
    }

    pub fn sample_word<R: Rng + ?Sized>(&self, word: &str, alpha: f64, rng: &mut R) -> Result<Vec<usize>> {
        self.sample(&self.word_text(word), alpha, rng)
    }

    pub fn segment_words<S: AsRef<str>>(&self, words: &[S]) -> Result<Segmentation> {
        let per_word = words
            .iter()
            .map(|w| self.viterbi_word(w.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Segmentation::from_words(per_word))
    }

    pub fn sample_words<S: AsRef<str>, R: Rng + ?Sized>(
        &self,
        words: &[S],
        alpha: f64,
        rng: &mut R,
    ) -> Result<Segmentation> {
        let per_word = words
            .iter()
            .map(|w| self.sample_word(w.as_ref(), alpha, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Segmentation::from_words(per_word))
    }

    /// Joins pieces, turning markers back into spaces.
    pub fn detokenize(&self, seg: &Segmentation) -> String {
        let joined: String = seg.ids.iter().map(|&id| self.pieces[id].as_str()).collect();
        let text: String = joined
            .chars()
            .map(|c| if c == self.marker { ' ' } else { c })
            .collect();
        match text.strip_prefix(' ') {
            Some(rest) if joined.starts_with(self.marker) => rest.to_string(),
            _ => text,
        }
    }
}

/// Viterbi segmentation of raw `text` (treated as one word).
pub fn viterbi_segment(vocab: &UnigramVocab, text: &str) -> Result<Segmentation> {
    Ok(Segmentation::single(vocab.viterbi(text)?))
}

/// Lattice sample of raw `text` (treated as one word).
pub fn sample_segment<R: Rng + ?Sized>(
    vocab: &UnigramVocab,
    text: &str,
    alpha: f64,
    rng: &mut R,
) -> Result<Segmentation> {
    Ok(Segmentation::single(vocab.sample(text, alpha, rng)?))
}

/// All segmentations of raw `text` with their probabilities.
pub fn enumerate_segmentations(vocab: &UnigramVocab, text: &str) -> Result<Vec<(Segmentation, f64)>> {
    Ok(vocab
        .enumerate(text)?
        .into_iter()
        .map(|(ids, p)| (Segmentation::single(ids), p))
        .collect())
}

/// Settings for [`build_vocab`].
#[derive(Debug, Clone)]
pub struct VocabBuilder {
    pub target_size: usize,
    pub max_piece_len: usize,
    pub em_iters: usize,
    /// Fraction of the current vocabulary removed per pruning round.
    pub prune_fraction: f64,
    /// Candidate pool size, as a multiple of `target_size`.
    pub seed_factor: usize,
    pub marker: char,
}

impl VocabBuilder {
    pub fn new(target_size: usize, max_piece_len: usize, em_iters: usize) -> Self {
        Self {
            target_size,
            max_piece_len: max_piece_len.max(1),
            em_iters,
            prune_fraction: 0.2,
            seed_factor: 4,
            marker: DEFAULT_MARKER,
        }
    }
}

/// Trace of a vocabulary build.
#[derive(Debug, Clone, Default)]
pub struct BuildReport {
    /// Corpus log-likelihood after each EM iteration, grouped by pruning round.
    pub rounds: Vec<Vec<f64>>,
    pub alphabet_size: usize,
    pub seed_candidates: usize,
}

const MIN_COUNT: f64 = 1e-12;

/// Expected piece counts under the lattice posterior, plus the corpus
/// log-likelihood `Σ w·ln Z(text)`.
fn expected_counts(vocab: &UnigramVocab, corpus: &[(String, f64)]) -> Result<(Vec<f64>, f64)> {
    let mut counts = vec![0.0; vocab.len()];
    let mut loglik = 0.0;
    for (text, weight) in corpus {
        let chars: Vec<char> = text.chars().collect();
        let lattice = vocab.lattice(&chars, None)?;
        let n = chars.len();
        let fwd = vocab.forward(&lattice, 1.0);
        let mut bwd = vec![f64::NEG_INFINITY; n + 1];
        bwd[n] = 0.0;
        for i in (0..n).rev() {
            bwd[i] = log_sum_exp(
                lattice.starts[i]
                    .iter()
                    .map(|&(end, id)| vocab.log_probs[id] + bwd[end]),
            );
        }
        let z = fwd[n];
        loglik += weight * z;
        for (i, edges) in lattice.starts.iter().enumerate() {
            for &(end, id) in edges {
                let post = (fwd[i] + vocab.log_probs[id] + bwd[end] - z).exp();
                counts[id] += weight * post;
            }
        }
    }
    Ok((counts, loglik))
}

/// One EM iteration over a weighted corpus: returns the re-estimated
/// log-probabilities and the corpus log-likelihood under the input ones.
pub fn em_step(vocab: &UnigramVocab, corpus: &[(String, f64)]) -> Result<(Vec<f64>, f64)> {
    let (counts, loglik) = expected_counts(vocab, corpus)?;
    let total: f64 = counts.iter().map(|c| c.max(MIN_COUNT)).sum();
    let lps = counts
        .iter()
        .map(|c| (c.max(MIN_COUNT) / total).ln().min(0.0))
        .collect();
    Ok((lps, loglik))
}

fn weighted_corpus(texts: &[String]) -> Vec<(String, f64)> {
    let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
    for t in texts.iter().filter(|t| !t.is_empty()) {
        *counts.entry(t).or_default() += 1.0;
    }
    counts.into_iter().map(|(t, c)| (t.to_string(), c)).collect()
}

/// Learns a unigram vocabulary of at most `target_size` pieces from `corpus`
/// (each string is segmented as one unit; prepend the marker to words).
///
/// Candidates are the most frequent substrings (weighted by length); EM
/// re-estimates their probabilities and the least useful 20% are pruned per
/// round until the size target is met. Single characters are never pruned.
pub fn build_vocab(builder: &VocabBuilder, corpus: &[String]) -> Result<(UnigramVocab, BuildReport)> {
    let weighted = weighted_corpus(corpus);
    let mut alphabet: BTreeMap<char, f64> = BTreeMap::new();
    let mut substrings: HashMap<String, f64> = HashMap::new();
    for (text, w) in &weighted {
        let chars: Vec<char> = text.chars().collect();
        for i in 0..chars.len() {
            *alphabet.entry(chars[i]).or_default() += w;
            let mut s = String::new();
            s.push(chars[i]);
            for &c in chars.iter().skip(i + 1).take(builder.max_piece_len - 1) {
                s.push(c);
                *substrings.entry(s.clone()).or_default() += w;
            }
        }
    }
    if alphabet.is_empty() {
        return Err(TokenizerError::Validation("corpus has no characters".into()));
    }
    if builder.target_size < alphabet.len() {
        return Err(TokenizerError::Validation(format!(
            "target size {} is below the alphabet size {}",
            builder.target_size,
            alphabet.len()
        )));
    }
    let mut candidates: Vec<(String, f64)> = substrings.into_iter().collect();
    candidates.sort_by(|a, b| {
        let sa = a.1 * a.0.chars().count() as f64;
        let sb = b.1 * b.0.chars().count() as f64;
        sb.total_cmp(&sa).then_with(|| a.0.cmp(&b.0))
    });
    candidates.truncate(builder.target_size.saturating_mul(builder.seed_factor));

    let mut report = BuildReport {
        alphabet_size: alphabet.len(),
        seed_candidates: candidates.len(),
        ..Default::default()
    };
    let chars: HashSet<String> = alphabet.keys().map(|c| c.to_string()).collect();
    let mut entries: Vec<(String, f64)> = alphabet
        .iter()
        .map(|(c, n)| (c.to_string(), *n))
        .chain(candidates)
        .collect();
    let total: f64 = entries.iter().map(|e| e.1).sum();
    for e in &mut entries {
        e.1 = (e.1 / total).ln();
    }
    let mut vocab = UnigramVocab::new(entries, builder.marker)?;

    loop {
        let mut trace = Vec::with_capacity(builder.em_iters + 1);
        for _ in 0..builder.em_iters {
            let (lps, ll) = em_step(&vocab, &weighted)?;
            trace.push(ll);
            vocab.log_probs = lps;
        }
        trace.push(em_step(&vocab, &weighted)?.1);
        report.rounds.push(trace);
        if vocab.len() <= builder.target_size {
            break;
        }
        let removable = vocab.len() - builder.target_size;
        let quota = ((vocab.len() as f64 * builder.prune_fraction).ceil() as usize)
            .clamp(1, removable);
        let (counts, _) = expected_counts(&vocab, &weighted)?;
        let mut losses: Vec<(f64, usize)> = Vec::new();
        for id in 0..vocab.len() {
            if chars.contains(&vocab.pieces[id]) {
                continue;
            }
            let piece_chars: Vec<char> = vocab.pieces[id].chars().collect();
            let alt = vocab
                .best_path(&piece_chars, Some(id))?
                .map_or(f64::NEG_INFINITY, |(_, s)| s);
            losses.push((counts[id] * (vocab.log_probs[id] - alt), id));
        }
        losses.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let drop: HashSet<usize> = losses.iter().take(quota).map(|&(_, id)| id).collect();
        let kept: Vec<(String, f64)> = (0..vocab.len())
            .filter(|id| !drop.contains(id))
            .map(|id| (vocab.pieces[id].clone(), vocab.log_probs[id]))
            .collect();
        let z = log_sum_exp(kept.iter().map(|e| e.1));
        vocab = UnigramVocab::new(
            kept.into_iter().map(|(p, lp)| (p, (lp - z).min(0.0))).collect(),
            builder.marker,
        )?;
    }

    let mut ordered: Vec<(String, f64)> = vocab
        .pieces
        .iter()
        .cloned()
        .zip(vocab.log_probs.iter().copied())
        .collect();
    ordered.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok((UnigramVocab::new(ordered, builder.marker)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> UnigramVocab {
        UnigramVocab::new(
            vec![
                ("a".into(), 0.4f64.ln()),
                ("b".into(), 0.4f64.ln()),
                ("ab".into(), 0.2f64.ln()),
            ],
            DEFAULT_MARKER,
        )
        .unwrap()
    }

    fn pieces(v: &UnigramVocab, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| v.piece(i).to_string()).collect()
    }

    #[test]
    fn parse_three_pieces() {
        let v = UnigramVocab::parse("a\t-0.9163\nb\t-0.9163\nab\t-1.6094", DEFAULT_MARKER).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.max_piece_len(), 2);
    }

    #[test]
    fn parse_errors() {
        let err = UnigramVocab::parse("a\t-0.1\na\t-0.2\n", DEFAULT_MARKER).unwrap_err();
        assert!(matches!(err, TokenizerError::DuplicatePiece(ref p) if p == "a"));
        assert!(matches!(
            UnigramVocab::parse("", DEFAULT_MARKER),
            Err(TokenizerError::Validation(_))
        ));
        let err = UnigramVocab::parse("a\t-0.1\nbad line\n", DEFAULT_MARKER).unwrap_err();
        assert!(matches!(err, TokenizerError::Parse { line: 2, .. }));
        assert!(UnigramVocab::parse("a\t0.5\n", DEFAULT_MARKER).is_err());
        // "ab" without a "b" piece breaks coverage
        assert!(matches!(
            UnigramVocab::parse("a\t-0.1\nab\t-0.2\n", DEFAULT_MARKER),
            Err(TokenizerError::Validation(_))
        ));
    }

    #[test]
    fn viterbi_toy_cases() {
        let v = toy();
        assert_eq!(pieces(&v, &v.viterbi("ab").unwrap()), ["ab"]);
        assert_eq!(pieces(&v, &v.viterbi("a").unwrap()), ["a"]);
        assert_eq!(pieces(&v, &v.viterbi("aa").unwrap()), ["a", "a"]);
        assert!(matches!(v.viterbi("ac"), Err(TokenizerError::Coverage('c'))));
        assert!(matches!(v.viterbi(""), Err(TokenizerError::EmptyText)));
    }

    #[test]
    fn viterbi_tie_prefers_fewer_then_leftmost_longest() {
        // "aaa" = a+aa = aa+a = a+a+a; make a+aa and aa+a tie
        let v = UnigramVocab::new(
            vec![("a".into(), -1.0), ("aa".into(), -1.0)],
            DEFAULT_MARKER,
        )
        .unwrap();
        assert_eq!(pieces(&v, &v.viterbi("aaa").unwrap()), ["aa", "a"]);
    }

    #[test]
    fn enumeration_and_partition() {
        let v = toy();
        let all = v.enumerate("ab").unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(v.enumerate("a").unwrap().len(), 1);
        let z: f64 = all.iter().map(|s| s.1).sum();
        assert!((z - 0.36).abs() < 1e-12);
        assert!((v.log_partition("ab", 1.0).unwrap().exp() - z).abs() < 1e-12);
        let long = "a".repeat(13);
        assert!(matches!(v.enumerate(&long), Err(TokenizerError::TooLong { .. })));
    }

    #[test]
    fn sampling_frequencies_match_enumeration() {
        let v = toy();
        let ab = v.id("ab").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| v.sample("ab", 1.0, &mut rng).unwrap() == vec![ab])
            .count();
        let expected = 0.2 / (0.2 + 0.16);
        assert!(((hits as f64 / n as f64) - expected).abs() < 0.01);

        let hits = (0..n)
            .filter(|_| v.sample("ab", 0.0, &mut rng).unwrap() == vec![ab])
            .count();
        assert!(((hits as f64 / n as f64) - 0.5).abs() < 0.01);

        let viterbi = v.viterbi("abab").unwrap();
        for _ in 0..1000 {
            assert_eq!(v.sample("abab", 50.0, &mut rng).unwrap(), viterbi);
        }
        assert!(matches!(v.sample("ab", -1.0, &mut rng), Err(TokenizerError::BadAlpha(_))));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let v = toy();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| v.sample("abab", 0.5, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    #[test]
    fn words_round_trip_and_flags() {
        let v = UnigramVocab::new(
            vec![
                (DEFAULT_MARKER.to_string(), -2.0),
                ("a".into(), -1.0),
                ("b".into(), -1.0),
                (format!("{DEFAULT_MARKER}ab"), -1.5),
            ],
            DEFAULT_MARKER,
        )
        .unwrap();
        let words = ["ab", "ba", "a"];
        let seg = v.segment_words(&words).unwrap();
        assert_eq!(seg.n_words(), 3);
        assert_eq!(v.detokenize(&seg), "ab ba a");
        assert_eq!(seg.word_spans().len(), 3);
        assert_eq!(seg.first_positions()[0], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s = v.sample_words(&words, 0.3, &mut rng).unwrap();
            assert_eq!(s.n_words(), 3);
            assert_eq!(v.detokenize(&s), "ab ba a");
        }
    }

    #[test]
    fn build_vocab_small_corpora() {
        let corpus: Vec<String> = std::iter::repeat("ab".to_string()).take(20).collect();
        let (v, report) = build_vocab(&VocabBuilder::new(3, 4, 5), &corpus).unwrap();
        for p in ["a", "b", "ab"] {
            assert!(v.id(p).is_some(), "missing {p}");
        }
        assert_eq!(report.alphabet_size, 2);

        let (v, _) = build_vocab(&VocabBuilder::new(2, 4, 5), &corpus).unwrap();
        assert_eq!(v.len(), 2);
        assert!(v.pieces().all(|(p, _)| p.chars().count() == 1));
    }

    #[test]
    fn em_loglik_is_non_decreasing() {
        let corpus: Vec<String> = ["abc", "abcabc", "bca", "ab", "cab", "abab"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (_, report) = build_vocab(&VocabBuilder::new(8, 3, 6), &corpus).unwrap();
        for round in &report.rounds {
            for w in round.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{round:?}");
            }
        }
    }
}
