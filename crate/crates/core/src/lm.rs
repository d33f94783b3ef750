//! Character n-gram language model and rescoring of enumerated CTC paths.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::ctc::collapse;
use crate::data::Alphabet;
use crate::engine::Tensor;

pub const START: char = '^';
pub const END: char = '$';
const HEADER: &str = "seqda-ngram v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmError {
    #[error("n-gram order must be >= 1")]
    BadOrder,
    #[error("corpus contains no words after removing punctuation and digits")]
    EmptyCorpus,
    #[error("no candidate paths to rescore")]
    NoCandidates,
    #[error("malformed n-gram file at line {line}: {detail}")]
    Malformed { line: usize, detail: String },
}

/// Lowercased alphabetic words; punctuation and digits are dropped.
pub fn tokenize(corpus: &str) -> Vec<String> {
    corpus
        .split_whitespace()
        .map(|tok| {
            tok.chars()
                .filter(|c| c.is_alphabetic())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    alphabet: BTreeSet<char>,
    counts: BTreeMap<String, BTreeMap<char, u64>>,
}

fn contexts(word: &str, n: usize) -> Vec<(String, char)> {
    let mut padded: Vec<char> = std::iter::repeat_n(START, n - 1).collect();
    padded.extend(word.chars());
    padded.push(END);
    (n - 1..padded.len())
        .map(|i| (padded[i + 1 - n..i].iter().collect(), padded[i]))
        .collect()
}

pub fn build_ngram(corpus: &str, n: usize) -> Result<NGramModel, LmError> {
    if n == 0 {
        return Err(LmError::BadOrder);
    }
    let words = tokenize(corpus);
    if words.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    let mut model = NGramModel {
        order: n,
        alphabet: BTreeSet::new(),
        counts: BTreeMap::new(),
    };
    for w in &words {
        model.alphabet.extend(w.chars());
        for (ctx, c) in contexts(w, n) {
            *model.counts.entry(ctx).or_default().entry(c).or_insert(0) += 1;
        }
    }
    Ok(model)
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alphabet(&self) -> &BTreeSet<char> {
        &self.alphabet
    }

    /// Raw count of `c` following `context` (`n - 1` tokens, `^`-padded).
    pub fn count(&self, context: &str, c: char) -> u64 {
        self.counts
            .get(context)
            .and_then(|m| m.get(&c))
            .copied()
            .unwrap_or(0)
    }

    /// Add-one smoothed probability over the alphabet plus the end token.
    pub fn prob(&self, context: &str, c: char) -> f64 {
        let total: u64 = self
            .counts
            .get(context)
            .map(|m| m.values().sum())
            .unwrap_or(0);
        let v = self.alphabet.len() as f64 + 1.0;
        (self.count(context, c) as f64 + 1.0) / (total as f64 + v)
    }

    /// Symbols a context distributes over (alphabet then end token).
    pub fn outcomes(&self) -> Vec<char> {
        self.alphabet
            .iter()
            .copied()
            .chain(std::iter::once(END))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{HEADER}\norder\t{}\nalphabet\t{}\n",
            self.order,
            self.alphabet.iter().collect::<String>()
        );
        for (ctx, m) in &self.counts {
            for (c, n) in m {
                out.push_str(&format!("{ctx}\t{c}\t{n}\n"));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, LmError> {
        let bad = |line: usize, detail: &str| LmError::Malformed {
            line,
            detail: detail.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err(bad(1, "missing header")),
        }
        let mut field = |name: &str| -> Result<String, LmError> {
            let (i, l) = lines.next().ok_or_else(|| bad(0, "truncated header"))?;
            l.strip_prefix(name)
                .and_then(|r| r.strip_prefix('\t'))
                .map(str::to_string)
                .ok_or_else(|| bad(i, &format!("expected `{name}`")))
        };
        let order: usize = field("order")?.parse().map_err(|_| bad(2, "bad order"))?;
        if order == 0 {
            return Err(LmError::BadOrder);
        }
        let alphabet: BTreeSet<char> = field("alphabet")?.chars().collect();
        let mut counts: BTreeMap<String, BTreeMap<char, u64>> = BTreeMap::new();
        for (i, l) in lines {
            let parts: Vec<&str> = l.split('\t').collect();
            if parts.len() != 3 {
                return Err(bad(i, "expected context, char and count"));
            }
            if parts[0].chars().count() != order - 1 {
                return Err(bad(i, "context length differs from order - 1"));
            }
            let mut cs = parts[1].chars();
            let c = match (cs.next(), cs.next()) {
                (Some(c), None) => c,
                _ => return Err(bad(i, "expected one character")),
            };
            let n: u64 = parts[2].parse().map_err(|_| bad(i, "bad count"))?;
            if n == 0 {
                return Err(bad(i, "zero count"));
            }
            counts.entry(parts[0].to_string()).or_default().insert(c, n);
        }
        Ok(Self {
            order,
            alphabet,
            counts,
        })
    }
}

/// Sum of smoothed log-probabilities over the word's characters and the end token.
pub fn ngram_logprob(model: &NGramModel, word: &str) -> f64 {
    contexts(word, model.order)
        .iter()
        .map(|(ctx, c)| model.prob(ctx, *c).ln())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePath {
    /// Highest-scoring frame path among those collapsing to `labels`.
    pub frames: Vec<usize>,
    pub labels: Vec<usize>,
    pub word: String,
    /// Log of the summed network probability of all merged frame paths.
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathConfig {
    /// Per-frame probability floor for a symbol to be expanded.
    pub threshold: f64,
    /// Frame-path count above which the beam cap applies.
    pub path_thresh: usize,
    /// Beam width once the cap applies.
    pub max_paths: usize,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            threshold: 0.001,
            path_thresh: 512,
            max_paths: 50,
        }
    }
}

impl PathConfig {
    /// No pruning at all.
    pub fn exhaustive() -> Self {
        Self {
            threshold: 0.0,
            path_thresh: usize::MAX,
            max_paths: usize::MAX,
        }
    }
}

/// Frame paths kept before collapsing, in descending score order (ties by
/// lexicographic frame path).
pub fn frame_paths(softmax: &Tensor, cfg: &PathConfig) -> Vec<(Vec<usize>, f64)> {
    let frames = softmax.rows();
    let survivors: Vec<Vec<usize>> = (0..frames)
        .map(|t| {
            let row = softmax.row(t);
            let keep: Vec<usize> = (0..row.len())
                .filter(|&k| row[k] > 0.0 && row[k] >= cfg.threshold)
                .collect();
            if keep.is_empty() {
                let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                vec![best]
            } else {
                keep
            }
        })
        .collect();
    let total = survivors
        .iter()
        .fold(1usize, |acc, s| acc.saturating_mul(s.len()));
    let width = if total > cfg.path_thresh {
        cfg.max_paths.max(1)
    } else {
        usize::MAX
    };

    let mut frontier: Vec<(Vec<usize>, f64)> = vec![(Vec::with_capacity(frames), 0.0)];
    for (t, keep) in survivors.iter().enumerate() {
        let row = softmax.row(t);
        let mut next = Vec::with_capacity(frontier.len() * keep.len());
        for (path, score) in &frontier {
            for &k in keep {
                let mut p = path.clone();
                p.push(k);
                next.push((p, score + row[k].ln()));
            }
        }
        if next.len() > width {
            next.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            next.truncate(width);
        }
        frontier = next;
    }
    frontier.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    frontier
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Candidate words from a `T' x (K + 1)` probability matrix (blank last).
/// Frame paths collapsing to the same word are merged by log-sum-exp.
pub fn enumerate_paths(
    softmax: &Tensor,
    alphabet: &Alphabet,
    cfg: &PathConfig,
) -> Vec<CandidatePath> {
    let blank = softmax.cols() - 1;
    let mut merged: BTreeMap<Vec<usize>, CandidatePath> = BTreeMap::new();
    for (frames, score) in frame_paths(softmax, cfg) {
        let labels = collapse(&frames, blank);
        match merged.get_mut(&labels) {
            Some(c) => c.log_prob = log_add(c.log_prob, score),
            None => {
                let word = alphabet.decode(&labels);
                merged.insert(
                    labels.clone(),
                    CandidatePath {
                        frames,
                        labels,
                        word,
                        log_prob: score,
                    },
                );
            }
        }
    }
    let mut out: Vec<CandidatePath> = merged.into_values().collect();
    for c in &mut out {
        c.log_prob = c.log_prob.min(0.0);
    }
    out.sort_by(|a, b| {
        b.log_prob
            .total_cmp(&a.log_prob)
            .then_with(|| a.word.cmp(&b.word))
    });
    out
}

/// Argmax of `log_prob + gamma * ngram_logprob`; ties prefer the higher
/// network score, then the lexicographically smaller word.
pub fn rescore<'a>(
    candidates: &'a [CandidatePath],
    model: &NGramModel,
    gamma: f64,
) -> Result<&'a CandidatePath, LmError> {
    let scored: Vec<(f64, &CandidatePath)> = candidates
        .iter()
        .map(|c| {
            let lm = if gamma == 0.0 {
                0.0
            } else {
                gamma * ngram_logprob(model, &c.word)
            };
            (c.log_prob + lm, c)
        })
        .collect();
    scored
        .into_iter()
        .max_by(|(sa, a), (sb, b)| {
            sa.total_cmp(sb)
                .then_with(|| a.log_prob.total_cmp(&b.log_prob))
                .then_with(|| b.word.cmp(&a.word))
        })
        .map(|(_, c)| c)
        .ok_or(LmError::NoCandidates)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bigram_counts() {
        let m = build_ngram("abc ab", 2).unwrap();
        assert_eq!(m.count("a", 'b'), 2);
        assert_eq!(m.count("^", 'a'), 2);
        assert_eq!(m.count("b", '$'), 1);
    }

    #[test]
    fn punctuation_and_digits_removed() {
        let m = build_ngram("A. 42", 2).unwrap();
        assert_eq!(m.alphabet().iter().collect::<String>(), "a");
        assert_eq!(m.count("^", 'a'), 1);
        assert_eq!(build_ngram("12 ...", 2).unwrap_err(), LmError::EmptyCorpus);
    }

    #[test]
    fn single_word_logprob() {
        let m = build_ngram("ab", 2).unwrap();
        assert!((ngram_logprob(&m, "ab") - 3.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn context_distribution_sums_to_one() {
        let m = build_ngram("the cat sat on the mat", 3).unwrap();
        for ctx in ["^^", "^t", "at", "zz"] {
            let s: f64 = m.outcomes().iter().map(|&c| m.prob(ctx, c)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn text_round_trip() {
        let m = build_ngram("hello world, hello there", 3).unwrap();
        assert_eq!(NGramModel::from_text(&m.to_text()).unwrap(), m);
        assert!(NGramModel::from_text("nope").is_err());
    }

    #[test]
    fn one_hot_gives_single_candidate() {
        let alpha = Alphabet::new("ab".chars());
        let sm = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let c = enumerate_paths(&sm, &alpha, &PathConfig::default());
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].word, "ab");
        assert_eq!(c[0].log_prob, 0.0);
    }

    #[test]
    fn empty_candidates_error() {
        let m = build_ngram("ab", 2).unwrap();
        assert_eq!(rescore(&[], &m, 1.0).unwrap_err(), LmError::NoCandidates);
    }
}
