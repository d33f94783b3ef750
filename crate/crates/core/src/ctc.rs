//! Connectionist temporal classification: loss, collapse rule and greedy decoding.
//!
//! Log-probability matrices are `T' x (K + 1)` with the blank at index `K`
//! (the last column).

use std::sync::Arc;

use thiserror::Error;

use crate::engine::{EngineError, Graph, NodeId, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("label too long for T'={frames}: needs at least {needed} frames")]
    LabelTooLong { frames: usize, needed: usize },
    #[error("empty label sequence")]
    EmptyLabel,
    #[error("label symbol {symbol} outside 0..{classes} (or equal to blank)")]
    InvalidSymbol { symbol: usize, classes: usize },
    #[error("label has zero probability under the given frames")]
    ZeroProbability,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// A non-empty label sequence over the alphabet (blank excluded).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSeq(Vec<usize>);

impl LabelSeq {
    pub fn new(symbols: Vec<usize>) -> Result<Self, CtcError> {
        if symbols.is_empty() {
            return Err(CtcError::EmptyLabel);
        }
        Ok(Self(symbols))
    }

    pub fn symbols(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Minimum number of frames needed to emit `labels`: one per symbol plus a
/// separating blank between each pair of equal neighbours.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Negative log-likelihood and its gradient with respect to the
/// log-probability matrix (`-occupancy`).
pub(crate) fn forward_backward(
    log_probs: &Tensor,
    labels: &[usize],
    blank: usize,
) -> Result<(f64, Tensor), CtcError> {
    let frames = log_probs.rows();
    let classes = log_probs.cols();
    if labels.is_empty() {
        return Err(CtcError::EmptyLabel);
    }
    if blank >= classes {
        return Err(CtcError::InvalidSymbol {
            symbol: blank,
            classes,
        });
    }
    if let Some(&s) = labels.iter().find(|&&s| s >= classes || s == blank) {
        return Err(CtcError::InvalidSymbol { symbol: s, classes });
    }
    let needed = min_frames(labels);
    if frames < needed {
        return Err(CtcError::LabelTooLong { frames, needed });
    }

    let s_len = 2 * labels.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { blank } else { labels[s / 2] })
        .collect();
    let skip_allowed = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let lp = |t: usize, k: usize| log_probs.get2(t, k);
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    alpha[1] = lp(0, ext[1]);
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if skip_allowed(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf {
                ninf
            } else {
                acc + lp(t, ext[s])
            };
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = lse2(alpha[last + s_len - 1], alpha[last + s_len - 2]);
    if !log_p.is_finite() {
        return Err(CtcError::ZeroProbability);
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = 0.0;
    beta[last + s_len - 2] = 0.0;
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let step = |s2: usize| beta[next + s2] + lp(t + 1, ext[s2]);
            let mut acc = step(s);
            if s + 1 < s_len {
                acc = lse2(acc, step(s + 1));
            }
            if s + 2 < s_len && skip_allowed(s + 2) {
                acc = lse2(acc, step(s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = Tensor::zeros(&[frames, classes]);
    for t in 0..frames {
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            if v == ninf {
                continue;
            }
            grad.data_mut()[t * classes + ext[s]] -= (v - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

/// `-log P(label | log_probs)`.
pub fn ctc_loss(log_probs: &Tensor, label: &LabelSeq, blank: usize) -> Result<f64, CtcError> {
    forward_backward(log_probs, label.symbols(), blank).map(|(nll, _)| nll)
}

/// Loss together with its gradient with respect to `log_probs`.
pub fn ctc_loss_and_grad(
    log_probs: &Tensor,
    label: &LabelSeq,
    blank: usize,
) -> Result<(f64, Tensor), CtcError> {
    forward_backward(log_probs, label.symbols(), blank)
}

/// Append a CTC loss node; fails early with [`CtcError::LabelTooLong`].
pub fn ctc_node(
    g: &mut Graph,
    log_probs: NodeId,
    label: &LabelSeq,
    blank: usize,
) -> Result<NodeId, CtcError> {
    let frames = g.value(log_probs).rows();
    let needed = min_frames(label.symbols());
    if frames < needed {
        return Err(CtcError::LabelTooLong { frames, needed });
    }
    Ok(g.ctc(log_probs, Arc::new(label.symbols().to_vec()), blank)?)
}

/// Merge adjacent repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(path.len());
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Per-frame argmax (lowest index on ties), then collapse.
pub fn best_path_decode(log_probs: &Tensor, blank: usize) -> Vec<usize> {
    let path: Vec<usize> = (0..log_probs.rows())
        .map(|t| {
            let row = log_probs.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path, blank)
}
