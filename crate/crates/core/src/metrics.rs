//! Edit distances and character/word error rates.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1} (substitution-only distance needs equal lengths)")]
    LengthMismatch(usize, usize),
    #[error("empty prediction/reference lists")]
    Empty,
    #[error("{preds} predictions for {refs} references")]
    CountMismatch { preds: usize, refs: usize },
    #[error("reference {0} is empty")]
    EmptyReference(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdMode {
    /// Levenshtein: unit-cost substitutions, insertions and deletions.
    Full,
    /// Hamming distance; only defined for equal lengths.
    SubstitutionOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdResult {
    pub distance: usize,
    pub mode: EdMode,
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn hamming<T: PartialEq>(a: &[T], b: &[T]) -> Result<usize, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count())
}

pub fn edit_distance(a: &str, b: &str, mode: EdMode) -> Result<EdResult, MetricsError> {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let distance = match mode {
        EdMode::Full => levenshtein(&a, &b),
        EdMode::SubstitutionOnly => hamming(&a, &b)?,
    };
    Ok(EdResult { distance, mode })
}

fn check_lists<S: AsRef<str>>(preds: &[S], refs: &[S]) -> Result<(), MetricsError> {
    if refs.is_empty() {
        return Err(MetricsError::Empty);
    }
    if preds.len() != refs.len() {
        return Err(MetricsError::CountMismatch {
            preds: preds.len(),
            refs: refs.len(),
        });
    }
    if let Some(i) = refs.iter().position(|r| r.as_ref().is_empty()) {
        return Err(MetricsError::EmptyReference(i));
    }
    Ok(())
}

/// Corpus-level character error rate: total edits over total reference characters.
pub fn cer<S: AsRef<str>>(preds: &[S], refs: &[S]) -> Result<f64, MetricsError> {
    check_lists(preds, refs)?;
    let mut edits = 0usize;
    let mut chars = 0usize;
    for (p, r) in preds.iter().zip(refs) {
        let pc: Vec<char> = p.as_ref().chars().collect();
        let rc: Vec<char> = r.as_ref().chars().collect();
        edits += levenshtein(&pc, &rc);
        chars += rc.len();
    }
    Ok(edits as f64 / chars as f64)
}

/// Fraction of samples whose predicted word differs from the reference.
pub fn wer<S: AsRef<str>>(preds: &[S], refs: &[S]) -> Result<f64, MetricsError> {
    check_lists(preds, refs)?;
    let wrong = preds
        .iter()
        .zip(refs)
        .filter(|(p, r)| p.as_ref() != r.as_ref())
        .count();
    Ok(wrong as f64 / refs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_substitution() {
        assert_eq!(
            edit_distance("abc", "abc", EdMode::Full).unwrap().distance,
            0
        );
        assert_eq!(
            edit_distance("abc", "axc", EdMode::SubstitutionOnly)
                .unwrap()
                .distance,
            1
        );
        assert_eq!(edit_distance("", "abc", EdMode::Full).unwrap().distance, 3);
    }

    #[test]
    fn substitution_only_rejects_unequal_lengths() {
        let err = edit_distance("ab", "abc", EdMode::SubstitutionOnly).unwrap_err();
        assert!(err.to_string().contains("length mismatch"));
    }

    #[test]
    fn cer_and_wer_examples() {
        assert_eq!(cer(&["ab"], &["ac"]).unwrap(), 0.5);
        assert_eq!(cer(&["ab", "cd"], &["ab", "cd"]).unwrap(), 0.0);
        assert_eq!(
            wer(&["a", "b", "c", "x"], &["a", "b", "c", "d"]).unwrap(),
            0.25
        );
        assert_eq!(wer(&["cat"], &["cut"]).unwrap(), 1.0);
        assert_eq!(wer(&["a"], &["a"]).unwrap(), 0.0);
    }

    #[test]
    fn empty_lists_are_errors() {
        let none: [&str; 0] = [];
        assert_eq!(cer(&none, &none).unwrap_err(), MetricsError::Empty);
        assert_eq!(wer(&none, &none).unwrap_err(), MetricsError::Empty);
        assert!(matches!(
            cer(&["a"], &["a", "b"]),
            Err(MetricsError::CountMismatch { .. })
        ));
    }
}
