//! Tablet/paper pair dictionary keyed by substitution-only edit distance,
//! curriculum triplet selection, dynamic margin and the pairwise losses.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Dataset;
use crate::dml::{dml_node, DmlError, DmlLossSpec, EmbeddingBag};
use crate::engine::{EngineError, Graph, NodeId};
use crate::metrics::hamming;

/// Largest edit distance stored in the dictionary.
pub const MAX_ED: usize = 10;
/// Clamp interval for the mean negative edit distance.
pub const MARGIN_CLAMP: (f64, f64) = (1.0, 11.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PairingError {
    #[error("no positives available: no tablet/paper pair has identical labels")]
    NoPositives,
    #[error("no negatives available in the pair dictionary")]
    NoNegatives,
    #[error("epoch {e} outside 0..{max_e}")]
    EpochOutOfRange { e: usize, max_e: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("{anchors} anchors, {positives} positives, {negatives} negatives")]
    CountMismatch {
        anchors: usize,
        positives: usize,
        negatives: usize,
    },
    #[error("anchor index {0} outside the tablet set")]
    UnknownAnchor(usize),
    #[error("margin scale beta must be positive and finite, got {0}")]
    BadBeta(f64),
    #[error(transparent)]
    Dml(#[from] DmlError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Paper indices per edit distance `0..=MAX_ED` for each distinct tablet label.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletDictionary {
    anchor_group: Vec<usize>,
    groups: Vec<Vec<Vec<usize>>>,
    tablet_ids: Vec<String>,
    paper_ids: Vec<String>,
}

/// Index every equal-length tablet/paper label pair with distance at most
/// [`MAX_ED`]. Labels are compared character-wise; both sets are expected to
/// share one alphabet.
pub fn build_pair_dictionary(
    tablet: &Dataset,
    paper: &Dataset,
) -> Result<TripletDictionary, PairingError> {
    let mut paper_by_label: BTreeMap<Vec<char>, Vec<usize>> = BTreeMap::new();
    for (j, s) in paper.samples.iter().enumerate() {
        paper_by_label
            .entry(s.label.chars().collect())
            .or_default()
            .push(j);
    }
    let mut label_group: BTreeMap<Vec<char>, usize> = BTreeMap::new();
    let mut groups: Vec<Vec<Vec<usize>>> = Vec::new();
    let mut anchor_group = Vec::with_capacity(tablet.len());
    for s in &tablet.samples {
        let key: Vec<char> = s.label.chars().collect();
        let next = groups.len();
        let gid = *label_group.entry(key.clone()).or_insert(next);
        if gid == next {
            let mut per_ed = vec![Vec::new(); MAX_ED + 1];
            for (label, idx) in &paper_by_label {
                if let Ok(d) = hamming(&key, label) {
                    if d <= MAX_ED {
                        per_ed[d].extend_from_slice(idx);
                    }
                }
            }
            for list in &mut per_ed {
                list.sort_unstable();
            }
            groups.push(per_ed);
        }
        anchor_group.push(gid);
    }
    let dict = TripletDictionary {
        anchor_group,
        groups,
        tablet_ids: tablet.samples.iter().map(|s| s.id.clone()).collect(),
        paper_ids: paper.samples.iter().map(|s| s.id.clone()).collect(),
    };
    if dict.counts()[0] == 0 {
        return Err(PairingError::NoPositives);
    }
    Ok(dict)
}

impl TripletDictionary {
    pub fn num_anchors(&self) -> usize {
        self.anchor_group.len()
    }

    /// Number of stored pairs per edit distance.
    pub fn counts(&self) -> [usize; MAX_ED + 1] {
        let mut out = [0; MAX_ED + 1];
        for &g in &self.anchor_group {
            for (d, list) in self.groups[g].iter().enumerate() {
                out[d] += list.len();
            }
        }
        out
    }

    /// Paper indices at distance `ed` from tablet sample `anchor`.
    pub fn partners(&self, anchor: usize, ed: usize) -> &[usize] {
        match self.anchor_group.get(anchor) {
            Some(&g) if ed <= MAX_ED => &self.groups[g][ed],
            _ => &[],
        }
    }

    pub fn positives(&self, anchor: usize) -> &[usize] {
        self.partners(anchor, 0)
    }

    /// All `(tablet, paper)` pairs at distance `ed`, ordered by tablet then paper index.
    pub fn pairs(&self, ed: usize) -> Vec<(usize, usize)> {
        (0..self.num_anchors())
            .flat_map(|a| self.partners(a, ed).iter().map(move |&p| (a, p)))
            .collect()
    }

    /// `ed,tablet_id,paper_id` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ed,tablet_id,paper_id\n");
        for d in 0..=MAX_ED {
            for (a, p) in self.pairs(d) {
                out.push_str(&format!(
                    "{d},{},{}\n",
                    self.tablet_ids[a], self.paper_ids[p]
                ));
            }
        }
        out
    }

    /// `ed,pairs` histogram rows.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("ed,pairs\n");
        for (d, n) in self.counts().iter().enumerate() {
            out.push_str(&format!("{d},{n}\n"));
        }
        out
    }
}

/// `1 + floor((max_e - e - 1) / 20)`
pub fn ed_lower_bound(e: usize, max_e: usize) -> Result<usize, PairingError> {
    if e >= max_e {
        return Err(PairingError::EpochOutOfRange { e, max_e });
    }
    Ok(1 + (max_e - e - 1) / 20)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    /// Distance between anchor and negative labels.
    pub negative_ed: usize,
    /// Negative came from below the schedule bound.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Selection {
    pub triplets: Vec<Triplet>,
    /// Anchors without a positive or any negative.
    pub skipped: usize,
    pub fallbacks: usize,
}

/// One triplet per anchor: a uniform positive, then a uniform negative from
/// the smallest populated distance at or above the bound, else the largest
/// populated one below it.
pub fn select_triplets(
    anchors: &[usize],
    dict: &TripletDictionary,
    e: usize,
    max_e: usize,
    seed: u64,
) -> Result<Selection, PairingError> {
    let bound = ed_lower_bound(e, max_e)?;
    if dict.counts()[1..].iter().all(|&n| n == 0) {
        return Err(PairingError::NoNegatives);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sel = Selection::default();
    for &a in anchors {
        if a >= dict.num_anchors() {
            return Err(PairingError::UnknownAnchor(a));
        }
        let pos = dict.positives(a);
        let above = (bound..=MAX_ED).find(|&d| !dict.partners(a, d).is_empty());
        let below = (1..bound.min(MAX_ED + 1))
            .rev()
            .find(|&d| !dict.partners(a, d).is_empty());
        let (ed, fallback) = match (above, below) {
            (Some(d), _) => (d, false),
            (None, Some(d)) => (d, true),
            (None, None) => {
                sel.skipped += 1;
                continue;
            }
        };
        if pos.is_empty() {
            sel.skipped += 1;
            continue;
        }
        let positive = pos[rng.gen_range(0..pos.len())];
        let negs = dict.partners(a, ed);
        let negative = negs[rng.gen_range(0..negs.len())];
        sel.fallbacks += usize::from(fallback);
        sel.triplets.push(Triplet {
            anchor: a,
            positive,
            negative,
            negative_ed: ed,
            fallback,
        });
    }
    Ok(sel)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginPolicy {
    pub beta: f64,
}

impl MarginPolicy {
    pub fn new(beta: f64) -> Result<Self, PairingError> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(PairingError::BadBeta(beta));
        }
        Ok(Self { beta })
    }

    /// `beta * clamp(ed_mean, 1, 11)`
    pub fn alpha(&self, ed_mean: f64) -> f64 {
        self.beta * ed_mean.clamp(MARGIN_CLAMP.0, MARGIN_CLAMP.1)
    }
}

/// Mean anchor-negative edit distance of a batch.
pub fn mean_negative_ed(triplets: &[Triplet]) -> Result<f64, PairingError> {
    if triplets.is_empty() {
        return Err(PairingError::EmptyBatch);
    }
    Ok(triplets.iter().map(|t| t.negative_ed as f64).sum::<f64>() / triplets.len() as f64)
}

pub fn dynamic_margin(triplets: &[Triplet], policy: &MarginPolicy) -> Result<f64, PairingError> {
    Ok(policy.alpha(mean_negative_ed(triplets)?))
}

/// `max(d(a, p) - d(a, n) + alpha, 0)` for one triplet.
pub fn triplet_term_node(
    g: &mut Graph,
    spec: &DmlLossSpec,
    a: NodeId,
    p: NodeId,
    n: NodeId,
    alpha: f64,
) -> Result<NodeId, PairingError> {
    let dp = dml_node(g, spec, a, p)?;
    let dn = dml_node(g, spec, a, n)?;
    let diff = g.sub(dp, dn)?;
    let shifted = g.add_const(diff, alpha)?;
    Ok(g.relu(shifted)?)
}

/// `d(a, b)` for a same-label pair, `max(alpha - d(a, b), 0)` otherwise.
pub fn contrastive_term_node(
    g: &mut Graph,
    spec: &DmlLossSpec,
    a: NodeId,
    b: NodeId,
    same: bool,
    alpha: f64,
) -> Result<NodeId, PairingError> {
    let d = dml_node(g, spec, a, b)?;
    if same {
        return Ok(d);
    }
    let neg = g.scale(d, -1.0)?;
    let shifted = g.add_const(neg, alpha)?;
    Ok(g.relu(shifted)?)
}

/// Sum of triplet hinges over the batch.
pub fn triplet_loss(
    anchors: &[EmbeddingBag],
    positives: &[EmbeddingBag],
    negatives: &[EmbeddingBag],
    spec: &DmlLossSpec,
    alpha: f64,
) -> Result<f64, PairingError> {
    if anchors.is_empty() {
        return Err(PairingError::EmptyBatch);
    }
    if positives.len() != anchors.len() || negatives.len() != anchors.len() {
        return Err(PairingError::CountMismatch {
            anchors: anchors.len(),
            positives: positives.len(),
            negatives: negatives.len(),
        });
    }
    let mut total = 0.0;
    for ((a, p), n) in anchors.iter().zip(positives).zip(negatives) {
        let mut g = Graph::new();
        let (na, np, nn) = (
            g.constant(a.tensor().clone()),
            g.constant(p.tensor().clone()),
            g.constant(n.tensor().clone()),
        );
        let term = triplet_term_node(&mut g, spec, na, np, nn, alpha)?;
        total += g.value(term).item();
    }
    Ok(total)
}

/// Sum of contrastive terms; each pair carries a same-label flag.
pub fn contrastive_loss(
    pairs: &[(EmbeddingBag, EmbeddingBag, bool)],
    spec: &DmlLossSpec,
    alpha: f64,
) -> Result<f64, PairingError> {
    if pairs.is_empty() {
        return Err(PairingError::EmptyBatch);
    }
    let mut total = 0.0;
    for (a, b, same) in pairs {
        let mut g = Graph::new();
        let na = g.constant(a.tensor().clone());
        let nb = g.constant(b.tensor().clone());
        let term = contrastive_term_node(&mut g, spec, na, nb, *same, alpha)?;
        total += g.value(term).item();
    }
    Ok(total)
}
