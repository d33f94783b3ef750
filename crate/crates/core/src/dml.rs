//! Distances between two bags of embedding rows: moment matching (HoMM and
//! its grouped/sampled/kernelized forms), kernel MMD and the CORAL family.
//!
//! Every distance is built on the autodiff tape, so the scalar functions here
//! and the nodes used during training share one implementation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, Graph, NodeId, Tensor};

/// Largest tensor power materialized by the full HoMM forms.
pub const TENSOR_POWER_LIMIT: usize = 10_000_000;
/// Default number of sampled tensor entries.
pub const DEFAULT_SAMPLES: usize = 1000;

const BETA_TABLE_TOML: &str = include_str!("../config/beta_table.toml");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DmlError {
    #[error("feature width mismatch: {src} vs {tgt}")]
    WidthMismatch { src: usize, tgt: usize },
    #[error("{kind} needs at least {need} rows per bag, got {got}")]
    TooFewRows {
        kind: &'static str,
        need: usize,
        got: usize,
    },
    #[error("embedding bag must be a non-empty matrix, got shape {0:?}")]
    BadBag(Vec<usize>),
    #[error("order p={0} not supported (1..=3)")]
    BadOrder(usize),
    #[error("H^p = {h}^{p} exceeds {TENSOR_POWER_LIMIT}; use the sampled variant")]
    TensorTooLarge { h: usize, p: usize },
    #[error("group count {groups} must lie in 1..={width}")]
    BadGroups { groups: usize, width: usize },
    #[error("sample count must be >= 1")]
    NoSamples,
    #[error("variant {variant} does not apply to {kind}")]
    BadVariant { kind: String, variant: String },
    #[error("no beta for {kind} at fusion point {c}")]
    UnknownBeta { kind: String, c: usize },
    #[error("unknown loss kind `{0}`")]
    UnknownKind(String),
    #[error("beta table: {0}")]
    BetaTable(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Rows are feature vectors (time steps and/or batch elements).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBag(Tensor);

impl EmbeddingBag {
    pub fn new(rows: Tensor) -> Result<Self, DmlError> {
        if rows.shape().len() != 2 || rows.is_empty() {
            return Err(DmlError::BadBag(rows.shape().to_vec()));
        }
        Ok(Self(rows))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DmlError> {
        Self::new(Tensor::from_rows(rows)?)
    }

    /// First `valid` rows of a fusion-tap embedding.
    pub fn from_tap(tap: &Tensor, valid: usize) -> Result<Self, DmlError> {
        let n = valid.clamp(1, tap.rows());
        let h = tap.cols();
        Self::new(Tensor::matrix(n, h, tap.data()[..n * h].to_vec()))
    }

    /// Row-wise concatenation (batch-level matching).
    pub fn concat(bags: &[EmbeddingBag]) -> Result<Self, DmlError> {
        let first = bags.first().ok_or(DmlError::BadBag(vec![0]))?;
        let h = first.width();
        let mut data = Vec::new();
        for b in bags {
            if b.width() != h {
                return Err(DmlError::WidthMismatch {
                    src: h,
                    tgt: b.width(),
                });
            }
            data.extend_from_slice(b.0.data());
        }
        Self::new(Tensor::matrix(data.len() / h, h, data))
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DmlKind {
    /// Kernel MMD (order 1).
    KMmd,
    /// Moment matching of order `p`.
    Homm {
        p: usize,
    },
    /// Kernel MMD over sampled order-`p` monomial features.
    KHomm {
        p: usize,
    },
    Coral,
    JeffCoral,
    SteinCoral,
}

impl DmlKind {
    /// The eight kinds that carry a beta row.
    pub const TABLE: [DmlKind; 8] = [
        DmlKind::KMmd,
        DmlKind::Homm { p: 2 },
        DmlKind::Homm { p: 3 },
        DmlKind::KHomm { p: 2 },
        DmlKind::KHomm { p: 3 },
        DmlKind::Coral,
        DmlKind::JeffCoral,
        DmlKind::SteinCoral,
    ];

    pub fn key(&self) -> String {
        match self {
            DmlKind::KMmd => "kmmd_p1".into(),
            DmlKind::Homm { p } => format!("homm_p{p}"),
            DmlKind::KHomm { p } => format!("khomm_p{p}"),
            DmlKind::Coral => "coral".into(),
            DmlKind::JeffCoral => "jeff_coral".into(),
            DmlKind::SteinCoral => "stein_coral".into(),
        }
    }

    fn order(&self) -> Option<usize> {
        match self {
            DmlKind::Homm { p } | DmlKind::KHomm { p } => Some(*p),
            _ => None,
        }
    }
}

impl fmt::Display for DmlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for DmlKind {
    type Err = DmlError;

    fn from_str(s: &str) -> Result<Self, DmlError> {
        let k = s.trim().to_ascii_lowercase().replace('-', "_");
        let order = |rest: &str| match rest {
            "1" => Some(1),
            "2" => Some(2),
            "3" => Some(3),
            _ => None,
        };
        let kind = match k.as_str() {
            "kmmd" | "kmmd_p1" => Some(DmlKind::KMmd),
            "coral" => Some(DmlKind::Coral),
            "jeff_coral" | "jeffcoral" => Some(DmlKind::JeffCoral),
            "stein_coral" | "steincoral" => Some(DmlKind::SteinCoral),
            _ => {
                if let Some(r) = k.strip_prefix("khomm_p") {
                    order(r).map(|p| DmlKind::KHomm { p })
                } else if let Some(r) = k.strip_prefix("homm_p") {
                    order(r).map(|p| DmlKind::Homm { p })
                } else {
                    None
                }
            }
        };
        kind.ok_or_else(|| DmlError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Full tensor power (exhaustive monomials for kernel HoMM).
    Full,
    /// Mean over `n` contiguous neuron groups of width `floor(H / n)`.
    Group(usize),
    /// `T` uniformly drawn index tuples shared by both bags.
    Sampled(usize),
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::Group(n) => write!(f, "group({n})"),
            Variant::Sampled(t) => write!(f, "sampled({t})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise distance over the pooled bags.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmlLossSpec {
    pub kind: DmlKind,
    pub variant: Variant,
    pub bandwidth: Bandwidth,
    /// Seed for tuple sampling.
    pub seed: u64,
}

impl DmlLossSpec {
    /// Kernel HoMM defaults to `Sampled(1000)`, everything else to `Full`.
    pub fn new(kind: DmlKind) -> Self {
        let variant = match kind {
            DmlKind::KHomm { .. } => Variant::Sampled(DEFAULT_SAMPLES),
            _ => Variant::Full,
        };
        Self {
            kind,
            variant,
            bandwidth: Bandwidth::Median,
            seed: 0,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_bandwidth(mut self, bandwidth: Bandwidth) -> Self {
        self.bandwidth = bandwidth;
        self
    }
}

/// `T` index tuples in `[0, h)^p`, flattened.
pub fn sample_tuples(h: usize, p: usize, t: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..t * p).map(|_| rng.gen_range(0..h)).collect()
}

/// All `h^p` tuples in lexicographic order, flattened.
pub fn all_tuples(h: usize, p: usize) -> Vec<usize> {
    let total = h.pow(p as u32);
    let mut out = Vec::with_capacity(total * p);
    for mut code in 0..total {
        let mut tuple = vec![0; p];
        for slot in tuple.iter_mut().rev() {
            *slot = code % h;
            code /= h;
        }
        out.extend(tuple);
    }
    out
}

fn check_order(p: usize) -> Result<(), DmlError> {
    if (1..=3).contains(&p) {
        Ok(())
    } else {
        Err(DmlError::BadOrder(p))
    }
}

fn check_power(h: usize, p: usize) -> Result<(), DmlError> {
    let mut size = 1usize;
    for _ in 0..p {
        size = size.saturating_mul(h);
    }
    if size > TENSOR_POWER_LIMIT {
        return Err(DmlError::TensorTooLarge { h, p });
    }
    Ok(())
}

fn homm_full_node(g: &mut Graph, a: NodeId, b: NodeId, p: usize) -> Result<NodeId, DmlError> {
    check_power(g.value(a).cols(), p)?;
    let ma = g.tensor_power_mean(a, p)?;
    let mb = g.tensor_power_mean(b, p)?;
    let d = g.sub(ma, mb)?;
    let sq = g.square(d)?;
    Ok(g.mean(sq)?)
}

fn homm_tuple_node(
    g: &mut Graph,
    a: NodeId,
    b: NodeId,
    p: usize,
    index: Arc<Vec<usize>>,
) -> Result<NodeId, DmlError> {
    let fa = g.sampled_monomials(a, p, index.clone())?;
    let fb = g.sampled_monomials(b, p, index)?;
    let ma = g.mean_rows(fa)?;
    let mb = g.mean_rows(fb)?;
    let d = g.sub(ma, mb)?;
    let sq = g.square(d)?;
    Ok(g.mean(sq)?)
}

fn kmmd_node(g: &mut Graph, a: NodeId, b: NodeId, bw: Bandwidth) -> Result<NodeId, DmlError> {
    let ns = g.value(a).rows();
    let pooled = g.concat_rows(a, b)?;
    let d = g.pairwise_sq_dist(pooled, pooled)?;
    let sigma = match bw {
        Bandwidth::Median => g.median_pair_dist(d)?,
        Bandwidth::Fixed(s) => g.constant(Tensor::scalar(s)),
    };
    let k = g.rbf(d, sigma)?;
    Ok(g.block_mmd(k, ns)?)
}

fn cov_node(g: &mut Graph, x: NodeId) -> Result<NodeId, DmlError> {
    let n = g.value(x).rows();
    let c = g.center(x, 0)?;
    let ct = g.transpose(c)?;
    let gram = g.matmul(ct, c)?;
    Ok(g.scale(gram, 1.0 / n as f64)?)
}

fn coral_family_node(
    g: &mut Graph,
    kind: DmlKind,
    a: NodeId,
    b: NodeId,
) -> Result<NodeId, DmlError> {
    let h = g.value(a).cols() as f64;
    let ca = cov_node(g, a)?;
    let cb = cov_node(g, b)?;
    match kind {
        DmlKind::Coral => {
            let d = g.sub(ca, cb)?;
            let sq = g.square(d)?;
            let s = g.sum(sq)?;
            Ok(g.scale(s, 1.0 / (4.0 * h * h))?)
        }
        DmlKind::JeffCoral => {
            let ra = g.regularize_cov(ca)?;
            let rb = g.regularize_cov(cb)?;
            let ia = g.inverse(ra)?;
            let ib = g.inverse(rb)?;
            let ab = g.matmul(ra, ib)?;
            let ba = g.matmul(rb, ia)?;
            let t1 = g.trace(ab)?;
            let t2 = g.trace(ba)?;
            let s = g.add(t1, t2)?;
            Ok(g.add_const(s, -2.0 * h)?)
        }
        DmlKind::SteinCoral => {
            let sum = g.add(ca, cb)?;
            let mid = g.scale(sum, 0.5)?;
            let rm = g.regularize_cov(mid)?;
            let ra = g.regularize_cov(ca)?;
            let rb = g.regularize_cov(cb)?;
            let lm = g.logdet(rm)?;
            let la = g.logdet(ra)?;
            let lb = g.logdet(rb)?;
            let side = g.add(la, lb)?;
            let half = g.scale(side, -0.5)?;
            Ok(g.add(lm, half)?)
        }
        _ => unreachable!("not a covariance kind"),
    }
}

/// Distance for one kind over a (possibly column-restricted) pair of bags.
fn kind_node(
    g: &mut Graph,
    spec: &DmlLossSpec,
    a: NodeId,
    b: NodeId,
    sampled: Option<usize>,
) -> Result<NodeId, DmlError> {
    let h = g.value(a).cols();
    match spec.kind {
        DmlKind::Homm { p } => match sampled {
            Some(t) => homm_tuple_node(g, a, b, p, Arc::new(sample_tuples(h, p, t, spec.seed))),
            None => homm_full_node(g, a, b, p),
        },
        DmlKind::KHomm { p } => {
            let index = match sampled {
                Some(t) => sample_tuples(h, p, t, spec.seed),
                None => {
                    check_power(h, p)?;
                    all_tuples(h, p)
                }
            };
            let index = Arc::new(index);
            let fa = g.sampled_monomials(a, p, index.clone())?;
            let fb = g.sampled_monomials(b, p, index)?;
            kmmd_node(g, fa, fb, spec.bandwidth)
        }
        DmlKind::KMmd => kmmd_node(g, a, b, spec.bandwidth),
        DmlKind::Coral | DmlKind::JeffCoral | DmlKind::SteinCoral => {
            coral_family_node(g, spec.kind, a, b)
        }
    }
}

fn min_rows(kind: DmlKind) -> (usize, &'static str) {
    match kind {
        DmlKind::Coral => (2, "coral"),
        DmlKind::JeffCoral => (2, "jeff_coral"),
        DmlKind::SteinCoral => (2, "stein_coral"),
        _ => (1, "distance"),
    }
}

/// Append the distance selected by `spec` between bags `a` and `b`.
pub fn dml_node(
    g: &mut Graph,
    spec: &DmlLossSpec,
    a: NodeId,
    b: NodeId,
) -> Result<NodeId, DmlError> {
    let (sa, sb) = (g.value(a).shape().to_vec(), g.value(b).shape().to_vec());
    for s in [&sa, &sb] {
        if s.len() != 2 {
            return Err(DmlError::BadBag(s.clone()));
        }
    }
    let h = sa[1];
    if sb[1] != h {
        return Err(DmlError::WidthMismatch { src: h, tgt: sb[1] });
    }
    let (need, name) = min_rows(spec.kind);
    let got = sa[0].min(sb[0]);
    if got < need {
        return Err(DmlError::TooFewRows {
            kind: name,
            need,
            got,
        });
    }
    if let Some(p) = spec.kind.order() {
        check_order(p)?;
    }
    let bad_variant = || DmlError::BadVariant {
        kind: spec.kind.key(),
        variant: spec.variant.to_string(),
    };
    match spec.variant {
        Variant::Full => kind_node(g, spec, a, b, None),
        Variant::Sampled(t) => {
            if !matches!(spec.kind, DmlKind::Homm { .. } | DmlKind::KHomm { .. }) {
                return Err(bad_variant());
            }
            if t == 0 {
                return Err(DmlError::NoSamples);
            }
            kind_node(g, spec, a, b, Some(t))
        }
        Variant::Group(n) => {
            if n == 0 || n > h {
                return Err(DmlError::BadGroups {
                    groups: n,
                    width: h,
                });
            }
            let w = h / n;
            let mut total = None;
            for k in 0..n {
                let ga = g.slice_cols(a, k * w, w)?;
                let gb = g.slice_cols(b, k * w, w)?;
                let d = kind_node(g, spec, ga, gb, None)?;
                total = Some(match total {
                    None => d,
                    Some(t) => g.add(t, d)?,
                });
            }
            let total = total.expect("at least one group");
            Ok(g.scale(total, 1.0 / n as f64)?)
        }
    }
}

fn evaluate(spec: &DmlLossSpec, a: &EmbeddingBag, b: &EmbeddingBag) -> Result<f64, DmlError> {
    let mut g = Graph::new();
    let na = g.constant(a.0.clone());
    let nb = g.constant(b.0.clone());
    let d = dml_node(&mut g, spec, na, nb)?;
    Ok(g.value(d).item())
}

/// Distance selected by `spec`.
pub fn dml_distance(
    spec: &DmlLossSpec,
    a: &EmbeddingBag,
    b: &EmbeddingBag,
) -> Result<f64, DmlError> {
    evaluate(spec, a, b)
}

/// Distance and its gradients with respect to both bags.
pub fn dml_distance_and_grads(
    spec: &DmlLossSpec,
    a: &EmbeddingBag,
    b: &EmbeddingBag,
) -> Result<(f64, Tensor, Tensor), DmlError> {
    let mut g = Graph::new();
    let na = g.param("a", a.0.clone());
    let nb = g.param("b", b.0.clone());
    let d = dml_node(&mut g, spec, na, nb)?;
    let mut grads = g.param_grads(d)?;
    let ga = grads.remove("a").expect("registered");
    let gb = grads.remove("b").expect("registered");
    Ok((g.value(d).item(), ga, gb))
}

/// `(1/H^p) || mean src^(x)p - mean tgt^(x)p ||_F^2`
pub fn homm(src: &EmbeddingBag, tgt: &EmbeddingBag, p: usize) -> Result<f64, DmlError> {
    evaluate(&DmlLossSpec::new(DmlKind::Homm { p }), src, tgt)
}

pub fn homm_grouped(
    src: &EmbeddingBag,
    tgt: &EmbeddingBag,
    p: usize,
    groups: usize,
) -> Result<f64, DmlError> {
    evaluate(
        &DmlLossSpec::new(DmlKind::Homm { p }).with_variant(Variant::Group(groups)),
        src,
        tgt,
    )
}

pub fn homm_sampled(
    src: &EmbeddingBag,
    tgt: &EmbeddingBag,
    p: usize,
    t: usize,
    seed: u64,
) -> Result<f64, DmlError> {
    let spec = DmlLossSpec::new(DmlKind::Homm { p })
        .with_variant(Variant::Sampled(t))
        .with_seed(seed);
    evaluate(&spec, src, tgt)
}

/// HoMM restricted to explicit flattened index tuples.
pub fn homm_tuples(
    src: &EmbeddingBag,
    tgt: &EmbeddingBag,
    p: usize,
    tuples: &[usize],
) -> Result<f64, DmlError> {
    check_order(p)?;
    if src.width() != tgt.width() {
        return Err(DmlError::WidthMismatch {
            src: src.width(),
            tgt: tgt.width(),
        });
    }
    if tuples.is_empty() {
        return Err(DmlError::NoSamples);
    }
    let mut g = Graph::new();
    let a = g.constant(src.0.clone());
    let b = g.constant(tgt.0.clone());
    let d = homm_tuple_node(&mut g, a, b, p, Arc::new(tuples.to_vec()))?;
    Ok(g.value(d).item())
}

pub fn kmmd(src: &EmbeddingBag, tgt: &EmbeddingBag, bandwidth: Bandwidth) -> Result<f64, DmlError> {
    evaluate(
        &DmlLossSpec::new(DmlKind::KMmd).with_bandwidth(bandwidth),
        src,
        tgt,
    )
}

pub fn khomm(
    src: &EmbeddingBag,
    tgt: &EmbeddingBag,
    p: usize,
    t: usize,
    seed: u64,
    bandwidth: Bandwidth,
) -> Result<f64, DmlError> {
    let spec = DmlLossSpec::new(DmlKind::KHomm { p })
        .with_variant(Variant::Sampled(t))
        .with_seed(seed)
        .with_bandwidth(bandwidth);
    evaluate(&spec, src, tgt)
}

pub fn coral(src: &EmbeddingBag, tgt: &EmbeddingBag) -> Result<f64, DmlError> {
    evaluate(&DmlLossSpec::new(DmlKind::Coral), src, tgt)
}

pub fn jeff_coral(src: &EmbeddingBag, tgt: &EmbeddingBag) -> Result<f64, DmlError> {
    evaluate(&DmlLossSpec::new(DmlKind::JeffCoral), src, tgt)
}

pub fn stein_coral(src: &EmbeddingBag, tgt: &EmbeddingBag) -> Result<f64, DmlError> {
    evaluate(&DmlLossSpec::new(DmlKind::SteinCoral), src, tgt)
}

#[derive(Debug, Serialize, Deserialize)]
struct BetaFile {
    version: u32,
    beta: BTreeMap<String, Vec<f64>>,
}

/// Margin scale per loss kind and fusion point.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaTable {
    rows: BTreeMap<String, [f64; 5]>,
}

pub const BETA_TABLE_VERSION: u32 = 1;

impl Default for BetaTable {
    fn default() -> Self {
        Self::from_toml_str(BETA_TABLE_TOML).expect("bundled beta table is valid")
    }
}

impl BetaTable {
    pub fn from_toml_str(s: &str) -> Result<Self, DmlError> {
        let file: BetaFile = toml::from_str(s).map_err(|e| DmlError::BetaTable(e.to_string()))?;
        if file.version != BETA_TABLE_VERSION {
            return Err(DmlError::BetaTable(format!(
                "unsupported version {}",
                file.version
            )));
        }
        let mut rows = BTreeMap::new();
        for (k, v) in file.beta {
            let kind: DmlKind = k.parse()?;
            let row: [f64; 5] = v.as_slice().try_into().map_err(|_| {
                DmlError::BetaTable(format!("{k}: expected 5 values, got {}", v.len()))
            })?;
            if row.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
                return Err(DmlError::BetaTable(format!("{k}: values must be positive")));
            }
            rows.insert(kind.key(), row);
        }
        Ok(Self { rows })
    }

    pub fn to_toml_string(&self) -> String {
        let file = BetaFile {
            version: BETA_TABLE_VERSION,
            beta: self
                .rows
                .iter()
                .map(|(k, v)| (k.clone(), v.to_vec()))
                .collect(),
        };
        toml::to_string(&file).expect("serializable")
    }

    pub fn get(&self, kind: DmlKind, c: usize) -> Result<f64, DmlError> {
        let unknown = || DmlError::UnknownBeta {
            kind: kind.key(),
            c,
        };
        if !(1..=5).contains(&c) {
            return Err(unknown());
        }
        self.rows
            .get(&kind.key())
            .map(|r| r[c - 1])
            .ok_or_else(unknown)
    }

    /// Replace one entry (per-run override).
    pub fn set(&mut self, kind: DmlKind, c: usize, beta: f64) -> Result<(), DmlError> {
        if !(1..=5).contains(&c) || !(beta.is_finite() && beta > 0.0) {
            return Err(DmlError::UnknownBeta {
                kind: kind.key(),
                c,
            });
        }
        self.rows.entry(kind.key()).or_insert([f64::NAN; 5])[c - 1] = beta;
        Ok(())
    }
}

/// Beta from the bundled table.
pub fn beta_lookup(kind: DmlKind, c: usize) -> Result<f64, DmlError> {
    BetaTable::default().get(kind, c)
}
