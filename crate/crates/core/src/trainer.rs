//! CTC pretraining, pairwise domain adaptation, Adam, checkpoints and evaluation.
//!
//! Per-sample forward/backward passes run on the rayon pool; gradients are
//! summed in sample order so results do not depend on the thread count.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{best_path_decode, ctc_node, min_frames, CtcError, LabelSeq};
use crate::data::{mix, pad_normalize, Alphabet, DataError, Dataset, Domain};
use crate::dml::{DmlError, DmlKind, DmlLossSpec, Variant, DEFAULT_SAMPLES};
use crate::engine::{EngineError, Graph, NodeId, Tensor};
use crate::lm::{enumerate_paths, rescore, LmError, NGramModel, PathConfig};
use crate::metrics::{cer, wer, MetricsError};
use crate::model::{
    build_network, extract_grads, load_checkpoint, save_checkpoint, valid_frames, ModelConfig,
    ModelError, Params,
};
use crate::pairing::{
    build_pair_dictionary, contrastive_term_node, ed_lower_bound, mean_negative_ed,
    select_triplets, triplet_term_node, MarginPolicy, PairingError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("sample {id}: label needs {needed} frames but only {frames} are valid after pooling")]
    Infeasible {
        id: String,
        frames: usize,
        needed: usize,
    },
    #[error("model has {model} classes but the alphabet needs {alphabet}")]
    ClassMismatch { model: usize, alphabet: usize },
    #[error("no triplets could be formed in any batch")]
    NoTriplets,
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Dml(#[from] DmlError),
    #[error(transparent)]
    Pairing(#[from] PairingError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairingMode {
    Triplet,
    Contrastive,
}

impl fmt::Display for PairingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairingMode::Triplet => "triplet",
            PairingMode::Contrastive => "contrastive",
        })
    }
}

impl FromStr for PairingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "triplet" => Ok(PairingMode::Triplet),
            "contrastive" => Ok(PairingMode::Contrastive),
            _ => Err(format!("unknown pairing mode `{s}` (triplet|contrastive)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    /// Defaults to 2000 (triplet) or 200 (contrastive).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapt_epochs: Option<usize>,
    pub fusion_point: usize,
    pub dml: String,
    /// `auto`, `full`, `group` or `sampled`.
    pub dml_variant: String,
    pub dml_groups: usize,
    pub dml_samples: usize,
    pub pairing: PairingMode,
    pub lambda_pair: f64,
    /// Overrides the table beta when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Epoch horizon of the edit-distance schedule.
    pub schedule_max_e: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Evaluate on validation data every this many epochs (the last epoch always).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            pretrain_epochs: 1000,
            adapt_epochs: None,
            fusion_point: 3,
            dml: "khomm_p3".into(),
            dml_variant: "auto".into(),
            dml_groups: 4,
            dml_samples: DEFAULT_SAMPLES,
            pairing: PairingMode::Triplet,
            lambda_pair: 1.0,
            beta: None,
            schedule_max_e: 200,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(1..=5).contains(&self.fusion_point) {
            return bad(format!("fusion point {} outside 1..=5", self.fusion_point));
        }
        if !self.lambda_pair.is_finite() || self.lambda_pair < 0.0 {
            return bad(format!(
                "lambda_pair must be finite and >= 0, got {}",
                self.lambda_pair
            ));
        }
        if self.schedule_max_e == 0 {
            return bad("schedule_max_e must be >= 1".into());
        }
        self.dml_spec()?;
        self.beta_value()?;
        Ok(())
    }

    pub fn effective_adapt_epochs(&self) -> usize {
        self.adapt_epochs.unwrap_or(match self.pairing {
            PairingMode::Triplet => 2000,
            PairingMode::Contrastive => 200,
        })
    }

    pub fn dml_kind(&self) -> Result<DmlKind, TrainError> {
        Ok(self.dml.parse()?)
    }

    pub fn dml_spec(&self) -> Result<DmlLossSpec, TrainError> {
        let kind = self.dml_kind()?;
        let base = DmlLossSpec::new(kind).with_seed(mix(self.seed, 0xD31));
        let variant = match self.dml_variant.as_str() {
            "auto" => base.variant,
            "full" => Variant::Full,
            "group" => Variant::Group(self.dml_groups),
            "sampled" => Variant::Sampled(self.dml_samples),
            other => {
                return Err(TrainError::InvalidConfig(format!(
                    "unknown dml_variant `{other}` (auto|full|group|sampled)"
                )))
            }
        };
        let variant = match variant {
            Variant::Sampled(_) => Variant::Sampled(self.dml_samples),
            v => v,
        };
        Ok(base.with_variant(variant))
    }

    pub fn beta_value(&self) -> Result<f64, TrainError> {
        match self.beta {
            Some(b) => Ok(MarginPolicy::new(b)?.beta),
            None => Ok(crate::dml::beta_lookup(
                self.dml_kind()?,
                self.fusion_point,
            )?),
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Padded, normalized input with its encoded label.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub x: Tensor,
    /// Unpadded length in time steps.
    pub steps: usize,
    pub label: LabelSeq,
    pub text: String,
}

pub fn prepare(ds: &Dataset, cfg: &ModelConfig) -> Result<Vec<PreparedSample>, TrainError> {
    if cfg.num_classes != ds.alphabet.num_classes() {
        return Err(TrainError::ClassMismatch {
            model: cfg.num_classes,
            alphabet: ds.alphabet.num_classes(),
        });
    }
    ds.samples
        .iter()
        .map(|s| {
            let (x, mask) = pad_normalize(s, cfg.input_len)?;
            let steps = mask.iter().filter(|&&m| m).count();
            let label = LabelSeq::new(ds.alphabet.encode(&s.label)?)?;
            let frames = valid_frames(cfg, steps, 5)?;
            let needed = min_frames(label.symbols());
            if frames < needed {
                return Err(TrainError::Infeasible {
                    id: s.id.clone(),
                    frames,
                    needed,
                });
            }
            Ok(PreparedSample {
                id: s.id.clone(),
                x,
                steps,
                label,
                text: s.label.clone(),
            })
        })
        .collect()
}

/// Network outputs restricted to the sample's valid frames.
struct SampleNodes {
    log_probs: NodeId,
    tap: NodeId,
}

fn sample_network(
    g: &mut Graph,
    params: &Params,
    prefix: &str,
    s: &PreparedSample,
    cfg: &ModelConfig,
    c: usize,
    dropout_seed: Option<u64>,
) -> Result<SampleNodes, TrainError> {
    let x = g.constant(s.x.clone());
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let net = build_network(g, params, prefix, x, cfg, rng.as_mut())?;
    let restrict = |g: &mut Graph, id: NodeId, valid: usize| -> Result<NodeId, TrainError> {
        if valid < g.value(id).rows() {
            Ok(g.slice_rows(id, 0, valid)?)
        } else {
            Ok(id)
        }
    };
    let lp_valid = valid_frames(cfg, s.steps, 5)?;
    let log_probs = restrict(g, net.log_probs, lp_valid)?;
    let tap_valid = valid_frames(cfg, s.steps, c)?;
    let tap = restrict(g, net.tap(c)?, tap_valid)?;
    Ok(SampleNodes { log_probs, tap })
}

/// CTC loss of one sample and its parameter gradients.
pub fn sample_ctc_grads(
    params: &Params,
    s: &PreparedSample,
    cfg: &ModelConfig,
    dropout_seed: Option<u64>,
) -> Result<(f64, BTreeMap<String, Tensor>), TrainError> {
    let mut g = Graph::new();
    let nodes = sample_network(&mut g, params, "net", s, cfg, 5, dropout_seed)?;
    let loss = ctc_node(&mut g, nodes.log_probs, &s.label, cfg.num_classes - 1)?;
    let grads = g.param_grads(loss)?;
    Ok((g.value(loss).item(), extract_grads(&grads, "net")))
}

fn accumulate(into: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) {
    for (k, v) in grads {
        match into.get_mut(k) {
            Some(t) => t.add_assign(v),
            None => {
                into.insert(k.clone(), v.clone());
            }
        }
    }
}

fn scale_grads(grads: &mut BTreeMap<String, Tensor>, k: f64) {
    for t in grads.values_mut() {
        for v in t.data_mut() {
            *v *= k;
        }
    }
}

/// One CSV row per epoch; unset columns stay empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub ctc_main: Option<f64>,
    pub ctc_aux: Option<f64>,
    pub pair_loss: Option<f64>,
    pub total_loss: Option<f64>,
    pub alpha: Option<f64>,
    pub ed_mean: Option<f64>,
    pub ed_bound: Option<usize>,
    pub triplets: Option<usize>,
    pub skipped: Option<usize>,
    pub fallbacks: Option<usize>,
    pub cer_tablet: Option<f64>,
    pub wer_tablet: Option<f64>,
    pub cer_paper: Option<f64>,
    pub wer_paper: Option<f64>,
    pub cer_tablet_lm: Option<f64>,
    pub wer_tablet_lm: Option<f64>,
    pub cer_paper_lm: Option<f64>,
    pub wer_paper_lm: Option<f64>,
}

const REPORT_HEADER: &str = "epoch,ctc_main,ctc_aux,pair_loss,total_loss,alpha,ed_mean,ed_bound,triplets,skipped,fallbacks,\
cer_tablet,wer_tablet,cer_paper,wer_paper,cer_tablet_lm,wer_tablet_lm,cer_paper_lm,wer_paper_lm";

fn cell<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl EpochRow {
    fn csv(&self) -> String {
        [
            self.epoch.to_string(),
            cell(&self.ctc_main),
            cell(&self.ctc_aux),
            cell(&self.pair_loss),
            cell(&self.total_loss),
            cell(&self.alpha),
            cell(&self.ed_mean),
            cell(&self.ed_bound),
            cell(&self.triplets),
            cell(&self.skipped),
            cell(&self.fallbacks),
            cell(&self.cer_tablet),
            cell(&self.wer_tablet),
            cell(&self.cer_paper),
            cell(&self.wer_paper),
            cell(&self.cer_tablet_lm),
            cell(&self.wer_tablet_lm),
            cell(&self.cer_paper_lm),
            cell(&self.wer_paper_lm),
        ]
        .join(",")
    }

    fn set_eval(&mut self, domain: Domain, e: &Evaluation) {
        match domain {
            Domain::Tablet => {
                self.cer_tablet = Some(e.cer);
                self.wer_tablet = Some(e.wer);
                self.cer_tablet_lm = e.lm.map(|m| m.cer);
                self.wer_tablet_lm = e.lm.map(|m| m.wer);
            }
            Domain::Paper => {
                self.cer_paper = Some(e.cer);
                self.wer_paper = Some(e.wer);
                self.cer_paper_lm = e.lm.map(|m| m.cer);
                self.wer_paper_lm = e.lm.map(|m| m.wer);
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub rows: Vec<EpochRow>,
}

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

/// LM rescoring settings for evaluation.
#[derive(Debug, Clone)]
pub struct LmDecoder {
    pub model: NGramModel,
    pub gamma: f64,
    pub paths: PathConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRates {
    pub cer: f64,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub cer: f64,
    pub wer: f64,
    pub predictions: Vec<String>,
    /// Rates with LM rescoring when a decoder was supplied.
    pub lm: Option<ErrorRates>,
    pub lm_predictions: Option<Vec<String>>,
}

/// Decode every sample (best path, plus LM rescoring when given) and score it.
pub fn evaluate(
    params: &Params,
    cfg: &ModelConfig,
    ds: &Dataset,
    lm: Option<&LmDecoder>,
) -> Result<Evaluation, TrainError> {
    let prepared = prepare(ds, cfg)?;
    evaluate_prepared(params, cfg, &prepared, &ds.alphabet, lm)
}

fn evaluate_prepared(
    params: &Params,
    cfg: &ModelConfig,
    samples: &[PreparedSample],
    alphabet: &Alphabet,
    lm: Option<&LmDecoder>,
) -> Result<Evaluation, TrainError> {
    let blank = cfg.num_classes - 1;
    let decoded: Vec<(String, Option<String>)> = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let nodes = sample_network(&mut g, params, "net", s, cfg, 5, None)?;
            let lp = g.value(nodes.log_probs);
            let best = alphabet.decode(&best_path_decode(lp, blank));
            let rescored = match lm {
                None => None,
                Some(d) => {
                    let probs = lp.map(f64::exp);
                    let cands = enumerate_paths(&probs, alphabet, &d.paths);
                    Some(rescore(&cands, &d.model, d.gamma)?.word.clone())
                }
            };
            Ok((best, rescored))
        })
        .collect::<Result<_, TrainError>>()?;
    let refs: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
    let predictions: Vec<String> = decoded.iter().map(|(b, _)| b.clone()).collect();
    let preds: Vec<&str> = predictions.iter().map(String::as_str).collect();
    let (lm_rates, lm_predictions) = if lm.is_some() {
        let lp: Vec<String> = decoded
            .into_iter()
            .map(|(_, r)| r.expect("decoded with lm"))
            .collect();
        let lpr: Vec<&str> = lp.iter().map(String::as_str).collect();
        (
            Some(ErrorRates {
                cer: cer(&lpr, &refs)?,
                wer: wer(&lpr, &refs)?,
            }),
            Some(lp),
        )
    } else {
        (None, None)
    };
    Ok(Evaluation {
        cer: cer(&preds, &refs)?,
        wer: wer(&preds, &refs)?,
        predictions,
        lm: lm_rates,
        lm_predictions,
    })
}

/// Where and how runs write side artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub checkpoint_dir: Option<&'a Path>,
    pub lm: Option<&'a LmDecoder>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    alphabet: String,
}

pub fn save_model(
    path: &Path,
    params: &Params,
    cfg: &ModelConfig,
    alphabet: &Alphabet,
) -> Result<(), TrainError> {
    let meta = CheckpointMeta {
        model: cfg.clone(),
        alphabet: alphabet.chars().iter().collect(),
    };
    let text = serde_json::to_string(&meta).map_err(|e| TrainError::Metadata(e.to_string()))?;
    Ok(save_checkpoint(path, params, &text)?)
}

pub fn load_model(path: &Path) -> Result<(Params, ModelConfig, Alphabet), TrainError> {
    let (params, text) = load_checkpoint(path)?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| TrainError::Metadata(e.to_string()))?;
    meta.model.validate()?;
    Ok((params, meta.model, Alphabet::new(meta.alphabet.chars())))
}

fn checkpoint_path(dir: &Path, name: &str, epoch: Option<usize>) -> PathBuf {
    match epoch {
        Some(e) => dir.join(format!("{name}-epoch{e:05}.ckpt")),
        None => dir.join(format!("{name}.ckpt")),
    }
}

fn wants(every: usize, epoch: usize, last: usize) -> bool {
    epoch + 1 == last || (every > 0 && (epoch + 1).is_multiple_of(every))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: Params,
    pub report: RunReport,
}

/// Minimize the mean CTC loss with Adam. The report fills `ctc_main` for a
/// tablet training set and `ctc_aux` for a paper one.
pub fn pretrain(
    train: &Dataset,
    val: Option<&Dataset>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    init: Option<Params>,
    opts: &RunOptions,
) -> Result<PretrainOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    let samples = prepare(train, model_cfg)?;
    let val_samples = val.map(|v| prepare(v, model_cfg)).transpose()?;
    let domain = train.samples[0].domain;
    let name = match domain {
        Domain::Tablet => "main",
        Domain::Paper => "aux",
    };
    let mut params = match init {
        Some(p) => p,
        None => crate::model::init_params(model_cfg)?,
    };
    let mut adam = Adam::new(cfg.lr);
    let mut report = RunReport::default();
    let run_seed = mix(cfg.seed, domain as u64 + 0x9E7);
    let epochs = cfg.pretrain_epochs;
    for e in 0..epochs {
        let epoch_seed = mix(run_seed, e as u64);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    sample_ctc_grads(
                        &params,
                        &samples[i],
                        model_cfg,
                        Some(mix(epoch_seed, i as u64)),
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut grads = BTreeMap::new();
            let mut batch_loss = 0.0;
            for (l, g) in &results {
                batch_loss += l;
                accumulate(&mut grads, g);
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged { epoch: e });
            }
            loss_sum += batch_loss;
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            adam.step(&mut params, &grads);
        }
        let mean_loss = loss_sum / samples.len() as f64;
        let mut row = EpochRow {
            epoch: e,
            ..EpochRow::default()
        };
        match domain {
            Domain::Tablet => row.ctc_main = Some(mean_loss),
            Domain::Paper => row.ctc_aux = Some(mean_loss),
        }
        if let (Some(vs), Some(v)) = (&val_samples, val) {
            if wants(cfg.eval_every, e, epochs) {
                let ev = evaluate_prepared(&params, model_cfg, vs, &v.alphabet, opts.lm)?;
                row.set_eval(domain, &ev);
            }
        }
        if let Some(dir) = opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (e + 1) % cfg.checkpoint_every == 0 {
                save_model(
                    &checkpoint_path(dir, name, Some(e + 1)),
                    &params,
                    model_cfg,
                    &train.alphabet,
                )?;
            }
        }
        if opts.verbose {
            eprintln!("pretrain[{name}] epoch {e}: ctc {mean_loss:.5}");
        }
        report.rows.push(row);
    }
    if let Some(dir) = opts.checkpoint_dir {
        save_model(
            &checkpoint_path(dir, name, None),
            &params,
            model_cfg,
            &train.alphabet,
        )?;
    }
    Ok(PretrainOutcome { params, report })
}

/// Scalars of one pairwise objective graph.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub total: NodeId,
    pub ctc_main: NodeId,
    /// Mean of the two auxiliary CTC losses.
    pub ctc_aux: NodeId,
    pub pair: NodeId,
}

/// Weights of one pairwise term inside a batch objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTerm {
    pub alpha: f64,
    pub lambda: f64,
    /// Number of anchors in the batch.
    pub batch: usize,
    pub mode: PairingMode,
    pub fusion_point: usize,
}

/// Graph for one anchor/positive/negative triple: main CTC on the anchor,
/// auxiliary CTC on positive and negative, and the weighted pairwise term at
/// the fusion point. Parameters are registered as `main.*` and `aux.*`.
/// Summing `total` over a batch gives `mean CTC_main + mean CTC_aux + lambda * pair loss`.
#[allow(clippy::too_many_arguments)]
pub fn pair_objective(
    main: &Params,
    aux: &Params,
    model_cfg: &ModelConfig,
    spec: &DmlLossSpec,
    term: &PairTerm,
    anchor: &PreparedSample,
    positive: &PreparedSample,
    negative: &PreparedSample,
    dropout_seed: Option<u64>,
) -> Result<(Graph, ObjectiveNodes), TrainError> {
    let c = term.fusion_point;
    let blank = model_cfg.num_classes - 1;
    let seed = |k: u64| dropout_seed.map(|s| mix(s, k));
    let mut g = Graph::new();
    let a = sample_network(&mut g, main, "main", anchor, model_cfg, c, seed(0))?;
    let p = sample_network(&mut g, aux, "aux", positive, model_cfg, c, seed(1))?;
    let n = sample_network(&mut g, aux, "aux", negative, model_cfg, c, seed(2))?;
    let ctc_main = ctc_node(&mut g, a.log_probs, &anchor.label, blank)?;
    let cp = ctc_node(&mut g, p.log_probs, &positive.label, blank)?;
    let cn = ctc_node(&mut g, n.log_probs, &negative.label, blank)?;
    let aux_sum = g.add(cp, cn)?;
    let ctc_aux = g.scale(aux_sum, 0.5)?;
    let pair = match term.mode {
        PairingMode::Triplet => triplet_term_node(&mut g, spec, a.tap, p.tap, n.tap, term.alpha)?,
        PairingMode::Contrastive => {
            let same = contrastive_term_node(&mut g, spec, a.tap, p.tap, true, term.alpha)?;
            let diff = contrastive_term_node(&mut g, spec, a.tap, n.tap, false, term.alpha)?;
            g.add(same, diff)?
        }
    };
    let ctc = g.add(ctc_main, ctc_aux)?;
    let ctc = g.scale(ctc, 1.0 / term.batch as f64)?;
    let weighted = g.scale(pair, term.lambda)?;
    let total = g.add(ctc, weighted)?;
    Ok((
        g,
        ObjectiveNodes {
            total,
            ctc_main,
            ctc_aux,
            pair,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub main: Params,
    pub aux: Params,
    pub report: RunReport,
}

struct TripletResult {
    ctc_main: f64,
    ctc_aux: f64,
    pair: f64,
    total: f64,
    main: BTreeMap<String, Tensor>,
    aux: BTreeMap<String, Tensor>,
}

/// Fine-tune both networks with CTC plus the pairwise loss at the fusion point.
#[allow(clippy::too_many_arguments)]
pub fn adapt(
    main: Params,
    aux: Params,
    tablet: &Dataset,
    paper: &Dataset,
    val_tablet: Option<&Dataset>,
    val_paper: Option<&Dataset>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<AdaptOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    let spec = cfg.dml_spec()?;
    let policy = MarginPolicy::new(cfg.beta_value()?)?;
    let dict = build_pair_dictionary(tablet, paper)?;
    let anchors = prepare(tablet, model_cfg)?;
    let papers = prepare(paper, model_cfg)?;
    let vt = val_tablet
        .map(|v| prepare(v, model_cfg).map(|p| (p, v)))
        .transpose()?;
    let vp = val_paper
        .map(|v| prepare(v, model_cfg).map(|p| (p, v)))
        .transpose()?;
    let (mut main, mut aux) = (main, aux);
    let (mut adam_main, mut adam_aux) = (Adam::new(cfg.lr), Adam::new(cfg.lr));
    let max_e = cfg.schedule_max_e;
    let epochs = cfg.effective_adapt_epochs();
    let run_seed = mix(cfg.seed, 0xADA);
    let mut report = RunReport::default();
    let mut any_triplets = false;
    for e in 0..epochs {
        let e_sched = e.min(max_e - 1);
        let bound = ed_lower_bound(e_sched, max_e)?;
        let epoch_seed = mix(run_seed, e as u64);
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut row = EpochRow {
            epoch: e,
            ed_bound: Some(bound),
            ..EpochRow::default()
        };
        let (mut ctc_main_sum, mut ctc_aux_sum, mut pair_sum, mut total_sum) = (0.0, 0.0, 0.0, 0.0);
        let (mut n_triplets, mut n_batches, mut skipped, mut fallbacks) =
            (0usize, 0usize, 0usize, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed = mix(epoch_seed, b as u64);
            let sel = select_triplets(batch, &dict, e_sched, max_e, batch_seed)?;
            skipped += sel.skipped;
            fallbacks += sel.fallbacks;
            if sel.triplets.is_empty() {
                continue;
            }
            let ed_mean = mean_negative_ed(&sel.triplets)?;
            let alpha = policy.alpha(ed_mean);
            let term = PairTerm {
                alpha,
                lambda: cfg.lambda_pair,
                batch: sel.triplets.len(),
                mode: cfg.pairing,
                fusion_point: cfg.fusion_point,
            };
            let results = sel
                .triplets
                .par_iter()
                .enumerate()
                .map(|(k, t)| {
                    let (g, nodes) = pair_objective(
                        &main,
                        &aux,
                        model_cfg,
                        &spec,
                        &term,
                        &anchors[t.anchor],
                        &papers[t.positive],
                        &papers[t.negative],
                        Some(mix(batch_seed, k as u64)),
                    )?;
                    let grads = g.param_grads(nodes.total)?;
                    Ok(TripletResult {
                        ctc_main: g.value(nodes.ctc_main).item(),
                        ctc_aux: g.value(nodes.ctc_aux).item(),
                        pair: g.value(nodes.pair).item(),
                        total: g.value(nodes.total).item(),
                        main: extract_grads(&grads, "main"),
                        aux: extract_grads(&grads, "aux"),
                    })
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            let (mut gm, mut ga) = (BTreeMap::new(), BTreeMap::new());
            let (mut bm, mut bx, mut bp, mut bt) = (0.0, 0.0, 0.0, 0.0);
            for r in &results {
                bm += r.ctc_main;
                bx += r.ctc_aux;
                bp += r.pair;
                bt += r.total;
                accumulate(&mut gm, &r.main);
                accumulate(&mut ga, &r.aux);
            }
            if !bt.is_finite() {
                return Err(TrainError::Diverged { epoch: e });
            }
            adam_main.step(&mut main, &gm);
            adam_aux.step(&mut aux, &ga);
            ctc_main_sum += bm;
            ctc_aux_sum += bx;
            pair_sum += bp;
            total_sum += bt;
            n_triplets += results.len();
            n_batches += 1;
            row.alpha = Some(alpha);
            row.ed_mean = Some(ed_mean);
        }
        if n_batches > 0 {
            any_triplets = true;
            row.ctc_main = Some(ctc_main_sum / n_triplets as f64);
            row.ctc_aux = Some(ctc_aux_sum / n_triplets as f64);
            row.pair_loss = Some(pair_sum / n_batches as f64);
            row.total_loss = Some(total_sum / n_batches as f64);
        }
        row.triplets = Some(n_triplets);
        row.skipped = Some(skipped);
        row.fallbacks = Some(fallbacks);
        if wants(cfg.eval_every, e, epochs) {
            if let Some((s, v)) = &vt {
                let ev = evaluate_prepared(&main, model_cfg, s, &v.alphabet, opts.lm)?;
                row.set_eval(Domain::Tablet, &ev);
            }
            if let Some((s, v)) = &vp {
                let ev = evaluate_prepared(&aux, model_cfg, s, &v.alphabet, opts.lm)?;
                row.set_eval(Domain::Paper, &ev);
            }
        }
        if let Some(dir) = opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (e + 1) % cfg.checkpoint_every == 0 {
                save_model(
                    &checkpoint_path(dir, "adapt-main", Some(e + 1)),
                    &main,
                    model_cfg,
                    &tablet.alphabet,
                )?;
                save_model(
                    &checkpoint_path(dir, "adapt-aux", Some(e + 1)),
                    &aux,
                    model_cfg,
                    &paper.alphabet,
                )?;
            }
        }
        if opts.verbose {
            eprintln!(
                "adapt epoch {e}: total {} pair {} alpha {} bound {bound}",
                cell(&row.total_loss),
                cell(&row.pair_loss),
                cell(&row.alpha)
            );
        }
        report.rows.push(row);
    }
    if epochs > 0 && !any_triplets {
        return Err(TrainError::NoTriplets);
    }
    if let Some(dir) = opts.checkpoint_dir {
        save_model(
            &checkpoint_path(dir, "adapt-main", None),
            &main,
            model_cfg,
            &tablet.alphabet,
        )?;
        save_model(
            &checkpoint_path(dir, "adapt-aux", None),
            &aux,
            model_cfg,
            &paper.alphabet,
        )?;
    }
    Ok(AdaptOutcome { main, aux, report })
}
