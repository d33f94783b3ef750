//! CNN + BiLSTM word recognizer with a CTC head and five fusion taps.
//!
//! Layer stack (`F` conv filters, `H1`/`H2` LSTM widths, `C = K + 1` classes):
//!
//! ```text
//! x [T, 13] -> conv(13->F, k) -> relu -> conv(F->F, k) -> relu        tap 1  [T, F]
//!           -> max-pool over time to P frames
//!           -> BiLSTM(H1 per direction)                               tap 2  [P, 2*H1]
//!           -> dropout                                                tap 3  [P, 2*H1]
//!           -> LSTM(2*H1 -> H2)                                       tap 4  [P, H2]
//!           -> affine(H2 -> H2) -> tanh                               tap 5  [P, H2]
//!           -> affine(H2 -> C) -> log-softmax
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::CHANNELS;
use crate::engine::{EngineError, Graph, NodeId, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("fusion point {0} outside 1..=5")]
    TapIndex(usize),
    #[error("input shape {got:?}, expected [{len}, {CHANNELS}]")]
    InputShape { got: Vec<usize>, len: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("checkpoint io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_len: usize,
    pub channels: usize,
    pub conv_filters: usize,
    pub kernel_size: usize,
    pub pooled_len: usize,
    pub lstm1_hidden: usize,
    pub lstm2_hidden: usize,
    /// Alphabet size plus the CTC blank.
    pub num_classes: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_len: 400,
            channels: CHANNELS,
            conv_filters: 200,
            kernel_size: 5,
            pooled_len: 60,
            lstm1_hidden: 100,
            lstm2_hidden: 100,
            num_classes: 27,
            dropout: 0.2,
            seed: 0,
        }
    }
}

/// One max-pool stage over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolStage {
    pub window: usize,
    pub stride: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        let dims = [
            ("input_len", self.input_len),
            ("conv_filters", self.conv_filters),
            ("kernel_size", self.kernel_size),
            ("pooled_len", self.pooled_len),
            ("lstm1_hidden", self.lstm1_hidden),
            ("lstm2_hidden", self.lstm2_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be >= 1"));
        }
        if self.channels != CHANNELS {
            return bad(format!(
                "channels must be {CHANNELS}, got {}",
                self.channels
            ));
        }
        if self.num_classes < 2 {
            return bad("num_classes must include at least one symbol and the blank".into());
        }
        if self.pooled_len > self.input_len {
            return bad(format!(
                "pooled_len {} exceeds input_len {}",
                self.pooled_len, self.input_len
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Pooling plan mapping `input_len` frames to exactly `pooled_len`.
    ///
    /// Divisible lengths use one non-overlapping stage. Otherwise the first
    /// stage pools by the largest divisor of `input_len` not above
    /// `input_len / pooled_len`, and a stride-1 window trims the rest
    /// (400 -> 80 by 5, then window 21 -> 60).
    pub fn pool_plan(&self) -> Vec<PoolStage> {
        let (n, p) = (self.input_len, self.pooled_len);
        if n % p == 0 {
            let f = n / p;
            return if f == 1 {
                Vec::new()
            } else {
                vec![PoolStage {
                    window: f,
                    stride: f,
                }]
            };
        }
        let f1 = (1..=n / p).rev().find(|d| n % d == 0).unwrap_or(1);
        let m1 = n / f1;
        let mut plan = Vec::new();
        if f1 > 1 {
            plan.push(PoolStage {
                window: f1,
                stride: f1,
            });
        }
        plan.push(PoolStage {
            window: m1 - p + 1,
            stride: 1,
        });
        plan
    }
}

/// `(time, features)` of fusion tap `c`.
pub fn tap_shape(cfg: &ModelConfig, c: usize) -> Result<(usize, usize), ModelError> {
    match c {
        1 => Ok((cfg.input_len, cfg.conv_filters)),
        2 | 3 => Ok((cfg.pooled_len, 2 * cfg.lstm1_hidden)),
        4 | 5 => Ok((cfg.pooled_len, cfg.lstm2_hidden)),
        _ => Err(ModelError::TapIndex(c)),
    }
}

/// Number of pooled frames that cover at least one valid input step.
pub fn valid_frames(cfg: &ModelConfig, valid_steps: usize, c: usize) -> Result<usize, ModelError> {
    let (time, _) = tap_shape(cfg, c)?;
    if c == 1 {
        return Ok(valid_steps.min(time));
    }
    let mut len = cfg.input_len;
    let mut valid = valid_steps.min(len);
    for st in cfg.pool_plan() {
        let out = (len - st.window) / st.stride + 1;
        // windows starting before the last valid step
        valid = if valid == 0 {
            0
        } else {
            ((valid - 1) / st.stride + 1).min(out)
        };
        len = out;
    }
    Ok(valid.max(1))
}

/// Named parameter tensors of one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

fn lstm_params(p: &mut Params, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) {
    p.insert(
        &format!("{name}.wx"),
        uniform(rng, &[input, 4 * hidden], input),
    );
    p.insert(
        &format!("{name}.wh"),
        uniform(rng, &[hidden, 4 * hidden], hidden),
    );
    let mut b = uniform(rng, &[4 * hidden], hidden);
    for v in &mut b.data_mut()[hidden..2 * hidden] {
        *v += 1.0;
    }
    p.insert(&format!("{name}.b"), b);
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); LSTM forget-gate biases shifted by +1.
pub fn init_params(cfg: &ModelConfig) -> Result<Params, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (f, k, h1, h2, c) = (
        cfg.conv_filters,
        cfg.kernel_size,
        cfg.lstm1_hidden,
        cfg.lstm2_hidden,
        cfg.num_classes,
    );
    let mut p = Params::default();
    p.insert(
        "conv1.w",
        uniform(&mut rng, &[f, k, CHANNELS], k * CHANNELS),
    );
    p.insert("conv1.b", uniform(&mut rng, &[f], k * CHANNELS));
    p.insert("conv2.w", uniform(&mut rng, &[f, k, f], k * f));
    p.insert("conv2.b", uniform(&mut rng, &[f], k * f));
    lstm_params(&mut p, &mut rng, "lstm1f", f, h1);
    lstm_params(&mut p, &mut rng, "lstm1b", f, h1);
    lstm_params(&mut p, &mut rng, "lstm2", 2 * h1, h2);
    p.insert("dense.w", uniform(&mut rng, &[h2, h2], h2));
    p.insert("dense.b", uniform(&mut rng, &[h2], h2));
    p.insert("out.w", uniform(&mut rng, &[h2, c], h2));
    p.insert("out.b", uniform(&mut rng, &[c], h2));
    Ok(p)
}

/// Graph handles produced by [`build_network`].
#[derive(Debug, Clone, Copy)]
pub struct NetNodes {
    pub log_probs: NodeId,
    pub taps: [NodeId; 5],
}

impl NetNodes {
    pub fn tap(&self, c: usize) -> Result<NodeId, ModelError> {
        if !(1..=5).contains(&c) {
            return Err(ModelError::TapIndex(c));
        }
        Ok(self.taps[c - 1])
    }
}

/// Register `params` under `prefix.` in `g` (no-op for names already present).
pub fn register_params(g: &mut Graph, params: &Params, prefix: &str) {
    for (name, t) in params.iter() {
        g.param(&format!("{prefix}.{name}"), t.clone());
    }
}

/// Strip `prefix.` from gradient names produced by [`Graph::param_grads`].
pub fn extract_grads(grads: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    let lead = format!("{prefix}.");
    grads
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&lead).map(|n| (n.to_string(), v.clone())))
        .collect()
}

/// Bidirectional LSTM: `[fwd(x), rev(bwd(rev(x)))]`; each weight triple is
/// `[wx, wh, b]`.
pub fn bilstm(
    g: &mut Graph,
    x: NodeId,
    fwd: [NodeId; 3],
    bwd: [NodeId; 3],
) -> Result<NodeId, ModelError> {
    let f = g.lstm(x, fwd[0], fwd[1], fwd[2])?;
    let rev_in = g.reverse(x)?;
    let b = g.lstm(rev_in, bwd[0], bwd[1], bwd[2])?;
    let b = g.reverse(b)?;
    Ok(g.concat_cols(f, b)?)
}

/// Append one network to `g`. Parameters are registered as `prefix.<name>`.
/// Dropout is applied between taps 2 and 3 only when `dropout_rng` is given.
pub fn build_network(
    g: &mut Graph,
    params: &Params,
    prefix: &str,
    x: NodeId,
    cfg: &ModelConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NetNodes, ModelError> {
    let shape = g.value(x).shape().to_vec();
    if shape != [cfg.input_len, CHANNELS] {
        return Err(ModelError::InputShape {
            got: shape,
            len: cfg.input_len,
        });
    }
    register_params(g, params, prefix);
    let p = |g: &Graph, name: &str| {
        g.param_id(&format!("{prefix}.{name}"))
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    };

    let h = g.conv1d(x, p(g, "conv1.w")?, p(g, "conv1.b")?, 1)?;
    let h = g.relu(h)?;
    let h = g.conv1d(h, p(g, "conv2.w")?, p(g, "conv2.b")?, 1)?;
    let tap1 = g.relu(h)?;

    let mut pooled = tap1;
    for st in cfg.pool_plan() {
        pooled = g.max_pool_time(pooled, st.window, st.stride)?;
    }

    let tap2 = bilstm(
        g,
        pooled,
        [p(g, "lstm1f.wx")?, p(g, "lstm1f.wh")?, p(g, "lstm1f.b")?],
        [p(g, "lstm1b.wx")?, p(g, "lstm1b.wh")?, p(g, "lstm1b.b")?],
    )?;

    let tap3 = match dropout_rng {
        Some(rng) if cfg.dropout > 0.0 => {
            let keep = 1.0 - cfg.dropout;
            let shape = g.value(tap2).shape().to_vec();
            let n: usize = shape.iter().product();
            let mask = (0..n)
                .map(|_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            let m = g.constant(Tensor::new(shape, mask)?);
            g.mul(tap2, m)?
        }
        _ => tap2,
    };

    let tap4 = g.lstm(tap3, p(g, "lstm2.wx")?, p(g, "lstm2.wh")?, p(g, "lstm2.b")?)?;
    let d = g.affine(tap4, p(g, "dense.w")?, p(g, "dense.b")?)?;
    let tap5 = g.tanh(d)?;
    let logits = g.affine(tap5, p(g, "out.w")?, p(g, "out.b")?)?;
    let log_probs = g.log_softmax(logits)?;
    Ok(NetNodes {
        log_probs,
        taps: [tap1, tap2, tap3, tap4, tap5],
    })
}

/// Embeddings emitted at the five fusion points for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TapSet {
    taps: [Tensor; 5],
}

impl TapSet {
    pub fn get(&self, c: usize) -> Result<&Tensor, ModelError> {
        if !(1..=5).contains(&c) {
            return Err(ModelError::TapIndex(c));
        }
        Ok(&self.taps[c - 1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `pooled_len x num_classes`, rows are log-softmax.
    pub log_probs: Tensor,
    pub taps: TapSet,
}

/// Inference forward pass (no dropout) over a batch of padded inputs.
pub fn forward(
    params: &Params,
    batch: &[Tensor],
    cfg: &ModelConfig,
) -> Result<Vec<ForwardOutput>, ModelError> {
    cfg.validate()?;
    batch
        .par_iter()
        .map(|x| {
            let mut g = Graph::new();
            let xi = g.input("x", x.clone());
            let net = build_network(&mut g, params, "net", xi, cfg, None)?;
            let taps = net.taps.map(|id| g.value(id).clone());
            Ok(ForwardOutput {
                log_probs: g.value(net.log_probs).clone(),
                taps: TapSet { taps },
            })
        })
        .collect()
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SEQDAPRM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint: magic, `u32` version, `u32` metadata length + UTF-8
/// metadata, `u32` tensor count, then per tensor `u32` name length, name,
/// `u32` rank, `u64` dims, little-endian `f64` values. Tensors are stored in
/// name order.
pub fn save_checkpoint(path: &Path, params: &Params, metadata: &str) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    buf.extend_from_slice(metadata.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let io = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::BadCheckpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, n: usize) -> Result<String, ModelError> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| ModelError::BadCheckpoint(e.to_string()))
    }
}

/// Returns the parameters and the metadata string.
pub fn load_checkpoint(path: &Path) -> Result<(Params, String), ModelError> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::BadCheckpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let meta_len = c.u32()? as usize;
    let metadata = c.string(meta_len)?;
    let count = c.u32()?;
    let mut params = Params::default();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = c.string(name_len)?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                c.take(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let t = Tensor::new(shape, data).map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
        params.insert(&name, t);
    }
    if c.pos != buf.len() {
        return Err(ModelError::BadCheckpoint("trailing bytes".into()));
    }
    Ok((params, metadata))
}
