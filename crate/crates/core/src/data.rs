//! Sensor-pen recordings: sample model, JSONL dataset files, train/validation
//! splits, per-sample normalization and a synthetic tablet/paper generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Tensor;

/// Accelerometer front (3), accelerometer rear (3), gyroscope (3),
/// magnetometer (3), force (1).
pub const CHANNELS: usize = 13;
pub const MAG_CHANNELS: [usize; 3] = [9, 10, 11];
const STD_GUARD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("line {line}: expected {CHANNELS} channels, got {got}")]
    ChannelCount { line: usize, got: usize },
    #[error("unknown character {ch:?} in label {label:?}")]
    UnknownCharacter { ch: char, label: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("sample {id}: {detail}")]
    InvalidSample { id: String, detail: String },
    #[error("sequence too long: {len} steps exceed target length {target}")]
    SequenceTooLong { len: usize, target: usize },
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    BadRatio(f64),
    #[error("writer-independent split needs at least 2 writers, found {0}")]
    TooFewWriters(usize),
    #[error("invalid synthetic config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Tablet,
    Paper,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Tablet => "tablet",
            Domain::Paper => "paper",
        })
    }
}

/// Ordered character set; class ids are positions, the CTC blank is `len()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    chars: Vec<char>,
}

impl Alphabet {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars.into_iter().collect();
        Self {
            chars: set.into_iter().collect(),
        }
    }

    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        Self::new(labels.into_iter().flat_map(str::chars))
    }

    pub fn union(&self, other: &Alphabet) -> Alphabet {
        Self::new(self.chars.iter().chain(&other.chars).copied())
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn blank(&self) -> usize {
        self.chars.len()
    }

    pub fn num_classes(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn contains(&self, c: char) -> bool {
        self.chars.binary_search(&c).is_ok()
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.chars.binary_search(&c).ok()
    }

    pub fn encode(&self, word: &str) -> Result<Vec<usize>, DataError> {
        word.chars()
            .map(|c| {
                self.index_of(c).ok_or_else(|| DataError::UnknownCharacter {
                    ch: c,
                    label: word.to_string(),
                })
            })
            .collect()
    }

    /// Ids outside the alphabet (including blank) are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.chars.get(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtsSample {
    pub id: String,
    pub writer: String,
    pub domain: Domain,
    pub label: String,
    /// `m x 13`, one row per time step.
    pub signal: Vec<[f64; CHANNELS]>,
}

impl MtsSample {
    pub fn len(&self) -> usize {
        self.signal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signal.is_empty()
    }

    fn validate(&self, alphabet: Option<&Alphabet>) -> Result<(), DataError> {
        let invalid = |detail: &str| DataError::InvalidSample {
            id: self.id.clone(),
            detail: detail.to_string(),
        };
        if self.signal.is_empty() {
            return Err(invalid("signal has no time steps"));
        }
        if self.label.is_empty() {
            return Err(invalid("empty label"));
        }
        if self.signal.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite signal value"));
        }
        if let Some(c) = self
            .label
            .chars()
            .find(|c| c.is_whitespace() || c.is_control())
        {
            return Err(DataError::UnknownCharacter {
                ch: c,
                label: self.label.clone(),
            });
        }
        if let Some(alpha) = alphabet {
            if let Some(c) = self.label.chars().find(|&c| !alpha.contains(c)) {
                return Err(DataError::UnknownCharacter {
                    ch: c,
                    label: self.label.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<MtsSample>,
    pub alphabet: Alphabet,
}

impl Dataset {
    /// Validates every sample; the alphabet defaults to the label characters.
    pub fn new(samples: Vec<MtsSample>, alphabet: Option<Alphabet>) -> Result<Self, DataError> {
        if samples.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        for s in &samples {
            s.validate(alphabet.as_ref())?;
        }
        let alphabet = alphabet
            .unwrap_or_else(|| Alphabet::from_labels(samples.iter().map(|s| s.label.as_str())));
        Ok(Self { samples, alphabet })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn writers(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.writer.as_str()).collect()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.label.as_str()).collect()
    }

    pub fn with_alphabet(mut self, alphabet: Alphabet) -> Result<Self, DataError> {
        for s in &self.samples {
            s.validate(Some(&alphabet))?;
        }
        self.alphabet = alphabet;
        Ok(self)
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            alphabet: self.alphabet.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// One JSON object per line: `{id, writer, domain, label, signal}`.
    Jsonl,
}

pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    alphabet: Option<&Alphabet>,
) -> Result<Dataset, DataError> {
    let DatasetFormat::Jsonl = format;
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_record(&line, line_no)?);
    }
    if samples.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    for s in &samples {
        s.validate(alphabet)?;
    }
    Dataset::new(samples, alphabet.cloned())
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    writer: String,
    domain: Domain,
    label: String,
    signal: Vec<Vec<f64>>,
}

fn parse_record(line: &str, line_no: usize) -> Result<MtsSample, DataError> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| DataError::Malformed {
        line: line_no,
        detail: e.to_string(),
    })?;
    let mut signal = Vec::with_capacity(raw.signal.len());
    for row in &raw.signal {
        let arr: [f64; CHANNELS] =
            row.as_slice()
                .try_into()
                .map_err(|_| DataError::ChannelCount {
                    line: line_no,
                    got: row.len(),
                })?;
        signal.push(arr);
    }
    let sample = MtsSample {
        id: raw.id,
        writer: raw.writer,
        domain: raw.domain,
        label: raw.label,
        signal,
    };
    sample.validate(None).map_err(|e| DataError::Malformed {
        line: line_no,
        detail: e.to_string(),
    })?;
    Ok(sample)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for s in &ds.samples {
        let line = serde_json::to_string(s).expect("samples serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Writer-dependent: every writer appears on both sides.
    Wd,
    /// Writer-independent: validation writers are unseen in training.
    Wi,
}

/// Returns `(train, validation)`; sample order within each side follows the input.
pub fn split(
    ds: &Dataset,
    mode: SplitMode,
    ratio: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::BadRatio(ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_writer: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        by_writer.entry(s.writer.as_str()).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    match mode {
        SplitMode::Wd => {
            for idx in by_writer.values() {
                let mut idx = idx.clone();
                idx.shuffle(&mut rng);
                let n_train = (idx.len() as f64 * ratio).round() as usize;
                train.extend_from_slice(&idx[..n_train]);
                val.extend_from_slice(&idx[n_train..]);
            }
        }
        SplitMode::Wi => {
            let mut writers: Vec<&str> = by_writer.keys().copied().collect();
            if writers.len() < 2 {
                return Err(DataError::TooFewWriters(writers.len()));
            }
            writers.shuffle(&mut rng);
            let n_train =
                ((writers.len() as f64 * ratio).round() as usize).clamp(1, writers.len() - 1);
            for (k, w) in writers.iter().enumerate() {
                let target = if k < n_train { &mut train } else { &mut val };
                target.extend_from_slice(&by_writer[w]);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// Per-channel z-score over the sample's own steps, zero-padded to `target_len`.
/// The mask marks valid (unpadded) steps.
pub fn pad_normalize(s: &MtsSample, target_len: usize) -> Result<(Tensor, Vec<bool>), DataError> {
    let m = s.signal.len();
    if m > target_len {
        return Err(DataError::SequenceTooLong {
            len: m,
            target: target_len,
        });
    }
    let mut out = vec![0.0; target_len * CHANNELS];
    for ch in 0..CHANNELS {
        let mean = s.signal.iter().map(|r| r[ch]).sum::<f64>() / m as f64;
        let var = s.signal.iter().map(|r| (r[ch] - mean).powi(2)).sum::<f64>() / m as f64;
        let std = var.sqrt();
        let div = if std < STD_GUARD { 1.0 } else { std };
        for (t, r) in s.signal.iter().enumerate() {
            out[t * CHANNELS + ch] = (r[ch] - mean) / div;
        }
    }
    let mask = (0..target_len).map(|t| t < m).collect();
    Ok((Tensor::matrix(target_len, CHANNELS, out), mask))
}

/// Synthetic generator settings (flat TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_tablet: usize,
    pub n_paper: usize,
    /// Explicit vocabulary; when empty, `vocab_size` random words are drawn.
    pub words: Vec<String>,
    pub vocab_size: usize,
    pub alphabet: String,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub writers: usize,
    /// Steps per rendered character before jitter.
    pub char_steps: usize,
    /// Uniform per-character duration jitter in `[-j, +j]` steps.
    pub duration_jitter: usize,
    pub sample_noise_std: f64,
    pub paper_noise_std: f64,
    pub tablet_mag_bias: [f64; 3],
    /// Tablet-only rotation (degrees) of every 3-axis sensor group about its
    /// z axis. Unlike the magnetometer bias it survives per-channel
    /// normalization.
    pub tablet_axis_rotation_deg: f64,
    pub writer_offset_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tablet: 400,
            n_paper: 2000,
            words: Vec::new(),
            vocab_size: 30,
            alphabet: "abcdefgh".into(),
            min_word_len: 2,
            max_word_len: 5,
            writers: 5,
            char_steps: 10,
            duration_jitter: 2,
            sample_noise_std: 0.3,
            paper_noise_std: 0.5,
            tablet_mag_bias: [1.0, 0.0, 0.0],
            tablet_axis_rotation_deg: 0.0,
            writer_offset_std: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, DataError> {
        toml::from_str(s).map_err(|e| DataError::BadConfig(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::BadConfig(m.to_string()));
        if self.n_tablet == 0 || self.n_paper == 0 {
            return bad("sample counts must be >= 1");
        }
        if self.writers == 0 {
            return bad("writers must be >= 1");
        }
        if self.char_steps == 0 || self.duration_jitter >= self.char_steps {
            return bad("char_steps must exceed duration_jitter");
        }
        if !self.tablet_axis_rotation_deg.is_finite() {
            return bad("tablet_axis_rotation_deg must be finite");
        }
        if [
            self.sample_noise_std,
            self.paper_noise_std,
            self.writer_offset_std,
        ]
        .iter()
        .any(|&v| v.is_nan() || v < 0.0 || !v.is_finite())
        {
            return bad("standard deviations must be finite and >= 0");
        }
        if self.words.is_empty() && self.vocab_size == 0 {
            return bad("empty word list");
        }
        if self.words.iter().any(String::is_empty) {
            return bad("empty word in word list");
        }
        if self.words.is_empty()
            && (self.alphabet.is_empty()
                || self.min_word_len == 0
                || self.min_word_len > self.max_word_len)
        {
            return bad("random vocabulary needs a non-empty alphabet and 1 <= min_word_len <= max_word_len");
        }
        Ok(())
    }

    /// The explicit word list, or a seeded random vocabulary of distinct words.
    pub fn vocabulary(&self) -> Result<Vec<String>, DataError> {
        self.validate()?;
        if !self.words.is_empty() {
            return Ok(self.words.clone());
        }
        let chars: Vec<char> = Alphabet::new(self.alphabet.chars()).chars().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 0x0076_6f63_6162));
        let mut seen = BTreeSet::new();
        let mut words = Vec::with_capacity(self.vocab_size);
        let mut attempts = 0usize;
        while words.len() < self.vocab_size {
            attempts += 1;
            if attempts > 1000 * self.vocab_size {
                return Err(DataError::BadConfig(
                    "cannot draw enough distinct words".into(),
                ));
            }
            let len = rng.gen_range(self.min_word_len..=self.max_word_len);
            let w: String = (0..len)
                .map(|_| chars[rng.gen_range(0..chars.len())])
                .collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        Ok(words)
    }
}

/// splitmix64-style key mixing for derived seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sinusoid bank for one character: two components per channel.
#[derive(Debug, Clone)]
struct Signature {
    amp: [[f64; 2]; CHANNELS],
    freq: [[f64; 2]; CHANNELS],
    phase: [[f64; 2]; CHANNELS],
}

impl Signature {
    fn for_char(c: char, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5167_0000 + c as u64));
        let mut sig = Signature {
            amp: [[0.0; 2]; CHANNELS],
            freq: [[0.0; 2]; CHANNELS],
            phase: [[0.0; 2]; CHANNELS],
        };
        for ch in 0..CHANNELS {
            for k in 0..2 {
                sig.amp[ch][k] = rng.gen_range(0.5..1.5);
                sig.freq[ch][k] = rng.gen_range(0.5..2.5);
                sig.phase[ch][k] = rng.gen_range(0.0..std::f64::consts::TAU);
            }
        }
        sig
    }

    fn value(&self, ch: usize, u: f64) -> f64 {
        (0..2)
            .map(|k| {
                self.amp[ch][k]
                    * (std::f64::consts::TAU * self.freq[ch][k] * u + self.phase[ch][k]).sin()
            })
            .sum()
    }
}

fn writer_offset(writer: usize, cfg: &SynthConfig) -> [f64; CHANNELS] {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x7772_0000 + writer as u64));
    let mut off = [0.0; CHANNELS];
    for v in off.iter_mut() {
        *v = cfg.writer_offset_std * standard_normal(&mut rng);
    }
    off
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Noise-free rendering of `word` for `writer` (before domain effects).
/// `rng` drives the per-character duration jitter only.
pub fn render_word(
    cfg: &SynthConfig,
    word: &str,
    writer: usize,
    rng: &mut impl Rng,
) -> Vec<[f64; CHANNELS]> {
    let offset = writer_offset(writer, cfg);
    let mut out = Vec::new();
    for c in word.chars() {
        let sig = Signature::for_char(c, cfg.seed);
        let j = cfg.duration_jitter as i64;
        let d = (cfg.char_steps as i64 + if j > 0 { rng.gen_range(-j..=j) } else { 0 }) as usize;
        for t in 0..d {
            let u = t as f64 / d as f64;
            let mut row = [0.0; CHANNELS];
            for (ch, v) in row.iter_mut().enumerate() {
                *v = sig.value(ch, u) + offset[ch];
            }
            out.push(row);
        }
    }
    out
}

/// Rotates the (x, y) pair of each accelerometer, gyroscope and magnetometer
/// triple; the force channel is untouched.
fn rotate_axes(row: &mut [f64; CHANNELS], theta: f64) {
    let (sin, cos) = theta.sin_cos();
    for base in [0, 3, 6, 9] {
        let (x, y) = (row[base], row[base + 1]);
        row[base] = cos * x - sin * y;
        row[base + 1] = sin * x + cos * y;
    }
}

fn generate_domain(
    cfg: &SynthConfig,
    vocab: &[String],
    domain: Domain,
) -> Result<Dataset, DataError> {
    let (n, tag) = match domain {
        Domain::Tablet => (cfg.n_tablet, 1u64),
        Domain::Paper => (cfg.n_paper, 2u64),
    };
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(cfg.seed, tag), i as u64));
        let writer = i % cfg.writers;
        let word = &vocab[rng.gen_range(0..vocab.len())];
        let mut signal = render_word(cfg, word, writer, &mut rng);
        for row in signal.iter_mut() {
            if domain == Domain::Tablet && cfg.tablet_axis_rotation_deg != 0.0 {
                rotate_axes(row, cfg.tablet_axis_rotation_deg.to_radians());
            }
            for v in row.iter_mut() {
                if cfg.sample_noise_std > 0.0 {
                    *v += cfg.sample_noise_std * standard_normal(&mut rng);
                }
                if domain == Domain::Paper && cfg.paper_noise_std > 0.0 {
                    *v += cfg.paper_noise_std * standard_normal(&mut rng);
                }
            }
            if domain == Domain::Tablet {
                for (k, &ch) in MAG_CHANNELS.iter().enumerate() {
                    row[ch] += cfg.tablet_mag_bias[k];
                }
            }
        }
        samples.push(MtsSample {
            id: format!("{domain}-{i:05}"),
            writer: format!("w{writer:02}"),
            domain,
            label: word.clone(),
            signal,
        });
    }
    Dataset::new(samples, None)
}

/// Returns `(tablet, paper)` sharing the vocabulary's alphabet.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Dataset, Dataset), DataError> {
    let vocab = cfg.vocabulary()?;
    let alphabet = Alphabet::from_labels(vocab.iter().map(String::as_str));
    let tablet = generate_domain(cfg, &vocab, Domain::Tablet)?.with_alphabet(alphabet.clone())?;
    let paper = generate_domain(cfg, &vocab, Domain::Paper)?.with_alphabet(alphabet)?;
    Ok((tablet, paper))
}
