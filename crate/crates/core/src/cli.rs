//! `seqda` command line: data generation, training, evaluation and reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    load_dataset, save_dataset, split, synth_generate, Dataset, DatasetFormat, SplitMode,
    SynthConfig,
};
use crate::lm::{build_ngram, NGramModel, PathConfig};
use crate::model::ModelConfig;
use crate::pairing::{build_pair_dictionary, MAX_ED};
use crate::report::{line_plot, log_bar_chart};
use crate::trainer::{
    adapt, evaluate, load_model, pretrain, LmDecoder, PairingMode, RunOptions, RunReport,
    TrainConfig,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

fn rt<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub mode: SplitMode,
    /// Training fraction.
    pub ratio: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            mode: SplitMode::Wd,
            ratio: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub order: usize,
    pub gamma: f64,
    pub threshold: f64,
    pub path_thresh: usize,
    pub max_paths: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        let p = PathConfig::default();
        Self {
            order: 3,
            gamma: 1.0,
            threshold: p.threshold,
            path_thresh: p.path_thresh,
            max_paths: p.max_paths,
        }
    }
}

impl LmConfig {
    fn paths(&self) -> PathConfig {
        PathConfig {
            threshold: self.threshold,
            path_thresh: self.path_thresh,
            max_paths: self.max_paths,
        }
    }
}

/// Input artifact paths; flags override these.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Inputs {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tablet: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paper: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub main: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aux: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lm: Option<PathBuf>,
}

/// Full run configuration; also the manifest format written by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub version: String,
    pub inputs: Inputs,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub lm: LmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            version: VERSION.to_string(),
            inputs: Inputs::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            lm: LmConfig::default(),
        }
    }
}

const SECTIONS: [&str; 8] = [
    "command", "version", "inputs", "synth", "model", "train", "split", "lm",
];

impl RunConfig {
    /// Parse a sectioned run config. A file without any known section is
    /// read as a flat synthetic-data config.
    pub fn from_toml_str(s: &str) -> Result<Self, String> {
        let table: toml::Table = toml::from_str(s).map_err(|e| e.to_string())?;
        if !table.is_empty() && !table.keys().any(|k| SECTIONS.contains(&k.as_str())) {
            let synth = SynthConfig::from_toml_str(s).map_err(|e| e.to_string())?;
            return Ok(Self {
                synth,
                ..Self::default()
            });
        }
        if let Some(k) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(format!("unknown top-level key `{k}`"));
        }
        toml::from_str(s).map_err(|e| e.to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "seqda",
    version,
    about = "Tablet/paper domain adaptation for sensor-pen word recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// Run config (TOML); a written manifest can be passed back here.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, default_value = "seqda-out")]
    out: PathBuf,
    /// Override every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Print per-epoch progress to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Debug, Args, Clone)]
struct TrainFlags {
    /// Fusion point 1..=5.
    #[arg(long)]
    c: Option<usize>,
    /// Metric loss kind, e.g. khomm_p3, coral, kmmd_p1.
    #[arg(long)]
    dml: Option<String>,
    /// Pairing mode: triplet or contrastive.
    #[arg(long)]
    mode: Option<PairingMode>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic tablet and paper datasets.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// CTC-pretrain the main (tablet) and auxiliary (paper) networks.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tablet: Option<PathBuf>,
        #[arg(long)]
        paper: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Fine-tune both networks with a pairwise metric loss.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        main: Option<PathBuf>,
        #[arg(long)]
        aux: Option<PathBuf>,
        #[arg(long)]
        tablet: Option<PathBuf>,
        #[arg(long)]
        paper: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// CER/WER of a checkpoint on a dataset, optionally with LM rescoring.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Build a character n-gram model from a plain-text corpus.
    BuildLm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        ngram: Option<usize>,
    },
    /// Decode with path enumeration and LM rescoring.
    Rescore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Histogram of tablet/paper pairs per edit distance.
    PairsReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tablet: Option<PathBuf>,
        #[arg(long)]
        paper: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Adapt { .. } => "adapt",
            Command::Evaluate { .. } => "evaluate",
            Command::BuildLm { .. } => "build-lm",
            Command::Rescore { .. } => "rescore",
            Command::PairsReport { .. } => "pairs-report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Pretrain { common, .. }
            | Command::Adapt { common, .. }
            | Command::Evaluate { common, .. }
            | Command::BuildLm { common, .. }
            | Command::Rescore { common, .. }
            | Command::PairsReport { common, .. } => common,
        }
    }
}

fn set<T>(slot: &mut Option<T>, flag: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = flag {
        *slot = Some(v.clone());
    }
}

fn resolve(cmd: &Command) -> Result<RunConfig, CliError> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("--config {}: {e}", p.display())))?;
            RunConfig::from_toml_str(&text)
                .map_err(|e| CliError::Usage(format!("--config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    cfg.command = cmd.name().to_string();
    cfg.version = VERSION.to_string();
    if let Some(s) = common.seed {
        cfg.synth.seed = s;
        cfg.model.seed = s;
        cfg.train.seed = s;
        cfg.split.seed = s;
    }
    let inp = &mut cfg.inputs;
    match cmd {
        Command::GenData { .. } => {}
        Command::Pretrain {
            tablet,
            paper,
            epochs,
            lr,
            ..
        } => {
            set(&mut inp.tablet, tablet);
            set(&mut inp.paper, paper);
            if let Some(e) = epochs {
                cfg.train.pretrain_epochs = *e;
            }
            if let Some(l) = lr {
                cfg.train.lr = *l;
            }
        }
        Command::Adapt {
            main,
            aux,
            tablet,
            paper,
            train,
            ..
        } => {
            set(&mut inp.main, main);
            set(&mut inp.aux, aux);
            set(&mut inp.tablet, tablet);
            set(&mut inp.paper, paper);
            let t = &mut cfg.train;
            if let Some(c) = train.c {
                t.fusion_point = c;
            }
            if let Some(d) = &train.dml {
                t.dml = d.clone();
            }
            if let Some(m) = train.mode {
                t.pairing = m;
            }
            if let Some(l) = train.lambda {
                t.lambda_pair = l;
            }
            set(&mut t.beta, &train.beta);
            set(&mut t.adapt_epochs, &train.epochs);
            if let Some(l) = train.lr {
                t.lr = l;
            }
        }
        Command::Evaluate {
            checkpoint,
            data,
            lm,
            gamma,
            ..
        }
        | Command::Rescore {
            checkpoint,
            data,
            lm,
            gamma,
            ..
        } => {
            set(&mut inp.checkpoint, checkpoint);
            set(&mut inp.data, data);
            set(&mut inp.lm, lm);
            if let Some(g) = gamma {
                cfg.lm.gamma = *g;
            }
        }
        Command::BuildLm { corpus, ngram, .. } => {
            set(&mut inp.corpus, corpus);
            if let Some(n) = ngram {
                cfg.lm.order = *n;
            }
        }
        Command::PairsReport { tablet, paper, .. } => {
            set(&mut inp.tablet, tablet);
            set(&mut inp.paper, paper);
        }
    }
    Ok(cfg)
}

fn required<'a>(slot: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    let p = slot
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing required flag --{flag}")))?;
    if !p.exists() {
        return Err(CliError::Usage(format!(
            "--{flag}: file not found: {}",
            p.display()
        )));
    }
    Ok(p)
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

fn load(path: &Path) -> Result<Dataset, CliError> {
    load_dataset(path, DatasetFormat::Jsonl, None).map_err(rt(&path.display().to_string()))
}

/// Tablet and paper sets re-encoded over their joint alphabet.
fn load_pair(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let t = load(required(&cfg.inputs.tablet, "tablet")?)?;
    let p = load(required(&cfg.inputs.paper, "paper")?)?;
    let alphabet = t.alphabet.union(&p.alphabet);
    let t = t.with_alphabet(alphabet.clone()).map_err(rt("tablet"))?;
    let p = p.with_alphabet(alphabet).map_err(rt("paper"))?;
    Ok((t, p))
}

fn load_lm(path: Option<&Path>, cfg: &LmConfig) -> Result<Option<LmDecoder>, CliError> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path).map_err(rt(&path.display().to_string()))?;
    let model = NGramModel::from_text(&text).map_err(rt(&path.display().to_string()))?;
    Ok(Some(LmDecoder {
        model,
        gamma: cfg.gamma,
        paths: cfg.paths(),
    }))
}

fn column(
    report: &RunReport,
    f: impl Fn(&crate::trainer::EpochRow) -> Option<f64>,
) -> Vec<(f64, f64)> {
    report
        .rows
        .iter()
        .filter_map(|r| f(r).map(|v| (r.epoch as f64, v)))
        .collect()
}

fn error_plot(report: &RunReport, title: &str) -> String {
    let series = vec![
        ("CER tablet".to_string(), column(report, |r| r.cer_tablet)),
        ("WER tablet".to_string(), column(report, |r| r.wer_tablet)),
        ("CER paper".to_string(), column(report, |r| r.cer_paper)),
        ("WER paper".to_string(), column(report, |r| r.wer_paper)),
        (
            "CER tablet+LM".to_string(),
            column(report, |r| r.cer_tablet_lm),
        ),
        (
            "WER tablet+LM".to_string(),
            column(report, |r| r.wer_tablet_lm),
        ),
    ];
    let series: Vec<_> = series.into_iter().filter(|(_, p)| !p.is_empty()).collect();
    line_plot(title, "epoch", "error rate", &series)
}

fn run_command(cmd: &Command, cfg: &mut RunConfig) -> Result<(), CliError> {
    let common = cmd.common();
    let out = &common.out;
    let split_of = |ds: &Dataset, cfg: &RunConfig| {
        split(ds, cfg.split.mode, cfg.split.ratio, cfg.split.seed).map_err(rt("split"))
    };
    match cmd {
        Command::GenData { .. } => {
            let (t, p) = synth_generate(&cfg.synth).map_err(rt("gen-data"))?;
            save_dataset(&t, &out.join("tablet.jsonl")).map_err(rt("tablet.jsonl"))?;
            save_dataset(&p, &out.join("paper.jsonl")).map_err(rt("paper.jsonl"))?;
        }
        Command::Pretrain { .. } => {
            let (t, p) = load_pair(cfg)?;
            cfg.model.num_classes = t.alphabet.num_classes();
            let lm = load_lm(cfg.inputs.lm.as_deref(), &cfg.lm)?;
            let opts = RunOptions {
                checkpoint_dir: Some(out),
                lm: lm.as_ref(),
                verbose: common.verbose,
            };
            for (ds, name) in [(&t, "main"), (&p, "aux")] {
                let (train, val) = split_of(ds, cfg)?;
                let res = pretrain(&train, Some(&val), &cfg.model, &cfg.train, None, &opts)
                    .map_err(rt(name))?;
                write(
                    &out.join(format!("pretrain_{name}.csv")),
                    &res.report.to_csv(),
                )?;
                write(
                    &out.join(format!("pretrain_{name}.svg")),
                    &error_plot(&res.report, &format!("pretraining ({name})")),
                )?;
            }
        }
        Command::Adapt { .. } => {
            let main_path = required(&cfg.inputs.main, "main")?.to_path_buf();
            let aux_path = required(&cfg.inputs.aux, "aux")?.to_path_buf();
            let (main, model_cfg, alphabet) = load_model(&main_path).map_err(rt("--main"))?;
            let (aux, aux_cfg, _) = load_model(&aux_path).map_err(rt("--aux"))?;
            if aux_cfg != model_cfg {
                return Err(CliError::Runtime(
                    "main and aux checkpoints use different model configs".into(),
                ));
            }
            cfg.model = model_cfg;
            let (t, p) = load_pair(cfg)?;
            let t = t.with_alphabet(alphabet.clone()).map_err(rt("tablet"))?;
            let p = p.with_alphabet(alphabet).map_err(rt("paper"))?;
            let (t_train, t_val) = split_of(&t, cfg)?;
            let (p_train, p_val) = split_of(&p, cfg)?;
            let lm = load_lm(cfg.inputs.lm.as_deref(), &cfg.lm)?;
            let opts = RunOptions {
                checkpoint_dir: Some(out),
                lm: lm.as_ref(),
                verbose: common.verbose,
            };
            let res = adapt(
                main,
                aux,
                &t_train,
                &p_train,
                Some(&t_val),
                Some(&p_val),
                &cfg.model,
                &cfg.train,
                &opts,
            )
            .map_err(rt("adapt"))?;
            write(&out.join("adapt.csv"), &res.report.to_csv())?;
            write(
                &out.join("adapt.svg"),
                &error_plot(&res.report, "adaptation"),
            )?;
        }
        Command::Evaluate { .. } | Command::Rescore { .. } => {
            let rescoring = matches!(cmd, Command::Rescore { .. });
            let ckpt = required(&cfg.inputs.checkpoint, "checkpoint")?.to_path_buf();
            let data = required(&cfg.inputs.data, "data")?.to_path_buf();
            let lm_path = if rescoring {
                Some(required(&cfg.inputs.lm, "lm")?.to_path_buf())
            } else {
                cfg.inputs.lm.clone()
            };
            let (params, model_cfg, alphabet) = load_model(&ckpt).map_err(rt("--checkpoint"))?;
            cfg.model = model_cfg;
            let ds = load(&data)?.with_alphabet(alphabet).map_err(rt("--data"))?;
            let lm = load_lm(lm_path.as_deref(), &cfg.lm)?;
            let ev = evaluate(&params, &cfg.model, &ds, lm.as_ref()).map_err(rt("evaluate"))?;
            let mut preds = String::from(if lm.is_some() {
                "id,label,best_path,rescored\n"
            } else {
                "id,label,best_path\n"
            });
            for (i, s) in ds.samples.iter().enumerate() {
                preds.push_str(&format!("{},{},{}", s.id, s.label, ev.predictions[i]));
                if let Some(lp) = &ev.lm_predictions {
                    preds.push_str(&format!(",{}", lp[i]));
                }
                preds.push('\n');
            }
            let mut metrics = format!("metric,value\ncer,{}\nwer,{}\n", ev.cer, ev.wer);
            if let Some(r) = ev.lm {
                metrics.push_str(&format!("cer_lm,{}\nwer_lm,{}\n", r.cer, r.wer));
            }
            let stem = if rescoring { "rescore" } else { "evaluate" };
            write(&out.join(format!("{stem}_predictions.csv")), &preds)?;
            write(&out.join(format!("{stem}_metrics.csv")), &metrics)?;
            print!("{metrics}");
        }
        Command::BuildLm { .. } => {
            let corpus_path = required(&cfg.inputs.corpus, "corpus")?;
            let text = fs::read_to_string(corpus_path).map_err(rt("--corpus"))?;
            let model = build_ngram(&text, cfg.lm.order).map_err(rt("build-lm"))?;
            write(&out.join("lm.ngram"), &model.to_text())?;
        }
        Command::PairsReport { .. } => {
            let (t, p) = load_pair(cfg)?;
            let dict = build_pair_dictionary(&t, &p).map_err(rt("pairs-report"))?;
            let hist = dict.histogram_csv();
            write(&out.join("pairs_histogram.csv"), &hist)?;
            write(&out.join("pairs.csv"), &dict.to_csv())?;
            let bars: Vec<(String, f64)> = (0..=MAX_ED)
                .map(|d| (d.to_string(), dict.counts()[d] as f64))
                .collect();
            write(
                &out.join("pairs_histogram.svg"),
                &log_bar_chart(
                    "tablet/paper pairs per edit distance",
                    "edit distance",
                    &bars,
                ),
            )?;
            print!("{hist}");
        }
    }
    Ok(())
}

fn init_threads() {
    if let Some(n) = std::env::var("SEQDA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

/// Parse `argv` and run one command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_threads();
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn execute(cmd: &Command) -> Result<(), CliError> {
    let mut cfg = resolve(cmd)?;
    let out = &cmd.common().out;
    fs::create_dir_all(out).map_err(rt(&out.display().to_string()))?;
    run_command(cmd, &mut cfg)?;
    write(&out.join("manifest.toml"), &cfg.to_toml_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.inputs.tablet = Some("a.jsonl".into());
        cfg.train.beta = Some(3.0);
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flat_synth_config_is_accepted() {
        let cfg = RunConfig::from_toml_str("n_tablet = 7\nseed = 3\n").unwrap();
        assert_eq!(cfg.synth.n_tablet, 7);
        assert_eq!(cfg.synth.seed, 3);
    }

    #[test]
    fn unknown_section_rejected() {
        assert!(RunConfig::from_toml_str("[synth]\nn_tablet = 7\n[bogus]\nx = 1\n").is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["seqda", "no-such-command"]), 2);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["seqda", "adapt", "--out", out]), 2);
    }
}
