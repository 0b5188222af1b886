//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_path_to_error::Segment;

use crate::analysis::{analyze, write_analysis, Provenance};
use crate::data::{generate_synthetic_corpus, load_verified, write_corpus_dir, Corpus, GeneratorInfo, ViewPairExample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport, MatchMode};
use crate::masking::Placement;
use crate::model::{ModelConfig, Transformer};
use crate::objectives::{ObjectiveConfig, ObjectiveMode};
use crate::trainer::{seed_dir, train, write_json, GridConfig, RunReport, RunStatus, TrainConfig};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "LLM_JEPA_OUT";
/// Timestamps go here and nowhere else.
pub const LOG_NAME: &str = "run.log";

#[derive(Parser, Debug)]
#[command(name = "llm-jepa", version, about = "Train and evaluate desk-scale LLM-JEPA models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic description/pattern corpus with its manifest.
    GenData {
        #[arg(long, default_value_t = 82)]
        seed: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every seed of a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
        /// Comma-separated seeds overriding the configuration.
        #[arg(long, value_delimiter = ',')]
        seed_set: Option<Vec<u64>>,
        /// Sweep (k, lambda) and write a heatmap of mean test accuracy.
        #[arg(long)]
        grid: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint or every seed of a run directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
        mode: ModeArg,
        #[arg(long, default_value_t = 64)]
        max_new_tokens: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired one-tailed t-test of report B against baseline report A.
    Compare {
        #[arg(long)]
        report_a: PathBuf,
        #[arg(long)]
        report_b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export embeddings and geometry diagnostics for a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, value_enum, default_value_t = PlacementArg::Append)]
        placement: PlacementArg,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ObjectiveArg {
    Ntp,
    Jepa,
    Monitor,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Exact,
    Prefix,
    Substring,
    LabelPrefix,
    McOptionProb,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PlacementArg {
    Append,
    Prepend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

/// Everything a training run needs, read from one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub corpus: CorpusPaths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

fn schema(pointer: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Schema {
        pointer: pointer.to_string(),
        message: e.to_string(),
    }
}

impl RunConfigFile {
    /// Parse and validate; relative corpus paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &PathBuf| if p.is_relative() { base.join(p) } else { p.clone() };
        cfg.corpus.train = resolve(&cfg.corpus.train);
        cfg.corpus.test = cfg.corpus.test.as_ref().map(resolve);
        cfg.output_dir = cfg.output_dir.as_ref().map(resolve);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfigFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            pointer: json_pointer(e.path()),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(schema("/model"))?;
        self.train.validate().map_err(schema("/train"))?;
        self.objective.validate().map_err(schema("/objective"))?;
        self.eval.validate().map_err(schema("/eval"))?;
        Ok(())
    }
}

fn match_mode(m: ModeArg) -> MatchMode {
    match m {
        ModeArg::Exact => MatchMode::Exact,
        ModeArg::Prefix => MatchMode::Prefix,
        ModeArg::Substring => MatchMode::Substring,
        ModeArg::LabelPrefix => MatchMode::LabelPrefix,
        ModeArg::McOptionProb => MatchMode::McOptionProb,
    }
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Append a timestamped line to `dir/run.log`.
fn log_line(dir: &Path, msg: &str) -> Result<()> {
    let path = dir.join(LOG_NAME);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{} {msg}", unix_seconds()).map_err(|e| Error::io(&path, e))
}

fn pairs(corpus: &Corpus) -> Vec<ViewPairExample> {
    corpus.pairs_for_epoch(0)
}

fn cmd_gen_data(seed: u64, n: u64, depth: usize, out: &Path) -> Result<()> {
    let corpus = generate_synthetic_corpus(seed, n as usize, depth)?;
    let info = GeneratorInfo {
        seed,
        n_examples: n as usize,
        depth,
    };
    let manifest = write_corpus_dir(out, &corpus, Some(info))?;
    println!("{}", manifest.display());
    Ok(())
}

/// Accuracy of every completed seed of one run on `test`.
fn eval_runs(report: &RunReport, out: &Path, test: &[ViewPairExample], config: &EvalConfig) -> Result<EvalReport> {
    let mut seeds = Vec::new();
    let mut accs = Vec::new();
    for s in &report.seeds {
        if s.status != RunStatus::Completed {
            continue;
        }
        let model = Transformer::load(&seed_dir(out, s.seed).join("final.ckpt"))?;
        let (acc, _) = evaluate(&model, test, config)?;
        seeds.push(s.seed);
        accs.push(acc);
    }
    if seeds.is_empty() {
        return Err(Error::Divergence("every seed diverged".into()));
    }
    EvalReport::new(seeds, accs, config.clone())
}

fn cmd_train(
    config_path: &Path,
    objective: Option<ObjectiveArg>,
    seed_set: Option<Vec<u64>>,
    grid: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = RunConfigFile::load(config_path)?;
    if let Some(o) = objective {
        cfg.objective.mode = match o {
            ObjectiveArg::Ntp => ObjectiveMode::Ntp,
            ObjectiveArg::Jepa => ObjectiveMode::Jepa,
            ObjectiveArg::Monitor => ObjectiveMode::Monitor,
        };
    }
    if let Some(s) = seed_set {
        cfg.train.seeds = s;
    }
    if grid && cfg.train.grid.is_none() {
        cfg.train.grid = Some(GridConfig::default());
    }
    cfg.validate()?;
    let out = out
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(&out.join("config.json"), &cfg)?;
    log_line(&out, "train start")?;
    let corpus = load_verified(&cfg.corpus.train)?;

    if let (true, Some(g)) = (grid, cfg.train.grid.clone()) {
        let test_path = cfg
            .corpus
            .test
            .clone()
            .ok_or_else(|| Error::Schema {
                pointer: "/corpus/test".into(),
                message: "the grid sweep scores cells on a test corpus".into(),
            })?;
        let test = pairs(&load_verified(&test_path)?);
        let mut csv = String::from("k");
        for l in &g.lambda {
            csv.push_str(&format!(",lambda={l}"));
        }
        csv.push('\n');
        for &k in &g.k {
            csv.push_str(&k.to_string());
            for &lambda in &g.lambda {
                let cell = out.join("grid").join(format!("k{k}-lambda{lambda}"));
                let obj = ObjectiveConfig {
                    k,
                    lambda,
                    ..cfg.objective.clone()
                };
                let (report, _) = train(&cfg.model, &cfg.train, &obj, &corpus, Some(&cell))?;
                let eval = eval_runs(&report, &cell, &test, &cfg.eval)?;
                write_json(&cell.join("eval_report.json"), &eval)?;
                csv.push_str(&format!(",{}", eval.mean));
                log_line(&out, &format!("grid cell k={k} lambda={lambda} done"))?;
            }
            csv.push('\n');
        }
        let path = out.join("heatmap.csv");
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    } else {
        let (report, _) = train(&cfg.model, &cfg.train, &cfg.objective, &corpus, Some(&out))?;
        for s in &report.seeds {
            let status = match s.status {
                RunStatus::Completed => "completed".to_string(),
                RunStatus::Diverged => format!("diverged ({})", s.diagnostic.clone().unwrap_or_default()),
            };
            log_line(&out, &format!("seed {} {status}", s.seed))?;
        }
        if report.seeds.iter().all(|s| s.status == RunStatus::Diverged) {
            return Err(Error::Divergence("every seed diverged".into()));
        }
    }
    log_line(&out, "train done")?;
    println!("{}", out.display());
    Ok(())
}

/// Checkpoints to evaluate with their seed labels.
fn checkpoints(path: &Path) -> Result<Vec<(u64, PathBuf)>> {
    if path.is_dir() {
        let report_path = path.join("report.json");
        let text = fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
        let report: RunReport = serde_json::from_str(&text)?;
        return Ok(report
            .seeds
            .iter()
            .filter(|s| s.status == RunStatus::Completed)
            .map(|s| (s.seed, seed_dir(path, s.seed).join("final.ckpt")))
            .collect());
    }
    let seed = path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix("seed-"))
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    Ok(vec![(seed, path.to_path_buf())])
}

#[derive(Serialize)]
struct SeedTranscript<'a> {
    seed: u64,
    #[serde(flatten)]
    record: &'a crate::eval::Transcript,
}

fn cmd_eval(checkpoint: &Path, corpus: &Path, mode: ModeArg, max_new_tokens: usize, out: &Path) -> Result<()> {
    let config = EvalConfig {
        match_mode: match_mode(mode),
        max_new_tokens,
        ..Default::default()
    };
    config.validate()?;
    let test = pairs(&load_verified(corpus)?);
    let cks = checkpoints(checkpoint)?;
    if cks.is_empty() {
        return Err(Error::contract("no completed checkpoints to evaluate"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut transcripts = Vec::new();
    let mut seeds = Vec::new();
    let mut accs = Vec::new();
    for (seed, path) in &cks {
        let model = Transformer::load(path)?;
        let (acc, tr) = evaluate(&model, &test, &config)?;
        for t in &tr {
            serde_json::to_writer(&mut transcripts, &SeedTranscript { seed: *seed, record: t })?;
            transcripts.push(b'\n');
        }
        seeds.push(*seed);
        accs.push(acc);
    }
    let report = EvalReport::new(seeds, accs, config)?;
    write_json(&out.join("report.json"), &report)?;
    let tp = out.join("transcripts.jsonl");
    fs::write(&tp, transcripts).map_err(|e| Error::io(&tp, e))?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        pointer: json_pointer(e.path()),
        message: e.inner().to_string(),
    })
}

fn cmd_compare(a: &Path, b: &Path, out: Option<&Path>) -> Result<()> {
    let base = read_report(a)?;
    let mut other = read_report(b)?;
    other.compare_to(&base, &a.display().to_string())?;
    let text = serde_json::to_string_pretty(&other)? + "\n";
    match out {
        Some(p) => fs::write(p, &text).map_err(|e| Error::io(p, e))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_analyze(checkpoint: &Path, corpus: &Path, out: &Path, k: usize, placement: PlacementArg) -> Result<()> {
    let model = Transformer::load(checkpoint)?;
    let examples = pairs(&load_verified(corpus)?);
    let provenance = Provenance {
        checkpoint: checkpoint.display().to_string(),
        corpus: corpus.display().to_string(),
        k,
    };
    let placement = match placement {
        PlacementArg::Append => Placement::Append,
        PlacementArg::Prepend => Placement::Prepend,
    };
    let (report, embeddings) = analyze(&model, &examples, k, placement, provenance)?;
    write_analysis(out, &report, &embeddings)?;
    println!("{}", serde_json::to_string(&report.fit)?);
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, n, depth, out } => cmd_gen_data(seed, n, depth, &out),
        Command::Train {
            config,
            objective,
            seed_set,
            grid,
            out,
        } => cmd_train(&config, objective, seed_set, grid, out),
        Command::Eval {
            checkpoint,
            corpus,
            mode,
            max_new_tokens,
            out,
        } => cmd_eval(&checkpoint, &corpus, mode, max_new_tokens, &out),
        Command::Compare { report_a, report_b, out } => cmd_compare(&report_a, &report_b, out.as_deref()),
        Command::Analyze {
            checkpoint,
            corpus,
            out,
            k,
            placement,
        } => cmd_analyze(&checkpoint, &corpus, &out, k, placement),
    }
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
