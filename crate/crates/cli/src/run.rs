//! The subcommands. Each writes `manifest.json` and `report.json` to its
//! output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use dot_core::dot::{evaluate, load_model, oracle_row_scores, prepare_all, save_model, train, DoTConfig, DoTModel, Prepared};
use dot_core::pruning::PruningScores;
use dot_core::synth::{generate, BucketEdges};
use dot_core::table::{read_jsonl, write_jsonl, Vocabulary};
use dot_core::tensor::{ParamStore, Precision, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{self, GenConfig, Overrides, RunConfig};
use crate::report::{self, EvalReport};
use crate::verify::{self, VerifyOptions, VerifyReport};
use crate::params;

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub threads: Option<usize>,
    pub commit: String,
    /// Effective configuration after flag overrides.
    pub config: Value,
}

/// HEAD of the enclosing git checkout, or `unknown`.
pub fn commit() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: Value,
    seed: Option<u64>,
    precision: Option<Precision>,
    threads: Option<usize>,
) -> Result<()> {
    let m = Manifest {
        command: command.into(),
        config_hash: config::hash(&config)?,
        seed,
        precision,
        threads,
        commit: commit(),
        config,
    };
    report::write_json(&out.join("manifest.json"), &m)
}

fn base_dir(config_path: &Path) -> PathBuf {
    config_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub model: String,
    pub train_examples: usize,
    pub steps: usize,
    pub final_loss: f64,
    /// Processed examples per second over forward, backward and update,
    /// leaving out the first ten steps.
    pub npe_per_sec: Option<f64>,
    pub train_seconds: f64,
    pub eval: Option<EvalReport>,
}

/// Trains per `cfg`, writing `metrics.jsonl`, `model.ckpt`, `report.json`,
/// `manifest.json` and, with eval data, `histogram.csv` under `out`.
pub fn cmd_train(cfg: &RunConfig, base: &Path, out: &Path) -> Result<TrainReport> {
    fs::create_dir_all(out)?;
    let train_exs = cfg.data.train.load(base)?;
    let vocab = Vocabulary::build(&train_exs);
    let dot = cfg.model.resolve(vocab.len())?;
    let data = prepare_all(&dot, &train_exs, &vocab)?;
    let eval_data = match &cfg.data.eval {
        Some(src) => Some(prepare_all(&dot, &src.load(base)?, &vocab)?),
        None => None,
    };
    let report = match cfg.train.precision {
        Precision::F32 => train_as::<f32>(cfg, &dot, &vocab, &data, eval_data.as_deref(), out)?,
        Precision::F64 => train_as::<f64>(cfg, &dot, &vocab, &data, eval_data.as_deref(), out)?,
    };
    report::write_json(&out.join("report.json"), &report)?;
    write_manifest(
        out,
        "train",
        serde_json::to_value(cfg)?,
        Some(cfg.train.seed),
        Some(cfg.train.precision),
        Some(cfg.train.threads),
    )?;
    Ok(report)
}

fn train_as<T: Scalar>(
    cfg: &RunConfig,
    dot: &DoTConfig,
    vocab: &Vocabulary,
    data: &[Prepared],
    eval_data: Option<&[Prepared]>,
    out: &Path,
) -> Result<TrainReport> {
    let mut store = ParamStore::<T>::new();
    let model = DoTModel::init(dot, &mut store, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let started = Instant::now();
    let summary = train(&model, &mut store, &cfg.train, data, |rec| {
        serde_json::to_writer(&mut metrics, rec).map_err(|e| dot_core::DotError::Data(e.to_string()))?;
        metrics.write_all(b"\n")?;
        Ok(())
    })?;
    metrics.flush()?;
    let train_seconds = started.elapsed().as_secs_f64();
    save_model(&out.join("model.ckpt"), &store, dot, vocab)?;

    let eval = match eval_data {
        Some(ed) => {
            let recs = evaluate(&model, &store, ed, cfg.train.threads, None)?;
            let rep = report::summarize(&recs, ed, &cfg.eval.edges(), cfg.eval.histogram_bins);
            report::write_histogram(&out.join("histogram.csv"), &rep.histogram)?;
            Some(rep)
        }
        None => None,
    };
    Ok(TrainReport {
        model: dot.to_string(),
        train_examples: data.len(),
        steps: summary.steps,
        final_loss: summary.final_loss,
        npe_per_sec: summary.npe_per_sec,
        train_seconds,
        eval,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub buckets: Option<Vec<usize>>,
    pub bins: usize,
    /// Replace the pruning scores with 0 on the answer row and header, -inf elsewhere.
    pub oracle_scores: bool,
    pub precision: Precision,
    pub threads: usize,
}

pub fn cmd_eval(args: &EvalArgs, out: &Path) -> Result<EvalReport> {
    fs::create_dir_all(out)?;
    let exs = read_jsonl(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let report = match args.precision {
        Precision::F32 => eval_as::<f32>(args, &exs)?,
        Precision::F64 => eval_as::<f64>(args, &exs)?,
    };
    report::write_histogram(&out.join("histogram.csv"), &report.histogram)?;
    report::write_json(&out.join("report.json"), &report)?;
    write_manifest(
        out,
        "eval",
        serde_json::to_value(args)?,
        None,
        Some(args.precision),
        Some(args.threads),
    )?;
    Ok(report)
}

fn eval_as<T: Scalar>(args: &EvalArgs, exs: &[dot_core::table::Example]) -> Result<EvalReport> {
    let (model, store, vocab) = load_model::<T>(&args.checkpoint)?;
    let data = prepare_all(&model.config, exs, &vocab)?;
    let oracle = |p: &Prepared| -> PruningScores { oracle_row_scores(&p.seq, &p.example) };
    let over: Option<&(dyn Fn(&Prepared) -> PruningScores + Sync)> = if args.oracle_scores { Some(&oracle) } else { None };
    let recs = evaluate(&model, &store, &data, args.threads, over)?;
    let edges = args.buckets.clone().map(BucketEdges).unwrap_or_else(BucketEdges::desk);
    Ok(report::summarize(&recs, &data, &edges, args.bins))
}

pub fn cmd_gen(cfg: &GenConfig, out: &Path) -> Result<usize> {
    fs::create_dir_all(out)?;
    let exs = generate(&cfg.generator)?;
    write_jsonl(&out.join("examples.jsonl"), &exs)?;
    let lens: Vec<usize> = exs.iter().map(dot_core::synth::linearized_len).collect();
    report::write_json(
        &out.join("report.json"),
        &json!({
            "examples": exs.len(),
            "min_tokens": lens.iter().min(),
            "max_tokens": lens.iter().max(),
        }),
    )?;
    write_manifest(out, "gen", serde_json::to_value(cfg)?, Some(cfg.generator.seed), None, None)?;
    Ok(exs.len())
}

pub fn cmd_params(specs: &[String], out: &Path) -> Result<Vec<params::SizeRow>> {
    fs::create_dir_all(out)?;
    let rows = params::table(specs)?;
    report::write_json(&out.join("report.json"), &rows)?;
    write_manifest(out, "params", json!({ "models": specs }), None, None, None)?;
    Ok(rows)
}

pub fn cmd_verify(opts: &VerifyOptions, out: &Path) -> Result<VerifyReport> {
    fs::create_dir_all(out)?;
    let rep = verify::run(opts)?;
    report::write_json(&out.join("report.json"), &rep)?;
    write_manifest(
        out,
        "verify",
        json!({ "seed": opts.seed, "hard_drop_cases": opts.hard_drop_cases, "grad_coords": opts.grad_coords }),
        Some(opts.seed),
        Some(Precision::F64),
        Some(1),
    )?;
    Ok(rep)
}

/// Reads a train config and applies flag overrides.
pub fn load_run(path: &Path, o: &Overrides) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = config::parse_run(&config::read(path)?)?;
    cfg.apply(o);
    if cfg.train.threads == 0 {
        bail!("threads must be positive");
    }
    Ok((cfg, base_dir(path)))
}

pub fn load_gen(path: &Path, o: &Overrides) -> Result<GenConfig> {
    let mut cfg = config::parse_gen(&config::read(path)?)?;
    cfg.apply(o);
    Ok(cfg)
}
