use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use dot_cli::config::Overrides;
use dot_cli::run;
use dot_cli::verify::VerifyOptions;
use dot_core::tensor::Precision;

#[derive(Parser)]
#[command(name = "dot", version, about = "Train and evaluate double-transformer token pruning models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(clap::Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn out(&self, command: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command))
    }

    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            precision: self.precision.map(Into::into),
            threads: self.threads,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Gradient checks, masked-versus-compacted equivalence and parameter counts.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        /// Coordinates checked per parameter tensor.
        #[arg(long, default_value_t = 8)]
        coords: usize,
    },
    /// Train a model from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a JSONL dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated bucket edges (default 64,128,256).
        #[arg(long, value_delimiter = ',')]
        buckets: Option<Vec<usize>>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Substitute answer-row oracle scores for the pruning model's.
        #[arg(long)]
        oracle_scores: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Parameter counts for model strings like `TAPAS(mini)@256` or `DoT(m→256→l)@1024`.
    Params {
        models: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset from a JSON generator config.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Verify { common, cases, coords } => {
            let opts = VerifyOptions {
                seed: common.seed.unwrap_or(0),
                hard_drop_cases: cases,
                grad_coords: coords,
                ..VerifyOptions::default()
            };
            let rep = run::cmd_verify(&opts, &common.out("verify"))?;
            for s in &rep.suites {
                let status = if s.passed { "PASS" } else { "FAIL" };
                println!("{status} {:<16} cases {:>4}  max error {:.3e}  tolerance {:.0e}", s.name, s.cases, s.max_error, s.tolerance);
                for f in &s.failures {
                    println!("    {f}");
                }
            }
            Ok(if rep.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Train { config, common } => {
            let (cfg, base) = run::load_run(&config, &common.overrides())?;
            let rep = run::cmd_train(&cfg, &base, &common.out("train"))?;
            println!("{}: {} steps, final loss {:.5}", rep.model, rep.steps, rep.final_loss);
            if let Some(npe) = rep.npe_per_sec {
                println!("NPE/s {npe:.2}");
            }
            if let Some(e) = &rep.eval {
                println!("eval accuracy {:.4} ({}/{})", e.accuracy, e.correct, e.n);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            data,
            buckets,
            bins,
            oracle_scores,
            common,
        } => {
            let args = run::EvalArgs {
                checkpoint,
                data,
                buckets,
                bins,
                oracle_scores,
                precision: common.precision.map(Into::into).unwrap_or(Precision::F32),
                threads: common.threads.unwrap_or(1),
            };
            let rep = run::cmd_eval(&args, &common.out("eval"))?;
            println!("accuracy {:.4} ({}/{})", rep.accuracy, rep.correct, rep.n);
            for b in &rep.buckets {
                println!("  {:<12} {:.4} ({}/{})", b.bucket, b.accuracy, b.correct, b.n);
            }
            println!("answer pruned {:.4}", rep.answer_pruned_rate);
            Ok(if rep.rescorer_agrees { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Params { models, out } => {
            let rows = run::cmd_params(&models, &out.unwrap_or_else(|| PathBuf::from("runs/params")))?;
            for r in rows {
                println!("{:<24} {:>13}  {:>7.1}M", r.model, r.params, r.millions);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gen { config, common } => {
            let cfg = run::load_gen(&config, &common.overrides())?;
            let n = run::cmd_gen(&cfg, &common.out("gen"))?;
            println!("wrote {n} examples");
            Ok(ExitCode::SUCCESS)
        }
    }
}
