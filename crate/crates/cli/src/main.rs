use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rpt_cli::commands::{self, RunDir, RUN_ROOT_ENV};
use rpt_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "rpt", version, about = "Retrieval-pretrained transformer pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file (flat key = value).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set mode=txl`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory holding all runs.
    #[arg(long, env = RUN_ROOT_ENV, default_value = "runs")]
    run_root: PathBuf,
}

impl Common {
    fn load(&self) -> rpt_core::Result<(RunDir, RunConfig)> {
        let cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        Ok((RunDir::new(&self.run_root, &cfg), cfg))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize the corpus directories and write partition manifests.
    Ingest(Common),
    /// Score retrieval candidates and write supervision records.
    BuildSupervision(Common),
    /// Train a model, writing per-step metrics and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the run's checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps without changing the schedules.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Evaluate the run's checkpoint on the test split.
    Eval(Common),
    /// Write the analysis tables for the run's checkpoint.
    Analyze(Common),
    /// Generate the synthetic fact/query corpus as text files.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        train_docs: usize,
        #[arg(long, default_value_t = 16)]
        test_docs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> rpt_core::Result<()> {
    match cli.command {
        Command::Ingest(c) => {
            let (run, cfg) = c.load()?;
            let s = commands::ingest(&run, &cfg)?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            for (split, n) in &s.documents {
                println!("{split}: {n} documents");
            }
        }
        Command::BuildSupervision(c) => {
            let (run, cfg) = c.load()?;
            for (split, n) in commands::build_supervision(&run, &cfg)? {
                println!("{split}: {n} records");
            }
        }
        Command::Train { common, resume, until } => {
            let (run, cfg) = common.load()?;
            let s = commands::train(&run, &cfg, resume, until)?;
            match s.last {
                Some(b) => {
                    println!("steps {}..{}: lm {:.4} ret {:.4}", s.start_step, s.end_step, b.lm_loss, b.ret_loss)
                }
                None => println!("no steps to run; checkpoint at step {}", s.end_step),
            }
        }
        Command::Eval(c) => {
            let (run, cfg) = c.load()?;
            let r = commands::eval(&run, &cfg)?;
            println!("perplexity {:.4} over {} tokens", r.perplexity, r.tokens);
        }
        Command::Analyze(c) => {
            let (run, cfg) = c.load()?;
            for p in commands::analyze(&run, &cfg)? {
                println!("{}", p.display());
            }
        }
        Command::GenSynthetic { out, train_docs, test_docs, seed } => {
            commands::gen_synthetic(&out, train_docs, test_docs, seed)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
