use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use unisearch_cli::{ablate, eval, gen_data, train, EvalArgs, RunConfig};
use unisearch_core::corpus::Split;
use unisearch_core::DEFAULT_K;

#[derive(Parser)]
#[command(name = "unisearch", version, about = "Synthetic multilingual retrieval + NLU training pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to the config's data directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        /// Input checkpoint; defaults to the previous stage's run.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to `<out_dir>/stage<N>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate one checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Variant name in the report; defaults to the run directory name.
        #[arg(long)]
        name: Option<String>,
        /// Report directory; defaults to `eval/` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every ablation variant for every seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| format!("unknown split {s:?} (train, val or test)"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let m = gen_data(&cfg, out.as_deref())?;
            let records: usize = m.splits.iter().map(|s| s.records).sum();
            println!("{records} records, {} images, vocabulary {}", m.images, m.vocab_size);
        }
        Cmd::Train { stage, config, init, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.set_seed(s);
            }
            let o = train(&cfg, stage, init.as_deref(), out.as_deref())?;
            let last = o.trace.last().map_or(f64::NAN, |r| r.loss_total);
            println!(
                "stage {stage}: {} steps, final loss {last:.4}, checkpoint {}",
                o.trace.len(),
                o.checkpoint.display()
            );
        }
        Cmd::Eval { ckpt, data, k, split, name, out } => {
            let report = eval(&EvalArgs {
                ckpt: &ckpt,
                data: &data,
                k,
                split,
                name: name.as_deref(),
                out: out.as_deref(),
            })?;
            print!("{}", report.render_table());
        }
        Cmd::Ablate { config } => {
            let o = ablate(&RunConfig::load(&config)?)?;
            print!("{}", o.combined.render_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
