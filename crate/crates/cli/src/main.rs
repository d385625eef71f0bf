//! `medrec`: generate synthetic data, train, evaluate and export.
//!
//! Any config field can be set with a flag of its dotted name, for example
//! `--train.dim 16` or `--eval.threshold=0.4`.

mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use medrec_core::config::{RunConfig, Variant};
use medrec_core::Result;

#[derive(Debug, Parser)]
#[command(name = "medrec", version, about = "Medication recommendation on ontologies and co-occurrence graphs")]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for both data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Target medication code for the unseen setting and tF1.
    #[arg(long, global = true)]
    target_med: Option<String>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic ontology and corpus (plus the planted scenario with --target-med).
    GenData,
    /// Train on the training split; writes a checkpoint and an epoch log.
    Train,
    /// Metrics of a checkpoint on the test split.
    Eval,
    /// Remove codes tied to --target-med from the training split.
    MaskUnseen,
    /// Learned gates as CSV plus the graph analysis report.
    ExportGraph,
    /// Per-code embeddings and fusion weights as CSV.
    ExportEmbeddings,
}

fn config(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut c = overrides::load(cli.config.as_deref(), overrides)?;
    if let Some(seed) = cli.seed {
        c.set_seed(seed);
    }
    if let Some(v) = cli.variant {
        c.train.variant = v;
    }
    if let Some(t) = &cli.target_med {
        c.target_med = Some(t.clone());
    }
    if let Some(d) = &cli.out_dir {
        c.out_dir = d.clone();
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let c = config(&cli, overrides)?;
    match cli.command {
        Command::GenData => commands::gen_data(&c),
        Command::Train => commands::train_cmd(&c),
        Command::Eval => commands::eval_cmd(&c),
        Command::MaskUnseen => commands::mask_unseen(&c),
        Command::ExportGraph => commands::export_graph(&c),
        Command::ExportEmbeddings => commands::export_embeddings(&c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let (args, overrides) = match overrides::split_overrides(std::env::args_os().collect()) {
        Ok(v) => v,
        Err(e) => return fail(e.kind(), &e.to_string()),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail("usage", first.trim_start_matches("error: "));
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}

/// One machine-parsable line: `error[<kind>]: <message>`.
fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("error[{kind}]: {}", message.replace('\n', " "));
    ExitCode::FAILURE
}
