use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dropattn::cli;
use dropattn::dropattn::Variant;

#[derive(Parser)]
#[command(name = "dropattn", version, about = "Transformer encoder experiments with DropAttention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from an experiment config file.
    ///
    /// Any config key can be overridden with trailing --key=value arguments,
    /// e.g. `dropattn train exp.cfg --drop.p=0.3 --seed=7`.
    Train {
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset file; prints metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Capture attention weights and write metrics.csv / histogram.csv.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Monte-Carlo DropAttention mask statistics (CSV on stdout).
    MaskStats {
        #[arg(long)]
        len: usize,
        #[arg(long)]
        p: f32,
        #[arg(long)]
        w: usize,
        #[arg(long, default_value = "element")]
        variant: String,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Generate the synthetic shortcut dataset as train/dev/test TSVs.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        len: usize,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 0.9)]
        reliability: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn parse_variant(value: &str) -> Result<Variant, dropattn::Error> {
    match value {
        "column" | "c" => Ok(Variant::Column),
        "element" | "e" => Ok(Variant::Element),
        other => Err(dropattn::Error::Config {
            field: "variant".into(),
            msg: format!("expected column or element, got {other:?}"),
        }),
    }
}

fn run() -> Result<(), dropattn::Error> {
    match Cli::parse().command {
        Command::Train { config, overrides } => {
            cli::cmd_train(&config, &overrides)?;
        }
        Command::Eval { checkpoint, data } => {
            println!("{}", cli::cmd_eval(&checkpoint, &data)?);
        }
        Command::Analyze { checkpoint, data, out, bins } => {
            cli::cmd_analyze(&checkpoint, &data, &out, bins)?;
        }
        Command::MaskStats { len, p, w, variant, samples, seed } => {
            let variant = parse_variant(&variant)?;
            print!("{}", cli::cmd_mask_stats(len, p, w, variant, samples, seed)?);
        }
        Command::GenData { out, n, len, vocab, reliability, seed } => {
            cli::cmd_gen_data(&out, n, len, vocab, reliability, seed)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(cli::exit_code(&err) as u8)
        }
    }
}
