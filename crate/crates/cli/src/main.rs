use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gist_core::harness::{
    evaluate, full_loss_gradcheck, load_model, records_to_csv, similarity_histogram, sweep, sweep_rows_to_csv, train,
    TrainConfig, GRADCHECK_TOL,
};
use gist_core::model::Variant;
use gist_core::synth::{read_dataset, write_dataset, GenConfig};
use gist_core::{Error, Result};

#[derive(Parser)]
#[command(name = "gist", version, about = "Attention-aligned answer and rationale selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as JSON lines.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Objects per instance (4 to 8).
        #[arg(long)]
        objects: Option<usize>,
        /// Standard deviation of the feature noise.
        #[arg(long)]
        noise: Option<f64>,
        /// TOML generator config; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train from a TOML config and write the per-epoch report as CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Check full-loss gradients of a small model against finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = VariantArg::All)]
        variant: VariantArg,
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Histogram of gold-pair attention similarity.
    Hist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per alignment weight and summarize the final epochs.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        /// CSV destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Vanilla,
    Transformer,
    All,
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn gen_data(
    seed: Option<u64>,
    count: Option<usize>,
    out: &Path,
    objects: Option<usize>,
    noise: Option<f64>,
    config: Option<&Path>,
) -> Result<()> {
    let mut cfg = match config {
        Some(path) => GenConfig::from_toml(
            &fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?,
        )?,
        None => {
            let (Some(seed), Some(count)) = (seed, count) else {
                return Err(Error::Config("--seed and --count are required without --config".into()));
            };
            GenConfig::new(seed, count)
        }
    };
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.count = count.unwrap_or(cfg.count);
    cfg.objects = objects.unwrap_or(cfg.objects);
    cfg.noise_sigma = noise.unwrap_or(cfg.noise_sigma);
    cfg.validate()?;
    let data = write_dataset(out, &cfg)?;
    eprintln!("wrote {} instances to {}", data.len(), out.display());
    Ok(())
}

fn run_train(config: &Path) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let outcome = train::<f64>(&cfg, |r| {
        eprintln!(
            "epoch {:>3}  L_qa {:.4}  L_qar {:.4}  L_align {:.4}  Q->A {:.3}  QA->R {:.3}  Q->AR {:.3}  sim {:.3}",
            r.epoch, r.l_qa, r.l_qar, r.l_align, r.acc_q2a, r.acc_qa2r, r.acc_q2ar, r.gold_similarity
        )
    })?;
    emit(&outcome.report.to_csv()?, cfg.report_path.as_deref())
}

fn run_eval(checkpoint: &Path, data: &Path) -> Result<()> {
    let model = load_model::<f64>(checkpoint)?;
    let metrics = evaluate(&model, &read_dataset(data)?)?;
    emit(&records_to_csv(&[metrics])?, None)
}

/// Returns whether every point met the tolerance.
fn run_gradcheck(variant: VariantArg, points: usize, seed: u64) -> Result<bool> {
    let variants = match variant {
        VariantArg::Vanilla => vec![Variant::Vanilla],
        VariantArg::Transformer => vec![Variant::Transformer],
        VariantArg::All => vec![Variant::Vanilla, Variant::Transformer],
    };
    let mut all_ok = true;
    for v in variants {
        for (k, r) in full_loss_gradcheck(v, points, seed)?.iter().enumerate() {
            let ok = r.max_rel_error < GRADCHECK_TOL;
            all_ok &= ok;
            println!(
                "{v} point {k}: max_rel_error {:.3e} over {} coords, {} above {GRADCHECK_TOL:e}, excess {:.2} resolution units  {}",
                r.max_rel_error,
                r.coordinates,
                r.count_above(GRADCHECK_TOL),
                r.excess_over_resolution(GRADCHECK_TOL),
                if ok { "PASS" } else { "FAIL" }
            );
        }
    }
    Ok(all_ok)
}

fn run_hist(checkpoint: &Path, data: &Path, bins: usize, out: &Path) -> Result<()> {
    let model = load_model::<f64>(checkpoint)?;
    let rows = similarity_histogram(&model, &read_dataset(data)?, bins)?;
    emit(&records_to_csv(&rows)?, Some(out))
}

fn run_sweep(config: &Path, lambdas: &[f64], out: Option<&Path>) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let rows = sweep::<f64>(&cfg, lambdas, |r| {
        eprintln!("lambda {}  Q->AR {:.3}  sim {:.3}", r.lambda, r.acc_q2ar, r.gold_similarity)
    })?;
    emit(&sweep_rows_to_csv(&rows)?, out)
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { seed, count, out, objects, noise, config } => {
            gen_data(seed, count, &out, objects, noise, config.as_deref())
        }
        Command::Train { config } => run_train(&config),
        Command::Eval { checkpoint, data } => run_eval(&checkpoint, &data),
        Command::Gradcheck { variant, points, seed } => match run_gradcheck(variant, points, seed) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
        Command::Hist { checkpoint, data, bins, out } => run_hist(&checkpoint, &data, bins, &out),
        Command::Sweep { config, lambdas, out } => run_sweep(&config, &lambdas, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
