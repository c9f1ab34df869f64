use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use quest_core::attention::VariantKind;
use quest_core::rng::Rng;
use quest_core::toy_data::{dump_dataset_jsonl, dump_realization_json, make_realization, sample_dataset};
use quest_core::verify;
use quest_harness::report::{emit_reports, write_telemetry_csv};
use quest_harness::run::{train_run, RunConfig};
use quest_harness::sweep::{run_sweep, SweepConfig, SweepSummary, ToyOverrides};
use serde::Deserialize;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "quest-lab",
    about = "Attention-normalization toy laboratory: gradient checks, training runs, sweeps, reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gradient and invariance verification suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model and write its telemetry CSV.
    Train {
        /// JSON run configuration; flags below are ignored when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "quest")]
        variant: String,
        #[arg(long, default_value_t = 0.0025)]
        lr: f64,
        #[arg(long, default_value_t = 0.01)]
        weight_decay: f64,
        #[arg(long, default_value_t = 0)]
        seed_weights: u64,
        #[arg(long, default_value_t = 0)]
        seed_data: u64,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value = "out/train")]
        out: PathBuf,
    },
    /// Run a hyperparameter sweep over variants, learning rates, decays, seeds.
    Sweep {
        /// Sweep configuration JSON (see SweepConfig); exclusive with --reduced/--full.
        #[arg(long, conflicts_with_all = ["reduced", "full"])]
        config: Option<PathBuf>,
        /// Built-in reduced grid: 3 lrs x 3 wds x 3 x 3 seeds per variant.
        #[arg(long, conflicts_with = "full")]
        reduced: bool,
        /// Built-in full study grid: 6 lrs x 5 wds x 5 x 5 seeds per variant.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value = "out/sweep")]
        out: PathBuf,
        /// Worker threads; 0 means one per core.
        #[arg(long, default_value_t = 0)]
        parallel: usize,
    },
    /// Aggregate a finished sweep directory into CSV/SVG reports.
    Report {
        #[arg(long)]
        dir: PathBuf,
        /// Output directory; defaults to <dir>/reports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a dataset and dump it as JSON lines plus a realization sidecar.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1600)]
        count: usize,
        /// Disable the bias shortcut (test-set style samples).
        #[arg(long)]
        unbiased: bool,
        #[arg(long, default_value = "out/data")]
        out: PathBuf,
    },
}

/// JSON mirror of the train flags.
#[derive(Deserialize)]
struct TrainFileConfig {
    variant: String,
    lr: f64,
    weight_decay: f64,
    #[serde(default)]
    seed_weights: u64,
    #[serde(default)]
    seed_data: u64,
    #[serde(default = "default_epochs")]
    epochs: usize,
    #[serde(default = "default_batch")]
    batch_size: usize,
    #[serde(default)]
    toy: Option<ToyOverrides>,
}

fn default_epochs() -> usize {
    50
}

fn default_batch() -> usize {
    32
}

fn parse_variant(name: &str) -> Result<VariantKind> {
    VariantKind::parse(name).with_context(|| {
        let names: Vec<&str> = VariantKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown variant '{name}' (expected one of {names:?})")
    })
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let outcomes = verify::run_all(seed);
    let mut all_ok = true;
    for o in &outcomes {
        println!(
            "{} {} ({})",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
        all_ok &= o.passed;
    }
    if !all_ok {
        bail!("gradient/invariance suite failed");
    }
    println!("all {} checks passed", outcomes.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<PathBuf>,
    variant: String,
    lr: f64,
    weight_decay: f64,
    seed_weights: u64,
    seed_data: u64,
    epochs: usize,
    batch_size: usize,
    out: PathBuf,
) -> Result<()> {
    let cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            let file: TrainFileConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            RunConfig {
                variant: parse_variant(&file.variant)?,
                lr: file.lr,
                weight_decay: file.weight_decay,
                seed_weights: file.seed_weights,
                seed_data: file.seed_data,
                epochs: file.epochs,
                batch_size: file.batch_size,
                toy: file
                    .toy
                    .map(|t| t.to_toy_config())
                    .unwrap_or_default(),
            }
        }
        None => RunConfig {
            variant: parse_variant(&variant)?,
            lr,
            weight_decay,
            seed_weights,
            seed_data,
            epochs,
            batch_size,
            ..RunConfig::default()
        },
    };

    std::fs::create_dir_all(&out)?;
    let result = train_run(&cfg)?;
    let telemetry_path = out.join("telemetry.csv");
    write_telemetry_csv(&result.telemetry, &telemetry_path)?;
    println!(
        "outcome: {}{} (train_acc {:.4}, test_acc {:.4}, {} steps)",
        result.outcome.tag.name(),
        if result.crashed { " [crashed]" } else { "" },
        result.outcome.train_acc,
        result.outcome.test_acc,
        result.total_steps
    );
    println!("telemetry: {}", telemetry_path.display());
    Ok(())
}

fn cmd_sweep(
    config: Option<PathBuf>,
    reduced: bool,
    full: bool,
    out: PathBuf,
    parallel: usize,
) -> Result<()> {
    let cfg = match (config, reduced, full) {
        (Some(path), _, _) => {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<SweepConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        (None, true, false) => SweepConfig::reduced(),
        (None, false, true) => SweepConfig::full(),
        _ => bail!("pass one of --config FILE, --reduced, or --full"),
    };

    let total = cfg.expand()?.len();
    eprintln!(
        "sweep: {} variants x {} runs each = {} runs",
        cfg.variants.len(),
        cfg.runs_per_variant(),
        total
    );
    let summary = run_sweep(&cfg, parallel, &out)?;
    for (variant, vs) in &summary.variants {
        println!(
            "{variant}: overall success rate {:.3}",
            vs.overall_success_rate
        );
    }
    println!("summary: {}", out.join("summary.json").display());
    Ok(())
}

fn cmd_report(dir: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let summary_path = dir.join("summary.json");
    let text = std::fs::read_to_string(&summary_path)
        .with_context(|| format!("reading {}", summary_path.display()))?;
    let summary = SweepSummary::from_json(&text)?;
    let out_dir = out.unwrap_or_else(|| dir.join("reports"));
    emit_reports(&summary, &dir, &out_dir)?;
    println!("reports written to {}", out_dir.display());
    Ok(())
}

fn cmd_gen_data(seed: u64, count: usize, unbiased: bool, out: PathBuf) -> Result<()> {
    let cfg = quest_core::toy_data::ToyConfig::default();
    let real = make_realization(&cfg, seed);
    let mut rng = Rng::new(seed).split(if unbiased { "test" } else { "train" });
    let samples = sample_dataset(&real, &cfg, count, !unbiased, &mut rng)?;
    std::fs::create_dir_all(&out)?;
    let data_path = out.join(if unbiased { "test.jsonl" } else { "train.jsonl" });
    dump_dataset_jsonl(&samples, &data_path)?;
    dump_realization_json(&real, &out.join("realization.json"))?;
    println!(
        "wrote {} samples to {} (realization sidecar alongside)",
        samples.len(),
        data_path.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Train {
            config,
            variant,
            lr,
            weight_decay,
            seed_weights,
            seed_data,
            epochs,
            batch_size,
            out,
        } => cmd_train(
            config,
            variant,
            lr,
            weight_decay,
            seed_weights,
            seed_data,
            epochs,
            batch_size,
            out,
        ),
        Command::Sweep {
            config,
            reduced,
            full,
            out,
            parallel,
        } => cmd_sweep(config, reduced, full, out, parallel),
        Command::Report { dir, out } => cmd_report(dir, out),
        Command::GenData {
            seed,
            count,
            unbiased,
            out,
        } => cmd_gen_data(seed, count, unbiased, out),
    }
}
