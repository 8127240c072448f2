//! Command-line front end. Exit codes: 0 on success, 1 for usage problems,
//! 2 for runtime failures.

mod commands;
mod font;
mod plot;
mod spec;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use enaet::data::SyntheticConfig;

use spec::{parse_seeds, resolve_config, Ablation, ExperimentSpec, UsageError};

#[derive(Parser)]
#[command(name = "enaet", version, about = "Train and inspect transform-ensemble SSL models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run per seed and summarize the results
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split
    Eval(EvalArgs),
    /// Run the fixed 9-method ablation matrix over the seed list
    Ablate(AblateArgs),
    /// Generate a synthetic shape-classification dataset
    GenData(GenDataArgs),
    /// Render sampled transforms from every family as image grids
    DumpTransforms(DumpTransformsArgs),
    /// Plot loss and error curves from a metrics file
    Plot(PlotArgs),
}

#[derive(Copy, Clone, ValueEnum)]
enum FamilyArg {
    Proj,
    Affine,
    Sim,
    Euc,
    Ccbs,
}

impl FamilyArg {
    fn index(self) -> usize {
        match self {
            FamilyArg::Proj => 0,
            FamilyArg::Affine => 1,
            FamilyArg::Sim => 2,
            FamilyArg::Euc => 3,
            FamilyArg::Ccbs => 4,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training config file; missing keys fall back to defaults
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dataset directory written by gen-data (or matching its layout)
    #[arg(long, value_name = "PATH")]
    dataset: PathBuf,
    /// Run directory to create
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Seed count (counting up from the base seed) or a comma list
    #[arg(long, value_name = "N|LIST")]
    seeds: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Drop the transform regression terms
    #[arg(long)]
    no_aet: bool,
    /// Drop the consistency terms
    #[arg(long)]
    no_cl: bool,
    /// Keep a single transformation family
    #[arg(long, value_enum, value_name = "FAMILY")]
    only_family: Option<FamilyArg>,
    /// Plain MixMatch: no transform branches at all
    #[arg(long, conflicts_with_all = ["no_aet", "no_cl", "only_family"])]
    ssl_only: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    dataset: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    dataset: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Seed count (counting up from the base seed) or a comma list
    #[arg(long, value_name = "N|LIST")]
    seeds: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 250)]
    train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DumpTransformsArgs {
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Take the source image from this dataset instead of a synthetic one
    #[arg(long, value_name = "PATH")]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sampled transforms per family
    #[arg(long, default_value_t = 8)]
    count: usize,
}

#[derive(Args)]
struct PlotArgs {
    /// Metrics file (JSON lines) from a training run
    metrics: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn experiment_spec(
    config: Option<&PathBuf>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    seeds: Option<&str>,
    out: &PathBuf,
    ablation: Ablation,
) -> anyhow::Result<ExperimentSpec> {
    let base = resolve_config(config.map(|p| p.as_path()), epochs, batch_size)?;
    let seeds = parse_seeds(seeds, base.seed)?;
    let name = out
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    Ok(ExperimentSpec { name, base, ablation, seeds })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Train(a) => {
            let ablation = Ablation {
                no_aet: a.no_aet,
                no_cl: a.no_cl,
                only_family: a.only_family.map(FamilyArg::index),
                ssl_only: a.ssl_only,
            };
            let spec = experiment_spec(
                a.config.as_ref(),
                a.epochs,
                a.batch_size,
                a.seeds.as_deref(),
                &a.out,
                ablation,
            )?;
            commands::cmd_train(&spec, &a.dataset, &a.out)
        }
        Cmd::Eval(a) => commands::cmd_eval(&a.checkpoint, &a.dataset),
        Cmd::Ablate(a) => {
            let spec = experiment_spec(
                a.config.as_ref(),
                a.epochs,
                a.batch_size,
                a.seeds.as_deref(),
                &a.out,
                Ablation::default(),
            )?;
            commands::cmd_ablate(&spec, &a.dataset, &a.out)
        }
        Cmd::GenData(a) => {
            let cfg = SyntheticConfig {
                num_classes: a.classes,
                height: a.height,
                width: a.width,
                channels: a.channels,
                train_per_class: a.train_per_class,
                test_per_class: a.test_per_class,
            };
            commands::cmd_gen_data(&a.out, &cfg, a.seed)
        }
        Cmd::DumpTransforms(a) => {
            commands::cmd_dump_transforms(&a.out, a.dataset.as_deref(), a.seed, a.count)
        }
        Cmd::Plot(a) => commands::cmd_plot(&a.metrics, &a.out),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code =
                if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                    0
                } else {
                    1
                };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        let code = if err.downcast_ref::<UsageError>().is_some() { 1 } else { 2 };
        std::process::exit(code);
    }
}
