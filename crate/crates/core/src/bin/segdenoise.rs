use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use segdenoise::harness::{
    cmd_eval, cmd_generate, cmd_report, cmd_train, parse_noise, EvalArgs, ExperimentConfig, GenerateArgs, ReportArgs,
    SplitChoice, TrainArgs,
};
use segdenoise::train::TrainVariant;
use segdenoise::Result;

#[derive(Parser)]
#[command(name = "segdenoise", version, about = "Segmentation-conditioned denoising cascades on synthetic data")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its train/test manifests.
    Generate {
        #[arg(long)]
        force: bool,
        /// Dataset seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a cascade stage by stage, then score it on the test split.
    Train {
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        force: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate trained checkpoints and optionally dump PNGs.
    Eval {
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long, value_enum, default_value = "both")]
        split: Split,
        /// Evaluation noise, e.g. `gaussian:30` or `poisson:255`.
        #[arg(long)]
        noise: Option<String>,
        #[arg(long)]
        dump_images: bool,
        #[arg(long)]
        force: bool,
    },
    /// Merge metrics of several runs into tables and plots.
    Report {
        /// Run directories.
        runs: Vec<PathBuf>,
        /// Output directory (default `<output root>/report`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Conditioned,
    Plain,
    ImgCondition,
    GtCondition,
    Joint,
}

impl From<Variant> for TrainVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Conditioned => TrainVariant::Conditioned,
            Variant::Plain => TrainVariant::Plain,
            Variant::ImgCondition => TrainVariant::ImgCondition,
            Variant::GtCondition => TrainVariant::GtCondition,
            Variant::Joint => TrainVariant::Joint,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
    Both,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    match cli.command {
        Command::Generate { force, seed } => {
            let (train, test) = cmd_generate(&cfg, GenerateArgs { force, seed })?;
            println!("{}", train.display());
            println!("{}", test.display());
        }
        Command::Train {
            variant,
            blocks,
            force,
            quiet,
        } => {
            let args = TrainArgs {
                variant: variant.map(Into::into),
                blocks,
                force,
                verbose: !quiet,
            };
            println!("{}", cmd_train(&cfg, args)?.display());
        }
        Command::Eval {
            variant,
            blocks,
            split,
            noise,
            dump_images,
            force,
        } => {
            let noise = noise.map(|n| parse_noise(&n, cfg.noise.seed())).transpose()?;
            let split = match split {
                Split::Train => SplitChoice::Train,
                Split::Test => SplitChoice::Test,
                Split::Both => SplitChoice::Both,
            };
            let args = EvalArgs {
                variant: variant.map(Into::into),
                blocks,
                split,
                noise,
                dump_images,
                force,
            };
            println!("{}", cmd_eval(&cfg, args)?.display());
        }
        Command::Report { runs, out, force } => {
            let out = out.unwrap_or_else(|| cfg.output_root().join("report"));
            let files = cmd_report(&ReportArgs { runs, out, force })?;
            print!("{}", std::fs::read_to_string(&files.table).unwrap_or_default());
            for p in [&files.table, &files.csv].into_iter().chain(&files.plots) {
                eprintln!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
