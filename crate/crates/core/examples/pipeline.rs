//! End to end through the harness: generate a small dataset, train a
//! two-block cascade and the plain baseline, evaluate both and build the
//! report. Output goes to the directory given as the first argument, or a
//! temporary directory.

use segdenoise::harness::{
    cmd_eval, cmd_generate, cmd_report, cmd_train, EvalArgs, ExperimentConfig, GenerateArgs, ReportArgs, SplitChoice,
    TrainArgs,
};
use segdenoise::noise::NoiseSpec;
use segdenoise::train::TrainVariant;
use segdenoise::Result;

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.name = "demo".into();
    cfg.output_dir = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("segdenoise-demo-{}", std::process::id())));
    cfg.dataset.size = 32;
    cfg.dataset.count = 80;
    cfg.training.crop = 0;
    cfg.training.segmentation.epochs = 6;
    cfg.training.denoising.epochs = 6;
    cfg.validate()?;

    cmd_generate(&cfg, GenerateArgs::default())?;
    for variant in [TrainVariant::Conditioned, TrainVariant::Plain] {
        let args = TrainArgs {
            variant: Some(variant),
            blocks: Some(2),
            force: true,
            verbose: false,
        };
        let csv = cmd_train(&cfg, args)?;
        println!("trained {} -> {}", variant.name(), csv.display());
        let eval = cmd_eval(
            &cfg,
            EvalArgs {
                variant: Some(variant),
                blocks: Some(2),
                split: SplitChoice::Test,
                noise: Some(NoiseSpec::gaussian(30.0, 99)),
                dump_images: variant == TrainVariant::Conditioned,
                force: true,
            },
        )?;
        println!("evaluated at sigma 30 -> {}", eval.display());
    }
    let files = cmd_report(&ReportArgs {
        runs: vec![cfg.run_dir()],
        out: cfg.run_dir().join("report"),
        force: true,
    })?;
    print!("{}", std::fs::read_to_string(&files.table).unwrap_or_default());
    Ok(())
}
