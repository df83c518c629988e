//! Train the first denoiser of a cascade for a few epochs on small images,
//! with the segmentation network frozen.

use segdenoise::cascade::{ArchConfig, BlockVariant, Cascade};
use segdenoise::data::{generate_sample, Sample};
use segdenoise::noise::NoiseSpec;
use segdenoise::train::{train_stage, Objective, OptimizerConfig, StageSchedule, StageTask, Target, TrainData};
use segdenoise::Result;

fn main() -> Result<()> {
    let samples: Vec<Sample> = (0..72)
        .map(|i| {
            let (clean, label) = generate_sample(32, 4, 7, i).unwrap();
            Sample { index: i, clean, label }
        })
        .collect();
    let (train, val) = samples.split_at(64);
    let noise = NoiseSpec::gaussian(50.0, 3);
    let mut cascade = Cascade::build(&ArchConfig::new(4), BlockVariant::Conditioned, 1, 1)?;

    let task = StageTask {
        objective: Objective::Denoise { block: 0 },
        targets: vec![Target::den(0)],
        optimizers: vec![OptimizerConfig::adam(1e-3)],
        clean_input: false,
    };
    let data = TrainData {
        train,
        val,
        noise,
        crop: None,
        classes: 4,
        verbose: true,
    };
    let mut schedule = StageSchedule::denoising();
    schedule.epochs = 15;
    let outcome = train_stage(&mut cascade, &task, &data, &schedule, 42)?;
    let sigma2 = (50.0f64 / 255.0).powi(2);
    println!(
        "validation mse {:.5} -> {:.5} (noise variance {sigma2:.5}), best epoch {}",
        outcome.initial_val, outcome.best_val, outcome.best_epoch
    );
    Ok(())
}
