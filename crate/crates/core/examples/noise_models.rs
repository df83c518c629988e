//! Corrupt a synthetic image with Gaussian and Poisson noise and report the
//! residual statistics and PSNR.

use segdenoise::data::generate_sample;
use segdenoise::metrics::psnr;
use segdenoise::noise::{corrupt, NoiseSpec};
use segdenoise::Result;

fn main() -> Result<()> {
    let (clean, _) = generate_sample(128, 4, 7, 0)?;
    let specs = [
        NoiseSpec::gaussian(10.0, 1),
        NoiseSpec::gaussian(25.0, 1),
        NoiseSpec::gaussian(50.0, 1),
        NoiseSpec::poisson(255.0, 1),
        NoiseSpec::poisson(30.0, 1),
    ];
    println!("{:<12} {:>10} {:>10} {:>9}", "noise", "mean", "std", "psnr");
    for spec in specs {
        let noisy = corrupt(&clean, &spec, 0)?;
        let r: Vec<f64> = noisy.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        println!(
            "{:<12} {:>+10.5} {:>10.5} {:>9.3}",
            spec.label(),
            mean,
            std,
            psnr(&clean, &noisy.clamped())?
        );
    }
    // same spec and sample index always give the same draw
    let spec = NoiseSpec::gaussian(30.0, 9);
    assert_eq!(corrupt(&clean, &spec, 3)?, corrupt(&clean, &spec, 3)?);
    Ok(())
}
