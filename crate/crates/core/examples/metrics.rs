//! Score denoised images and segmentation maps, then format the rows the
//! harness writes to CSV.

use segdenoise::data::{generate_sample, LabelMap};
use segdenoise::metrics::{csv_rows, psnr, ssim, ConfusionMatrix, MetricsRecord};
use segdenoise::noise::add_gaussian_noise;
use segdenoise::Result;

fn main() -> Result<()> {
    let (clean, label) = generate_sample(64, 4, 7, 1)?;
    let mut record = MetricsRecord {
        unit_index: 1,
        sample_count: 1,
        ..Default::default()
    };
    for sigma in [10.0, 30.0, 50.0] {
        let noisy = add_gaussian_noise(&clean, sigma, 5)?.clamped();
        println!("sigma {sigma:>4}: psnr {:.3} dB, ssim {:.4}", psnr(&clean, &noisy)?, ssim(&clean, &noisy)?);
        record.psnr = Some(psnr(&clean, &noisy)?);
        record.ssim = Some(ssim(&clean, &noisy)?);
    }

    // a prediction that gets every 5th pixel wrong
    let pred: Vec<u8> = label
        .data()
        .iter()
        .enumerate()
        .map(|(i, &l)| if i % 5 == 0 { (l + 1) % 4 } else { l })
        .collect();
    let pred = LabelMap::new(64, 64, pred)?;
    let mut cm = ConfusionMatrix::new(4);
    cm.accumulate(&pred, &label)?;
    println!(
        "miou {:.4}, pixel accuracy {:.4}, mean accuracy {:.4}",
        cm.miou()?,
        cm.pixel_accuracy()?,
        cm.mean_accuracy()?
    );
    record.set_segmentation(&cm)?;
    print!("{}", csv_rows("demo/test", &[record]));
    Ok(())
}
