//! Modulate features with a spatial feature transform and run one
//! segmentation-conditioned denoising block.

use segdenoise::cascade::{ArchConfig, BlockVariant};
use segdenoise::models::{Sdb, SftLayer};
use segdenoise::{Result, Tape, Tensor};

fn main() -> Result<()> {
    let classes = 4;
    let features = Tensor::from_fn(&[1, 8, 16, 16], |i| (i as f64 * 0.37).sin());
    // condition: class 0 on the left half, class 2 on the right half
    let condition = Tensor::from_fn(&[1, classes, 16, 16], |i| {
        let c = i / 256;
        let x = i % 16;
        f64::from(u8::from((x < 8 && c == 0) || (x >= 8 && c == 2)))
    });

    let sft = SftLayer::new(classes, 8, 16, 3, 1);
    let mut tape = Tape::new();
    let p = sft.params.bind(&mut tape, false);
    let f = tape.constant(features.clone());
    let c = tape.constant(condition);
    let (gamma, beta) = sft.modulation(&mut tape, &p, c)?;
    let out = sft.forward(&mut tape, &p, f, c)?;
    let g = tape.value(gamma).data();
    println!("gamma left/right at row 0, channel 0: {:.4} / {:.4}", g[0], g[15]);
    println!("beta  left/right at row 0, channel 0: {:.4} / {:.4}", tape.value(beta).data()[0], tape.value(beta).data()[15]);
    println!("output differs from input by {:.4}", tape.value(out).max_abs_diff(&features));

    let arch = ArchConfig::new(classes);
    let sdb = Sdb::new(arch.seg(), arch.den(0, BlockVariant::Conditioned), 2)?;
    let mut tape = Tape::new();
    let bound = sdb.bind(&mut tape, false, false);
    let y = tape.constant(Tensor::from_fn(&[2, 3, 32, 32], |i| 0.5 + 0.3 * (i as f64 * 0.11).cos()));
    let (probs, denoised) = sdb.forward(&mut tape, &bound, y, None)?;
    println!("probabilities {:?}, denoised {:?}", tape.value(probs).shape(), tape.value(denoised).shape());
    println!(
        "parameters: segmentation {}, denoiser {}",
        sdb.seg.params.scalar_count(),
        sdb.den.params.scalar_count()
    );
    Ok(())
}
