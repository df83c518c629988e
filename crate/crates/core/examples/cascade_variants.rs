//! Build cascades of each variant, run them on a noisy image and compare
//! sizes and outputs per unit.

use segdenoise::cascade::{ArchConfig, BlockVariant, Cascade};
use segdenoise::data::{generate_sample, images_to_tensor};
use segdenoise::noise::add_gaussian_noise;
use segdenoise::Result;

fn main() -> Result<()> {
    let classes = 4;
    let (clean, label) = generate_sample(32, classes, 7, 0)?;
    let noisy = add_gaussian_noise(&clean, 50.0, 1)?;
    let y = images_to_tensor([&noisy])?;
    let gt = segdenoise::data::probs_to_tensor([&label.one_hot(classes)])?;
    let arch = ArchConfig::new(classes);

    for variant in [
        BlockVariant::Conditioned,
        BlockVariant::Plain,
        BlockVariant::ImgCondition,
        BlockVariant::GtCondition,
    ] {
        let cascade = Cascade::build(&arch, variant, 3, 11)?;
        let params: usize = cascade
            .blocks
            .iter()
            .flat_map(|b| [b.seg.as_ref().map(|s| s.params.scalar_count()), b.den.as_ref().map(|d| d.params.scalar_count())])
            .flatten()
            .sum();
        let out = cascade.forward(&y, Some(&gt), None)?;
        let units: Vec<String> = out
            .denoised
            .iter()
            .map(|d| d.as_ref().map_or("-".into(), |d| format!("{:.4}", d.max_abs_diff(&y))))
            .collect();
        println!("{:<14} params {params:>7}  |x_i - y| per unit: {}", variant.name(), units.join(" "));
    }

    // running only the first k units reproduces the prefix of a full run
    let cascade = Cascade::build(&arch, BlockVariant::Conditioned, 3, 11)?;
    let full = cascade.forward(&y, None, None)?;
    let two = cascade.forward(&y, None, Some(2))?;
    assert_eq!(two.denoised[..], full.denoised[..2]);
    println!("prefix of 2 units matches the full cascade");
    Ok(())
}
