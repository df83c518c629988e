//! Generate the labelled shape dataset, split it and reload it from the
//! manifests. Pass an output directory or a temporary one is used.

use segdenoise::data::{class_names, generate_dataset, split_dataset, DatasetManifest};
use segdenoise::Result;

fn main() -> Result<()> {
    let tmp;
    let root = match std::env::args().nth(1) {
        Some(p) => std::path::PathBuf::from(p),
        None => {
            tmp = std::env::temp_dir().join(format!("segdenoise-dataset-{}", std::process::id()));
            tmp.clone()
        }
    };
    let all = generate_dataset(40, 64, 4, 7, &root)?;
    let (train, test) = split_dataset(&all, 0.8, 7)?;
    train.write(root.join("train.manifest"))?;
    test.write(root.join("test.manifest"))?;
    println!("wrote {} samples under {}", all.len(), root.display());

    let reloaded = DatasetManifest::read(root.join("train.manifest"))?.load()?;
    let names = class_names(4);
    let mut counts = [0usize; 4];
    for s in &reloaded.samples {
        for &l in s.label.data() {
            counts[l as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    for (name, c) in names.iter().zip(counts) {
        println!("{name:<12} {:>5.1}%", 100.0 * c as f64 / total as f64);
    }
    println!("train {} / test {}", train.len(), test.len());
    Ok(())
}
