//! Plain-text dataset index.
//!
//! ```text
//! # segdenoise manifest v1
//! split train
//! seed 7
//! size 64
//! classes 4
//! names background circle rectangle triangle
//! sample 0 clean/00000.png labels/00000.png
//! sample 3 clean/00003.png labels/00003.png
//! ```
//!
//! Header keys appear once, in this order, before any `sample` line. Sample
//! paths are relative to the directory holding the manifest. Lines starting
//! with `#` are comments.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{data_err, usage_err, Error, Result};
use crate::rng::stream;

use super::{load_image, load_label, Image, LabelMap};

pub const MANIFEST_HEADER: &str = "# segdenoise manifest v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: u64,
    pub clean: PathBuf,
    pub label: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: String,
    pub seed: u64,
    pub size: usize,
    pub n_classes: usize,
    pub class_names: Vec<String>,
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MANIFEST_HEADER}");
        let _ = writeln!(s, "split {}", self.split);
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "size {}", self.size);
        let _ = writeln!(s, "classes {}", self.n_classes);
        let _ = writeln!(s, "names {}", self.class_names.join(" "));
        for e in &self.entries {
            let _ = writeln!(
                s,
                "sample {} {} {}",
                e.index,
                e.clean.display(),
                e.label.display()
            );
        }
        s
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        let mut header = |key: &str| -> Result<String> {
            let (no, line) = lines
                .next()
                .ok_or_else(|| data_err!("manifest ends before `{key}`"))?;
            match line.split_once(' ') {
                Some((k, v)) if k == key => Ok(v.trim().to_string()),
                _ => Err(data_err!("manifest line {}: expected `{key} ...`", no + 1)),
            }
        };
        let num = |v: String, key: &str| -> Result<u64> {
            v.parse().map_err(|_| data_err!("manifest `{key}` is not an integer: {v}"))
        };
        let split = header("split")?;
        let seed = num(header("seed")?, "seed")?;
        let size = num(header("size")?, "size")? as usize;
        let n_classes = num(header("classes")?, "classes")? as usize;
        let class_names: Vec<String> = header("names")?.split_whitespace().map(String::from).collect();
        if class_names.len() != n_classes {
            return Err(data_err!(
                "manifest names {} classes but declares {n_classes}",
                class_names.len()
            ));
        }
        let mut entries = Vec::new();
        for (no, line) in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts[..] {
                ["sample", idx, clean, label] => entries.push(ManifestEntry {
                    index: idx
                        .parse()
                        .map_err(|_| data_err!("manifest line {}: bad index {idx}", no + 1))?,
                    clean: clean.into(),
                    label: label.into(),
                }),
                _ => return Err(data_err!("manifest line {}: malformed sample `{line}`", no + 1)),
            }
        }
        let unique: BTreeSet<u64> = entries.iter().map(|e| e.index).collect();
        if unique.len() != entries.len() {
            return Err(data_err!("manifest has duplicate sample indices"));
        }
        Ok(DatasetManifest {
            split,
            seed,
            size,
            n_classes,
            class_names,
            root: root.into(),
            entries,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load every sample into memory, validating labels.
    pub fn load(&self) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let clean = load_image(self.root.join(&e.clean))?;
            let label = load_label(self.root.join(&e.label))?;
            if (clean.height(), clean.width()) != (label.height(), label.width()) {
                return Err(data_err!("sample {}: image and label sizes differ", e.index));
            }
            if let Some(bad) = label
                .data()
                .iter()
                .find(|&&l| l != crate::IGNORE_LABEL && l as usize >= self.n_classes)
            {
                return Err(data_err!(
                    "sample {}: label {bad} outside 0..{}",
                    e.index,
                    self.n_classes
                ));
            }
            samples.push(Sample {
                index: e.index,
                clean,
                label,
            });
        }
        Ok(Dataset {
            split: self.split.clone(),
            n_classes: self.n_classes,
            samples,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: u64,
    pub clean: Image,
    pub label: LabelMap,
}

/// An in-memory split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub n_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Deterministic partition of the samples, e.g. for a validation hold-out.
    pub fn split_off(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let (a, b) = split_indices(self.samples.len(), fraction, seed)?;
        let pick = |idx: &[usize], name: &str| Dataset {
            split: name.to_string(),
            n_classes: self.n_classes,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        };
        Ok((pick(&a, &self.split), pick(&b, &format!("{}-holdout", self.split))))
    }
}

fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(usage_err!("split fraction {fraction} outside (0, 1)"));
    }
    let first = (n as f64 * fraction).round() as usize;
    if first == 0 || first == n {
        return Err(usage_err!(
            "splitting {n} samples at {fraction} leaves one side empty"
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[0x5B11_7000]));
    let mut a = order[..first].to_vec();
    let mut b = order[first..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

/// Shuffle-split a manifest into `train` and `test` manifests.
pub fn split_dataset(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let (a, b) = split_indices(manifest.entries.len(), train_fraction, seed)?;
    let pick = |idx: &[usize], split: &str| DatasetManifest {
        split: split.to_string(),
        entries: idx.iter().map(|&i| manifest.entries[i].clone()).collect(),
        ..manifest.clone()
    };
    Ok((pick(&a, "train"), pick(&b, "test")))
}
