use std::path::{Path, PathBuf};

use crate::data::{generate_dataset, split_dataset, Dataset, DatasetManifest};
use crate::error::{config_err, usage_err, Error, Result};
use crate::metrics::{csv_rows, CSV_HEADER};
use crate::noise::NoiseSpec;
use crate::train::{evaluate, load_trained, train_progressive, EvalOptions, RunOptions, TrainVariant};

use super::config::ExperimentConfig;

/// Where one experiment keeps its files, under `<output root>/<name>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        RunLayout { root: cfg.run_dir() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self, split: &str) -> PathBuf {
        self.data_dir().join(format!("{split}.manifest"))
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn dump_dir(&self, tag: &str, split: &str) -> PathBuf {
        self.root.join("dump").join(tag).join(split)
    }
}

/// `conditioned-x3`, `joint-x1`, ...
pub fn model_tag(variant: TrainVariant, blocks: usize) -> String {
    format!("{}-x{blocks}", variant.name())
}

/// Experiment id in metrics CSVs: `name/model tag/split/noise label`.
pub fn experiment_id(cfg: &ExperimentConfig, tag: &str, split: &str, noise: &NoiseSpec) -> String {
    format!("{}/{tag}/{split}/{}", cfg.name, noise.label())
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(usage_err!("{} already exists; pass --force to overwrite", path.display()));
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GenerateArgs {
    pub force: bool,
    /// Replaces `dataset.seed`.
    pub seed: Option<u64>,
}

/// Generate the synthetic dataset and write `train.manifest` and
/// `test.manifest`. Returns the two manifest paths.
pub fn cmd_generate(cfg: &ExperimentConfig, args: GenerateArgs) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let layout = RunLayout::new(cfg);
    let (train_path, test_path) = (layout.manifest("train"), layout.manifest("test"));
    refuse_overwrite(&train_path, args.force)?;
    refuse_overwrite(&test_path, args.force)?;
    let d = &cfg.dataset;
    let seed = args.seed.unwrap_or(d.seed);
    let all = generate_dataset(d.count, d.size, d.classes, seed, layout.data_dir())?;
    let (train, test) = split_dataset(&all, d.split_fraction, seed)?;
    train.write(&train_path)?;
    test.write(&test_path)?;
    Ok((train_path, test_path))
}

fn load_split(cfg: &ExperimentConfig, layout: &RunLayout, split: &str) -> Result<Dataset> {
    let path = layout.manifest(split);
    if !path.exists() {
        return Err(usage_err!("{} not found; run `generate` first", path.display()));
    }
    let ds = DatasetManifest::read(&path)?.load()?;
    if ds.n_classes != cfg.dataset.classes {
        return Err(config_err!(
            "dataset.classes: config says {} but {} has {}",
            cfg.dataset.classes,
            path.display(),
            ds.n_classes
        ));
    }
    Ok(ds)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainArgs {
    /// Replaces `model.variant`.
    pub variant: Option<TrainVariant>,
    /// Replaces `model.blocks`.
    pub blocks: Option<usize>,
    pub force: bool,
    pub verbose: bool,
}

fn resolve(cfg: &ExperimentConfig, variant: Option<TrainVariant>, blocks: Option<usize>) -> Result<(TrainVariant, usize)> {
    let variant = variant.unwrap_or(cfg.model.variant);
    let blocks = match blocks {
        Some(b) => b,
        None if variant == TrainVariant::Joint => 1,
        None => cfg.model.blocks,
    };
    if blocks == 0 {
        return Err(config_err!("blocks: must be at least 1"));
    }
    if variant == TrainVariant::Joint && blocks != 1 {
        return Err(config_err!("blocks: the joint variant has exactly one block"));
    }
    Ok((variant, blocks))
}

/// Train (or resume) the configured cascade, then evaluate it on the test
/// split under the training noise. Returns the metrics CSV path.
pub fn cmd_train(cfg: &ExperimentConfig, args: TrainArgs) -> Result<PathBuf> {
    cfg.validate()?;
    let (variant, blocks) = resolve(cfg, args.variant, args.blocks)?;
    let layout = RunLayout::new(cfg);
    let tag = model_tag(variant, blocks);
    let out = layout.metrics_dir().join(format!("train-{tag}.csv"));
    refuse_overwrite(&out, args.force)?;
    let train = load_split(cfg, &layout, "train")?;
    let test = load_split(cfg, &layout, "test")?;
    let opts = RunOptions {
        verbose: args.verbose,
        force: args.force,
    };
    let run = train_progressive(&cfg.train_settings(), variant, blocks, &train, &layout.checkpoints(), opts)?;
    let eval_opts = EvalOptions {
        denoising: variant.reports_denoising(),
        ..Default::default()
    };
    let report = evaluate(&run.cascade, &test.samples, Some(&cfg.noise), cfg.dataset.classes, &eval_opts)?;
    let id = experiment_id(cfg, &tag, "test", &cfg.noise);
    write_file(&out, &format!("{CSV_HEADER}\n{}", csv_rows(&id, &report.records())))?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SplitChoice {
    Train,
    Test,
    #[default]
    Both,
}

impl SplitChoice {
    fn names(self) -> &'static [&'static str] {
        match self {
            SplitChoice::Train => &["train"],
            SplitChoice::Test => &["test"],
            SplitChoice::Both => &["train", "test"],
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalArgs {
    pub variant: Option<TrainVariant>,
    pub blocks: Option<usize>,
    pub split: SplitChoice,
    /// Evaluate under different noise than the model was trained with.
    pub noise: Option<NoiseSpec>,
    pub dump_images: bool,
    pub force: bool,
}

/// Parse `gaussian:<sigma>` or `poisson:<peak>`; the seed comes from `seed`.
pub fn parse_noise(s: &str, seed: u64) -> Result<NoiseSpec> {
    let (kind, value) = s
        .split_once(':')
        .ok_or_else(|| config_err!("noise `{s}`: expected gaussian:<sigma> or poisson:<peak>"))?;
    let v: f64 = value
        .parse()
        .map_err(|_| config_err!("noise `{s}`: `{value}` is not a number"))?;
    let spec = match kind {
        "gaussian" => NoiseSpec::gaussian(v, seed),
        "poisson" => NoiseSpec::poisson(v, seed),
        _ => return Err(config_err!("noise `{s}`: unknown kind `{kind}`")),
    };
    spec.validate()?;
    Ok(spec)
}

/// Evaluate trained checkpoints on one or both splits. Each split becomes a
/// separately labelled section of the same CSV. Returns the CSV path.
pub fn cmd_eval(cfg: &ExperimentConfig, args: EvalArgs) -> Result<PathBuf> {
    cfg.validate()?;
    let (variant, blocks) = resolve(cfg, args.variant, args.blocks)?;
    let noise = args.noise.unwrap_or(cfg.noise);
    noise.validate()?;
    let layout = RunLayout::new(cfg);
    let tag = model_tag(variant, blocks);
    let out = layout.metrics_dir().join(format!("eval-{tag}-{}.csv", noise.label()));
    refuse_overwrite(&out, args.force)?;
    let cascade = load_trained(&cfg.train_settings(), variant, blocks, &layout.checkpoints())?;
    let mut csv = format!("{CSV_HEADER}\n");
    for &split in args.split.names() {
        let ds = load_split(cfg, &layout, split)?;
        let dump = args.dump_images.then(|| layout.dump_dir(&tag, split));
        let opts = EvalOptions {
            denoising: variant.reports_denoising(),
            dump_dir: dump.as_deref(),
            ..Default::default()
        };
        let report = evaluate(&cascade, &ds.samples, Some(&noise), cfg.dataset.classes, &opts)?;
        csv.push_str(&csv_rows(&experiment_id(cfg, &tag, split, &noise), &report.records()));
    }
    write_file(&out, &csv)?;
    Ok(out)
}
