use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cascade::ArchConfig;
use crate::error::{config_err, Error, Result};
use crate::noise::NoiseSpec;
use crate::train::{StageSchedule, TrainSettings, TrainVariant};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "SEGDENOISE_OUTPUT_ROOT";

/// One experiment, read from a TOML file. Every section is optional and
/// falls back to the defaults below; unknown keys are rejected.
///
/// ```toml
/// name = "sigma50"
/// seed = 1234
/// output_dir = "runs"
///
/// [dataset]
/// size = 64
/// count = 320
/// classes = 4
/// seed = 7
/// split_fraction = 0.8
///
/// [noise]
/// kind = "gaussian"
/// sigma = 50.0
/// seed = 1234
///
/// [model]
/// blocks = 3
/// variant = "conditioned"   # plain | img-condition | gt-condition | joint
/// seg_widths = [16, 32, 64]
/// den_width = 16
/// sft_branch_width = 16
/// sft_head_kernel = 1
/// residual = true
///
/// [training]
/// crop = 32                # 0 = full images
/// val_fraction = 0.125
///
/// [training.segmentation]
/// epochs = 40
/// batch_size = 8
/// patience = 8
/// min_delta = 1e-4
/// optimizer = { kind = "sgd", lr = 0.05, momentum = 0.9 }
///
/// [training.denoising]
/// epochs = 60
/// batch_size = 8
/// patience = 8
/// optimizer = { kind = "adam", lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8 }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub noise: NoiseSpec,
    pub model: ModelSection,
    pub training: TrainingSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub size: usize,
    /// Total samples before the train/test split.
    pub count: usize,
    pub classes: usize,
    pub seed: u64,
    /// Share of samples that go to the train split.
    pub split_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub blocks: usize,
    pub variant: TrainVariant,
    pub seg_widths: [usize; 3],
    pub den_width: usize,
    pub sft_branch_width: usize,
    pub sft_head_kernel: usize,
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    /// Square crop for training batches; 0 trains on full images.
    pub crop: usize,
    pub val_fraction: f64,
    pub segmentation: StageSchedule,
    pub denoising: StageSchedule,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "default".into(),
            seed: 1234,
            output_dir: PathBuf::from("runs"),
            dataset: DatasetSection::default(),
            noise: NoiseSpec::gaussian(50.0, 1234),
            model: ModelSection::default(),
            training: TrainingSection::default(),
        }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            size: 64,
            count: 320,
            classes: 4,
            seed: 7,
            split_fraction: 0.8,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let arch = ArchConfig::new(4);
        ModelSection {
            blocks: 3,
            variant: TrainVariant::Conditioned,
            seg_widths: arch.seg_widths,
            den_width: arch.den_width,
            sft_branch_width: arch.sft_branch_width,
            sft_head_kernel: arch.sft_head_kernel,
            residual: arch.residual,
        }
    }
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            crop: 32,
            val_fraction: 0.125,
            segmentation: StageSchedule::segmentation(),
            denoising: StageSchedule::denoising(),
        }
    }
}

impl ExperimentConfig {
    /// Parse and validate. Errors name the offending field, e.g.
    /// `model.den_width: invalid type: string "x", expected usize`.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            if path == "." || path.is_empty() {
                config_err!("{msg}")
            } else {
                config_err!("{path}: {msg}")
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => config_err!("{}: {m}", path.display()),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| match e {
            Error::Config(m) => config_err!("{name}: {m}"),
            e => e,
        };
        if self.name.is_empty() || self.name.contains(['/', '\\', ',']) {
            return Err(config_err!("name: must be non-empty without `/`, `\\` or `,`"));
        }
        let d = &self.dataset;
        if d.size < 16 || d.size % 4 != 0 {
            return Err(config_err!("dataset.size: {} must be a multiple of 4 and at least 16", d.size));
        }
        if !(2..=crate::data::MAX_CLASSES).contains(&d.classes) {
            return Err(config_err!("dataset.classes: {} outside 2..={}", d.classes, crate::data::MAX_CLASSES));
        }
        if d.count < 4 {
            return Err(config_err!("dataset.count: need at least 4 samples"));
        }
        if !(d.split_fraction > 0.0 && d.split_fraction < 1.0) {
            return Err(config_err!("dataset.split_fraction: must lie in (0, 1)"));
        }
        self.noise.validate().map_err(|e| field("noise", e))?;
        let m = &self.model;
        if m.blocks == 0 {
            return Err(config_err!("model.blocks: must be at least 1"));
        }
        if m.variant == TrainVariant::Joint && m.blocks != 1 {
            return Err(config_err!("model.blocks: the joint variant has exactly one block"));
        }
        if m.seg_widths.contains(&0) || m.den_width == 0 || m.sft_branch_width == 0 {
            return Err(config_err!("model: channel widths must be positive"));
        }
        if m.sft_head_kernel % 2 == 0 {
            return Err(config_err!("model.sft_head_kernel: must be odd"));
        }
        let t = &self.training;
        t.segmentation.validate("training.segmentation")?;
        t.denoising.validate("training.denoising")?;
        if t.crop % 4 != 0 || t.crop > d.size {
            return Err(config_err!(
                "training.crop: {} must be a multiple of 4 no larger than dataset.size",
                t.crop
            ));
        }
        if !(t.val_fraction > 0.0 && t.val_fraction < 1.0) {
            return Err(config_err!("training.val_fraction: must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            classes: self.dataset.classes,
            seg_widths: self.model.seg_widths,
            den_width: self.model.den_width,
            sft_branch_width: self.model.sft_branch_width,
            sft_head_kernel: self.model.sft_head_kernel,
            residual: self.model.residual,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            arch: self.arch(),
            noise: self.noise,
            segmentation: self.training.segmentation,
            denoising: self.training.denoising,
            crop: (self.training.crop > 0).then_some(self.training.crop),
            val_fraction: self.training.val_fraction,
            seed: self.seed,
        }
    }

    /// `$SEGDENOISE_OUTPUT_ROOT` if set and non-empty, else `output_dir`.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    /// `<output root>/<name>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(&self.name)
    }
}
