use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{ArchConfig, Block, BlockVariant, Cascade};
use crate::data::Dataset;
use crate::error::{config_err, usage_err, Result};
use crate::models::SegNetTiny;
use crate::noise::NoiseSpec;
use crate::rng::derive_seed;

use super::checkpoint::{Checkpoint, StageId, StageKind};
use super::stage::{params_of, params_of_mut, train_stage, Objective, StageSchedule, StageTask, Target, TrainData};

const SPLIT_TAG: u64 = 0x5A11;

/// Everything that determines a trained stage, apart from the block count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub arch: ArchConfig,
    pub noise: NoiseSpec,
    pub segmentation: StageSchedule,
    pub denoising: StageSchedule,
    /// Square training crop; `None` trains on full images.
    pub crop: Option<usize>,
    /// Fraction of the training split held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl TrainSettings {
    pub fn new(classes: usize, noise: NoiseSpec, seed: u64) -> Self {
        TrainSettings {
            arch: ArchConfig::new(classes),
            noise,
            segmentation: StageSchedule::segmentation(),
            denoising: StageSchedule::denoising(),
            crop: Some(32),
            val_fraction: 0.125,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.segmentation.validate("segmentation schedule")?;
        self.denoising.validate("denoising schedule")?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(config_err!("val_fraction must lie in (0, 1)"));
        }
        if let Some(c) = self.crop {
            if c < 4 || c % 4 != 0 {
                return Err(config_err!("crop {c} must be a positive multiple of 4"));
            }
        }
        Ok(())
    }

    /// Digest identifying one stage's checkpoint.
    fn stage_digest(&self, variant: TrainVariant, stage: StageId) -> String {
        let mut h = Sha256::new();
        h.update(format!("{self:?}").as_bytes());
        if stage.block > 0 {
            h.update(variant.name().as_bytes());
        }
        h.update(stage.short().as_bytes());
        hex::encode(h.finalize())
    }
}

/// How the cascade is built and trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainVariant {
    /// Segmentation-conditioned blocks trained stage by stage.
    Conditioned,
    /// Denoisers only, no segmentation or SFT.
    Plain,
    /// Denoisers conditioned on their own input image.
    ImgCondition,
    /// Denoisers conditioned on ground truth, followed by one segmentation stage.
    GtCondition,
    /// Segment, denoise, segment, trained end to end on the final cross-entropy.
    Joint,
}

impl TrainVariant {
    pub fn name(self) -> &'static str {
        match self {
            TrainVariant::Conditioned => "conditioned",
            TrainVariant::Plain => "plain",
            TrainVariant::ImgCondition => "img-condition",
            TrainVariant::GtCondition => "gt-condition",
            TrainVariant::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "conditioned" => TrainVariant::Conditioned,
            "plain" => TrainVariant::Plain,
            "img-condition" => TrainVariant::ImgCondition,
            "gt-condition" => TrainVariant::GtCondition,
            "joint" => TrainVariant::Joint,
            _ => return Err(config_err!("unknown variant `{s}`")),
        })
    }

    fn block_variant(self) -> BlockVariant {
        match self {
            TrainVariant::Conditioned | TrainVariant::Joint => BlockVariant::Conditioned,
            TrainVariant::Plain => BlockVariant::Plain,
            TrainVariant::ImgCondition => BlockVariant::ImgCondition,
            TrainVariant::GtCondition => BlockVariant::GtCondition,
        }
    }

    /// Whether the trained cascade reports denoising metrics.
    pub fn reports_denoising(self) -> bool {
        self != TrainVariant::Joint
    }

    pub fn needs_bootstrap(self) -> bool {
        matches!(self, TrainVariant::Conditioned | TrainVariant::GtCondition)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Log stages and epochs to stderr.
    pub verbose: bool,
    /// Retrain stages whose checkpoint came from a different configuration.
    pub force: bool,
}

/// A trained cascade plus the checkpoints that produced it.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub variant: TrainVariant,
    pub cascade: Cascade,
    pub checkpoints: Vec<Checkpoint>,
}

pub fn checkpoint_path(dir: &Path, variant: TrainVariant, stage: StageId) -> PathBuf {
    if stage.block == 0 {
        dir.join("s0.sdbn")
    } else {
        dir.join(format!("{}-{}.sdbn", variant.name(), stage.short()))
    }
}

/// The cascade layout a variant trains, with fresh parameters.
pub fn build_architecture(settings: &TrainSettings, variant: TrainVariant, blocks: usize) -> Result<Cascade> {
    if blocks == 0 {
        return Err(config_err!("block count must be at least 1"));
    }
    let arch = &settings.arch;
    let seed = settings.seed;
    let seg_block = |index: usize| -> Result<Block> {
        Ok(Block::segmentation_only(SegNetTiny::new(arch.seg(), derive_seed(seed, &[index as u64, 1]))?))
    };
    match variant {
        TrainVariant::Joint => {
            if blocks != 1 {
                return Err(config_err!("the joint variant has exactly one denoising block"));
            }
            Cascade::new(vec![Block::build(arch, 0, BlockVariant::Conditioned, seed)?, seg_block(1)?])
        }
        TrainVariant::GtCondition => {
            let mut v: Vec<Block> = (0..blocks)
                .map(|i| Block::build(arch, i, BlockVariant::GtCondition, seed))
                .collect::<Result<_>>()?;
            v.push(seg_block(blocks)?);
            Cascade::new(v)
        }
        _ => Cascade::build(arch, variant.block_variant(), blocks, seed),
    }
}

struct Ctx<'a> {
    settings: &'a TrainSettings,
    variant: TrainVariant,
    dir: &'a Path,
    data: TrainData<'a>,
    force: bool,
}

impl Ctx<'_> {
    fn schedule(&self, kind: StageKind) -> &StageSchedule {
        match kind {
            StageKind::Segmentation => &self.settings.segmentation,
            StageKind::Denoising => &self.settings.denoising,
        }
    }

    /// Load the stage from disk if a checkpoint with a matching digest
    /// exists, otherwise train it and save it.
    fn stage(&self, cascade: &mut Cascade, stage: StageId, task: StageTask) -> Result<Checkpoint> {
        let path = checkpoint_path(self.dir, self.variant, stage);
        let digest = self.settings.stage_digest(self.variant, stage);
        let target = task.targets[0];
        if path.exists() {
            let ck = Checkpoint::load(&path)?;
            if ck.config_digest == digest {
                ck.restore_into(params_of_mut(cascade, target).expect("target exists"))?;
                return Ok(ck);
            }
            if !self.force {
                return Err(usage_err!(
                    "{} was trained with a different configuration; rerun with --force to retrain",
                    path.display()
                ));
            }
        }
        if self.data.verbose {
            eprintln!("training {} ({})", stage.short(), self.variant.name());
        }
        let seed = derive_seed(self.settings.seed, &[stage.kind as u64, stage.block as u64]);
        let outcome = train_stage(cascade, &task, &self.data, self.schedule(stage.kind), seed)?;
        let ck = Checkpoint {
            stage,
            label: self.variant.name().to_string(),
            config_digest: digest,
            seed,
            metrics: outcome.metrics(),
            params: params_of(cascade, target).expect("target exists").clone(),
        };
        ck.save(&path)?;
        Ok(ck)
    }

    fn seg_task(&self, block: usize, clean_input: bool) -> StageTask {
        StageTask {
            objective: Objective::Segment { block },
            targets: vec![Target::seg(block)],
            optimizers: vec![self.settings.segmentation.optimizer],
            clean_input,
        }
    }

    fn den_task(&self, block: usize) -> StageTask {
        StageTask {
            objective: Objective::Denoise { block },
            targets: vec![Target::den(block)],
            optimizers: vec![self.settings.denoising.optimizer],
            clean_input: false,
        }
    }

    /// Segmentation network pretrained on clean images.
    fn bootstrap(&self) -> Result<(SegNetTiny, Checkpoint)> {
        let seg = SegNetTiny::new(self.settings.arch.seg(), derive_seed(self.settings.seed, &[0xB007]))?;
        let mut c = Cascade::new(vec![Block::segmentation_only(seg)])?;
        let ck = self.stage(&mut c, StageId::seg(0), self.seg_task(0, true))?;
        let seg = c.blocks.pop().and_then(|b| b.seg).expect("segmentation block");
        Ok((seg, ck))
    }
}

/// Split a training set into the part used for gradient steps and the
/// validation hold-out.
pub fn holdout(settings: &TrainSettings, train: &Dataset) -> Result<(Dataset, Dataset)> {
    train.split_off(1.0 - settings.val_fraction, derive_seed(settings.seed, &[SPLIT_TAG]))
}

/// Train `variant` with `blocks` blocks, reusing any compatible checkpoints
/// already in `dir`. Each stage is saved as soon as it finishes, so a failed
/// run keeps its completed prefix.
///
/// For the conditioned variant the order is: clean bootstrap `S0`, then
/// `S1, D1, S2, D2, ...`, each `Si` starting from `S(i-1)`. The ground-truth
/// variant trains `D1..Dn` and then one segmentation network on `Dn`'s
/// output, starting from `S0`.
pub fn train_progressive(
    settings: &TrainSettings,
    variant: TrainVariant,
    blocks: usize,
    train: &Dataset,
    dir: &Path,
    opts: RunOptions,
) -> Result<TrainRun> {
    settings.validate()?;
    if variant == TrainVariant::Joint {
        if blocks != 1 {
            return Err(config_err!("the joint variant has exactly one denoising block"));
        }
        return train_joint_variant(settings, train, dir, opts);
    }
    if train.n_classes != settings.arch.classes {
        return Err(config_err!(
            "dataset has {} classes but the model expects {}",
            train.n_classes,
            settings.arch.classes
        ));
    }
    let (fit, val) = holdout(settings, train)?;
    let ctx = Ctx {
        settings,
        variant,
        dir,
        data: TrainData {
            train: &fit.samples,
            val: &val.samples,
            noise: settings.noise,
            crop: settings.crop,
            classes: settings.arch.classes,
            verbose: opts.verbose,
        },
        force: opts.force,
    };
    let mut cascade = build_architecture(settings, variant, blocks)?;
    let mut checkpoints = Vec::new();
    let bootstrap = if variant.needs_bootstrap() {
        let (seg, ck) = ctx.bootstrap()?;
        checkpoints.push(ck);
        Some(seg)
    } else {
        None
    };

    match variant {
        TrainVariant::Conditioned => {
            let mut prev = bootstrap.expect("bootstrap trained").params;
            for i in 0..blocks {
                let seg = cascade.blocks[i].seg.as_mut().expect("conditioned block");
                seg.params = prev.clone();
                // the later stages only see blocks 1..=i
                let mut prefix = Cascade::new(cascade.blocks[..=i].to_vec())?;
                checkpoints.push(ctx.stage(&mut prefix, StageId::seg(i as u32 + 1), ctx.seg_task(i, false))?);
                checkpoints.push(ctx.stage(&mut prefix, StageId::den(i as u32 + 1), ctx.den_task(i))?);
                cascade.blocks[i] = prefix.blocks.pop().expect("block i");
                prev = cascade.blocks[i].seg.as_ref().expect("conditioned block").params.clone();
            }
        }
        TrainVariant::Plain | TrainVariant::ImgCondition | TrainVariant::GtCondition => {
            for i in 0..blocks {
                let mut prefix = Cascade::new(cascade.blocks[..=i].to_vec())?;
                checkpoints.push(ctx.stage(&mut prefix, StageId::den(i as u32 + 1), ctx.den_task(i))?);
                cascade.blocks[i] = prefix.blocks.pop().expect("block i");
            }
            if variant == TrainVariant::GtCondition {
                let seg = cascade.blocks[blocks].seg.as_mut().expect("segmentation tail");
                seg.params = bootstrap.expect("bootstrap trained").params;
                checkpoints.push(ctx.stage(
                    &mut cascade,
                    StageId::seg(blocks as u32 + 1),
                    ctx.seg_task(blocks, false),
                )?);
            }
        }
        TrainVariant::Joint => unreachable!("handled above"),
    }
    Ok(TrainRun {
        variant,
        cascade,
        checkpoints,
    })
}

/// `S1 -> D1 -> S2` from fresh parameters, all three networks updated
/// together on the cross-entropy of `S2` alone.
pub fn train_joint_variant(settings: &TrainSettings, train: &Dataset, dir: &Path, opts: RunOptions) -> Result<TrainRun> {
    settings.validate()?;
    let variant = TrainVariant::Joint;
    let mut cascade = build_architecture(settings, variant, 1)?;
    let stages = [StageId::seg(1), StageId::den(1), StageId::seg(2)];
    let targets = [Target::seg(0), Target::den(0), Target::seg(1)];
    let digest = |s: StageId| settings.stage_digest(variant, s);
    let paths: Vec<PathBuf> = stages.iter().map(|&s| checkpoint_path(dir, variant, s)).collect();

    let existing: Vec<Checkpoint> = paths
        .iter()
        .filter(|p| p.exists())
        .map(Checkpoint::load)
        .collect::<Result<_>>()?;
    let current = existing.len() == paths.len()
        && existing.iter().zip(&stages).all(|(ck, &s)| ck.config_digest == digest(s));
    if current {
        for (ck, &t) in existing.iter().zip(&targets) {
            ck.restore_into(params_of_mut(&mut cascade, t).expect("target exists"))?;
        }
        return Ok(TrainRun {
            variant,
            cascade,
            checkpoints: existing,
        });
    }
    if !existing.is_empty() && !opts.force {
        return Err(usage_err!(
            "joint checkpoints in {} are incomplete or from a different configuration; rerun with --force",
            dir.display()
        ));
    }

    let (fit, val) = holdout(settings, train)?;
    let data = TrainData {
        train: &fit.samples,
        val: &val.samples,
        noise: settings.noise,
        crop: settings.crop,
        classes: settings.arch.classes,
        verbose: opts.verbose,
    };
    let task = StageTask {
        objective: Objective::Segment { block: 1 },
        targets: targets.to_vec(),
        optimizers: vec![
            settings.segmentation.optimizer,
            settings.denoising.optimizer,
            settings.segmentation.optimizer,
        ],
        clean_input: false,
    };
    if opts.verbose {
        eprintln!("training joint s1-d1-s2");
    }
    let seed = derive_seed(settings.seed, &[0x1017]);
    let outcome = train_stage(&mut cascade, &task, &data, &settings.segmentation, seed)?;
    let mut checkpoints = Vec::new();
    for ((p, &s), &t) in paths.iter().zip(&stages).zip(&targets) {
        let ck = Checkpoint {
            stage: s,
            label: variant.name().to_string(),
            config_digest: digest(s),
            seed,
            metrics: outcome.metrics(),
            params: params_of(&cascade, t).expect("target exists").clone(),
        };
        ck.save(p)?;
        checkpoints.push(ck);
    }
    Ok(TrainRun {
        variant,
        cascade,
        checkpoints,
    })
}

/// Rebuild a trained cascade from the checkpoints in `dir`.
pub fn load_trained(settings: &TrainSettings, variant: TrainVariant, blocks: usize, dir: &Path) -> Result<Cascade> {
    let mut cascade = build_architecture(settings, variant, blocks)?;
    for block in 0..cascade.len() {
        for seg in [true, false] {
            let t = Target { block, seg };
            let Some(params) = params_of_mut(&mut cascade, t) else { continue };
            let stage = if seg {
                StageId::seg(block as u32 + 1)
            } else {
                StageId::den(block as u32 + 1)
            };
            let path = checkpoint_path(dir, variant, stage);
            if !path.exists() {
                return Err(usage_err!("missing checkpoint {}", path.display()));
            }
            Checkpoint::load(&path)?.restore_into(params)?;
        }
    }
    Ok(cascade)
}

/// The clean-image segmentation bootstrap from `dir`.
pub fn load_bootstrap(settings: &TrainSettings, dir: &Path) -> Result<SegNetTiny> {
    let mut seg = SegNetTiny::new(settings.arch.seg(), 0)?;
    Checkpoint::load(dir.join("s0.sdbn"))?.restore_into(&mut seg.params)?;
    Ok(seg)
}
