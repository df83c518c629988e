use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::Cascade;
use crate::data::{images_to_tensor, labels_to_vec, probs_to_tensor, Image, LabelMap, Sample};
use crate::error::{config_err, usage_err, Result};
use crate::models::ParamSet;
use crate::noise::{corrupt, NoiseSpec};
use crate::rng::{derive_seed, stream};
use crate::tensor::{Tape, Tensor, Var};

use super::optim::{OptimizerConfig, OptimizerState};

const ORDER_TAG: u64 = 0x0D3E;
const CROP_TAG: u64 = 0xC409;
const VAL_TAG: u64 = 0x7A1D;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply the rate by `gamma` every `every` epochs.
    Step { every: usize, gamma: f64 },
}

impl LrSchedule {
    /// Multiplier for 1-based `epoch`.
    pub fn factor(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Step { every, gamma } => gamma.powi(((epoch - 1) / every) as i32),
        }
    }
}

fn default_min_delta() -> f64 {
    1e-4
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a validation improvement of `min_delta`.
    pub patience: usize,
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    pub optimizer: OptimizerConfig,
}

impl StageSchedule {
    pub fn segmentation() -> Self {
        StageSchedule {
            epochs: 40,
            batch_size: 8,
            patience: 8,
            min_delta: default_min_delta(),
            lr_schedule: LrSchedule::Constant,
            optimizer: OptimizerConfig::sgd(0.05, 0.9),
        }
    }

    pub fn denoising() -> Self {
        StageSchedule {
            epochs: 60,
            optimizer: OptimizerConfig::adam(1e-3),
            ..Self::segmentation()
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(config_err!("{what}: epochs, batch_size and patience must be positive"));
        }
        if !(self.min_delta >= 0.0) {
            return Err(config_err!("{what}: min_delta must be non-negative"));
        }
        if let LrSchedule::Step { every, gamma } = self.lr_schedule {
            if every == 0 || !(gamma > 0.0) {
                return Err(config_err!("{what}: step schedule needs every > 0 and gamma > 0"));
            }
        }
        self.optimizer.validate()
    }
}

/// A network inside a cascade: 0-based block and whether it is the
/// segmentation network (otherwise the denoiser).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Target {
    pub block: usize,
    pub seg: bool,
}

impl Target {
    pub fn seg(block: usize) -> Self {
        Target { block, seg: true }
    }

    pub fn den(block: usize) -> Self {
        Target { block, seg: false }
    }
}

pub fn params_of(cascade: &Cascade, t: Target) -> Option<&ParamSet> {
    let b = cascade.blocks.get(t.block)?;
    if t.seg {
        b.seg.as_ref().map(|s| &s.params)
    } else {
        b.den.as_ref().map(|d| &d.params)
    }
}

pub fn params_of_mut(cascade: &mut Cascade, t: Target) -> Option<&mut ParamSet> {
    let b = cascade.blocks.get_mut(t.block)?;
    if t.seg {
        b.seg.as_mut().map(|s| &mut s.params)
    } else {
        b.den.as_mut().map(|d| &mut d.params)
    }
}

/// Digest of every network not listed in `targets`.
pub fn frozen_digest(cascade: &Cascade, targets: &[Target]) -> String {
    let mut s = String::new();
    for block in 0..cascade.len() {
        for seg in [true, false] {
            let t = Target { block, seg };
            if !targets.contains(&t) {
                if let Some(p) = params_of(cascade, t) {
                    s.push_str(&p.digest());
                }
            }
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Cross-entropy on the logits of this block's segmentation network.
    Segment { block: usize },
    /// MSE between this block's denoised output and the clean image.
    Denoise { block: usize },
}

impl Objective {
    fn block(self) -> usize {
        match self {
            Objective::Segment { block } | Objective::Denoise { block } => block,
        }
    }
}

/// What one stage trains and how its input is formed.
#[derive(Clone, Debug)]
pub struct StageTask {
    pub objective: Objective,
    pub targets: Vec<Target>,
    /// Optimizer per target, in the same order.
    pub optimizers: Vec<OptimizerConfig>,
    /// Feed clean images instead of noisy ones (segmentation bootstrap).
    pub clean_input: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
    pub noise: NoiseSpec,
    /// Train on random square crops of this size (validation uses full images).
    pub crop: Option<usize>,
    pub classes: usize,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr_factor: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub initial_val: f64,
    pub best_val: f64,
    /// 0 when the initial parameters were never beaten.
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

impl StageOutcome {
    pub fn metrics(&self) -> Vec<(String, f64)> {
        vec![
            ("initial_val_loss".into(), self.initial_val),
            ("best_val_loss".into(), self.best_val),
            ("best_epoch".into(), self.best_epoch as f64),
            ("epochs_run".into(), self.history.len() as f64),
        ]
    }
}

/// Tensors for one mini-batch.
pub struct Batch {
    pub input: Tensor,
    pub clean: Tensor,
    pub labels: Vec<u8>,
    pub one_hot: Option<Tensor>,
}

/// Corrupt (unless `noise` is `None`) and optionally crop each sample.
/// The one-hot tensor is built when `classes > 0`.
pub fn make_batch(
    samples: &[&Sample],
    noise: Option<&NoiseSpec>,
    crop: Option<(usize, &[(usize, usize)])>,
    classes: usize,
) -> Result<Batch> {
    let mut inputs: Vec<Image> = Vec::with_capacity(samples.len());
    let mut cleans: Vec<Image> = Vec::with_capacity(samples.len());
    let mut labels: Vec<LabelMap> = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        let y = match noise {
            Some(n) => corrupt(&s.clean, n, s.index)?,
            None => s.clean.clone(),
        };
        match crop {
            Some((size, offsets)) => {
                let (oy, ox) = offsets[k];
                inputs.push(y.crop(oy, ox, size));
                cleans.push(s.clean.crop(oy, ox, size));
                labels.push(s.label.crop(oy, ox, size));
            }
            None => {
                inputs.push(y);
                cleans.push(s.clean.clone());
                labels.push(s.label.clone());
            }
        }
    }
    let one_hot = if classes > 0 {
        let maps: Vec<_> = labels.iter().map(|l| l.one_hot(classes)).collect();
        Some(probs_to_tensor(&maps)?)
    } else {
        None
    };
    Ok(Batch {
        input: images_to_tensor(&inputs)?,
        clean: images_to_tensor(&cleans)?,
        labels: labels_to_vec(&labels),
        one_hot,
    })
}

/// Scalar loss of `task` on one batch, with `bound` already on the tape.
fn batch_loss(
    cascade: &Cascade,
    tape: &mut Tape,
    bound: &[crate::cascade::BoundBlock],
    batch: &Batch,
    objective: Objective,
) -> Result<Var> {
    let y = tape.constant(batch.input.clone());
    let gt = batch.one_hot.as_ref().map(|t| tape.constant(t.clone()));
    let block = objective.block();
    match objective {
        Objective::Segment { .. } => {
            let vars = cascade.forward_on_tape(tape, bound, y, gt, block + 1, false)?;
            let logits = vars.logits[block].ok_or_else(|| usage_err!("block {} has no segmentation network", block + 1))?;
            tape.cross_entropy_loss(logits, &batch.labels)
        }
        Objective::Denoise { .. } => {
            let vars = cascade.forward_on_tape(tape, bound, y, gt, block + 1, true)?;
            let out = vars.denoised[block].ok_or_else(|| usage_err!("block {} has no denoiser", block + 1))?;
            let clean = tape.constant(batch.clean.clone());
            tape.mse_loss(out, clean)
        }
    }
}

fn needs_one_hot(cascade: &Cascade) -> bool {
    cascade
        .blocks
        .iter()
        .any(|b| b.variant == crate::cascade::BlockVariant::GtCondition)
}

/// Fixed-noise validation loss over full images.
pub fn validation_loss(
    cascade: &Cascade,
    task: &StageTask,
    data: &TrainData,
    batch_size: usize,
) -> Result<f64> {
    let noise = data.noise.with_seed(derive_seed(data.noise.seed(), &[VAL_TAG]));
    let classes = if needs_one_hot(cascade) { data.classes } else { 0 };
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in data.val.chunks(batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = make_batch(&refs, (!task.clean_input).then_some(&noise), None, classes)?;
        let mut tape = Tape::new();
        let bound = cascade.bind(&mut tape, |_, _| false);
        let loss = batch_loss(cascade, &mut tape, &bound, &batch, task.objective)?;
        total += tape.value(loss).data()[0] * chunk.len() as f64;
        count += chunk.len();
    }
    if count == 0 {
        return Err(usage_err!("validation set is empty"));
    }
    Ok(total / count as f64)
}

/// Train the networks in `task.targets` with every other network frozen.
///
/// The validation loss is measured before the first epoch and after each
/// epoch; the best parameters seen (possibly the initial ones) are written
/// back into `cascade`.
pub fn train_stage(
    cascade: &mut Cascade,
    task: &StageTask,
    data: &TrainData,
    schedule: &StageSchedule,
    seed: u64,
) -> Result<StageOutcome> {
    schedule.validate("stage schedule")?;
    if task.targets.is_empty() || task.targets.len() != task.optimizers.len() {
        return Err(usage_err!("a stage needs one optimizer per target"));
    }
    for &t in &task.targets {
        if params_of(cascade, t).is_none() {
            return Err(usage_err!("target {t:?} does not exist in the cascade"));
        }
    }
    if data.train.is_empty() {
        return Err(usage_err!("training set is empty"));
    }
    let frozen_before = frozen_digest(cascade, &task.targets);
    let mut states: Vec<OptimizerState> = task
        .targets
        .iter()
        .zip(&task.optimizers)
        .map(|(&t, &o)| OptimizerState::new(o, params_of(cascade, t).expect("checked")))
        .collect();
    let snapshot = |c: &Cascade| -> Vec<ParamSet> {
        task.targets.iter().map(|&t| params_of(c, t).expect("checked").clone()).collect()
    };
    let classes = if needs_one_hot(cascade) { data.classes } else { 0 };

    let initial_val = validation_loss(cascade, task, data, schedule.batch_size)?;
    let mut best = snapshot(cascade);
    let mut best_val = initial_val;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=schedule.epochs {
        let factor = schedule.lr_schedule.factor(epoch);
        for (st, o) in states.iter_mut().zip(&task.optimizers) {
            st.lr = o.lr() * factor;
        }
        order.sort_unstable();
        order.shuffle(&mut stream(seed, &[ORDER_TAG, epoch as u64]));
        let noise = data.noise.for_epoch(epoch as u64);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(schedule.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let offsets: Vec<(usize, usize)>;
            let crop = match data.crop {
                Some(size) => {
                    offsets = samples
                        .iter()
                        .map(|s| {
                            let (h, w) = (s.clean.height(), s.clean.width());
                            if size > h || size > w {
                                return Err(config_err!("crop {size} exceeds image {h}x{w}"));
                            }
                            let mut rng = stream(seed, &[CROP_TAG, epoch as u64, s.index]);
                            Ok((rng.random_range(0..=h - size), rng.random_range(0..=w - size)))
                        })
                        .collect::<Result<_>>()?;
                    Some((size, offsets.as_slice()))
                }
                None => None,
            };
            let batch = make_batch(&samples, (!task.clean_input).then_some(&noise), crop, classes)?;
            let mut tape = Tape::new();
            let bound = cascade.bind(&mut tape, |b, s| task.targets.contains(&Target { block: b, seg: s }));
            let loss = batch_loss(cascade, &mut tape, &bound, &batch, task.objective)?;
            loss_sum += tape.value(loss).data()[0] * chunk.len() as f64;
            tape.backward(loss)?;
            for (k, &t) in task.targets.iter().enumerate() {
                let b = &bound[t.block];
                let handles = if t.seg { b.seg.as_ref() } else { b.den.as_ref() }.expect("checked");
                let grads: Vec<Option<Tensor>> = handles.vars().iter().map(|&v| tape.take_grad(v)).collect();
                states[k].apply(params_of_mut(cascade, t).expect("checked"), &grads)?;
            }
        }
        let val_loss = validation_loss(cascade, task, data, schedule.batch_size)?;
        let log = EpochLog {
            epoch,
            lr_factor: factor,
            train_loss: loss_sum / data.train.len() as f64,
            val_loss,
        };
        if data.verbose {
            eprintln!(
                "  epoch {epoch:3}  train {:.6}  val {:.6}",
                log.train_loss, log.val_loss
            );
        }
        history.push(log);
        if val_loss < best_val - schedule.min_delta {
            best_val = val_loss;
            best_epoch = epoch;
            best = snapshot(cascade);
            stale = 0;
        } else {
            stale += 1;
            if stale >= schedule.patience {
                break;
            }
        }
    }
    for (&t, p) in task.targets.iter().zip(best) {
        *params_of_mut(cascade, t).expect("checked") = p;
    }
    if frozen_digest(cascade, &task.targets) != frozen_before {
        return Err(usage_err!("a frozen network changed during training"));
    }
    Ok(StageOutcome {
        initial_val,
        best_val,
        best_epoch,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{ArchConfig, Block, BlockVariant};
    use crate::data::generate_sample;
    use crate::models::{SegConfig, SegNetTiny};

    fn samples(n: u64, size: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let (clean, label) = generate_sample(size, 4, 11, i).unwrap();
                Sample { index: i, clean, label }
            })
            .collect()
    }

    fn schedule(epochs: usize, optimizer: OptimizerConfig) -> StageSchedule {
        StageSchedule {
            epochs,
            batch_size: 4,
            patience: epochs,
            min_delta: 0.0,
            lr_schedule: LrSchedule::Constant,
            optimizer,
        }
    }

    fn data<'a>(s: &'a [Sample], sigma: f64) -> TrainData<'a> {
        TrainData {
            train: s,
            val: s,
            noise: NoiseSpec::gaussian(sigma, 5),
            crop: None,
            classes: 4,
            verbose: false,
        }
    }

    #[test]
    fn segmentation_overfits_four_images() {
        let s = samples(4, 32);
        let mut c = Cascade::new(vec![Block::segmentation_only(SegNetTiny::new(SegConfig::new(4), 1).unwrap())]).unwrap();
        let opt = OptimizerConfig::adam(3e-3);
        let task = StageTask {
            objective: Objective::Segment { block: 0 },
            targets: vec![Target::seg(0)],
            optimizers: vec![opt],
            clean_input: true,
        };
        let out = train_stage(&mut c, &task, &data(&s, 25.0), &schedule(300, opt), 3).unwrap();
        assert!(out.best_val < 0.05, "cross-entropy {}", out.best_val);
        assert!(out.best_val <= out.initial_val);
    }

    #[test]
    fn denoiser_fits_small_set() {
        let s = samples(16, 32);
        let arch = ArchConfig::new(4);
        let mut c = Cascade::new(vec![Block::build(&arch, 0, BlockVariant::Plain, 2).unwrap()]).unwrap();
        let opt = OptimizerConfig::adam(1e-3);
        let task = StageTask {
            objective: Objective::Denoise { block: 0 },
            targets: vec![Target::den(0)],
            optimizers: vec![opt],
            clean_input: false,
        };
        let sigma: f64 = 25.0;
        let sched = StageSchedule {
            batch_size: 4,
            ..schedule(100, opt)
        };
        let out = train_stage(&mut c, &task, &data(&s, sigma), &sched, 3).unwrap();
        let noise_mse = (sigma / 255.0).powi(2);
        assert!((out.initial_val / noise_mse - 1.0).abs() < 0.2, "fresh denoiser is near identity");
        assert!(out.best_val < noise_mse / 2.0, "mse {} vs noise {}", out.best_val, noise_mse);
    }

    #[test]
    fn untargeted_networks_stay_bitwise_frozen() {
        let s = samples(4, 16);
        let arch = ArchConfig::new(4);
        let mut c = Cascade::new(vec![Block::build(&arch, 0, BlockVariant::Conditioned, 9).unwrap()]).unwrap();
        let den_before = c.blocks[0].den.clone().unwrap().params;
        let seg_before = c.blocks[0].seg.clone().unwrap().params;
        let opt = OptimizerConfig::sgd(0.05, 0.9);
        let task = StageTask {
            objective: Objective::Denoise { block: 0 },
            targets: vec![Target::den(0)],
            optimizers: vec![OptimizerConfig::adam(1e-3)],
            clean_input: false,
        };
        train_stage(&mut c, &task, &data(&s, 25.0), &schedule(2, opt), 1).unwrap();
        assert_eq!(c.blocks[0].seg.as_ref().unwrap().params, seg_before);
        assert_ne!(c.blocks[0].den.as_ref().unwrap().params, den_before);
    }

    #[test]
    fn initial_parameters_kept_when_never_beaten() {
        let s = samples(4, 16);
        let mut c = Cascade::new(vec![Block::segmentation_only(SegNetTiny::new(SegConfig::new(4), 4).unwrap())]).unwrap();
        let before = c.blocks[0].seg.clone().unwrap().params;
        let opt = OptimizerConfig::sgd(0.05, 0.9);
        let task = StageTask {
            objective: Objective::Segment { block: 0 },
            targets: vec![Target::seg(0)],
            optimizers: vec![opt],
            clean_input: false,
        };
        let sched = StageSchedule {
            min_delta: 1e9,
            patience: 2,
            ..schedule(5, opt)
        };
        let out = train_stage(&mut c, &task, &data(&s, 25.0), &sched, 1).unwrap();
        assert_eq!(out.best_epoch, 0);
        assert_eq!(out.history.len(), 2, "early stop after patience");
        assert_eq!(out.best_val, out.initial_val);
        assert_eq!(c.blocks[0].seg.as_ref().unwrap().params, before);
    }

    #[test]
    fn runs_are_reproducible() {
        let s = samples(4, 16);
        let run = || {
            let arch = ArchConfig::new(4);
            let mut c = Cascade::new(vec![Block::build(&arch, 0, BlockVariant::Plain, 2).unwrap()]).unwrap();
            let opt = OptimizerConfig::adam(1e-3);
            let task = StageTask {
                objective: Objective::Denoise { block: 0 },
                targets: vec![Target::den(0)],
                optimizers: vec![opt],
                clean_input: false,
            };
            let d = TrainData { crop: Some(8), ..data(&s, 25.0) };
            let out = train_stage(&mut c, &task, &d, &schedule(3, opt), 7).unwrap();
            (out, c.blocks[0].den.clone().unwrap().params.digest())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn step_schedule_factor() {
        let s = LrSchedule::Step { every: 10, gamma: 0.5 };
        assert_eq!(s.factor(1), 1.0);
        assert_eq!(s.factor(10), 1.0);
        assert_eq!(s.factor(11), 0.5);
        assert_eq!(s.factor(25), 0.25);
    }
}
