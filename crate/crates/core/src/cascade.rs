//! Chains of segmentation/denoising blocks.
//!
//! Block 1 segments the noisy image `y` and denoises it. Block `i > 1`
//! segments the previous estimate and denoises it with `y` concatenated as
//! a second head input:
//!
//! ```text
//! s1 = S1(y),        x1 = D1(y, s1)
//! si = Si(x{i-1}),   xi = Di([x{i-1}, y], si)
//! ```
//!
//! Ablation variants swap the condition fed to the SFT sites (the block
//! input replicated to `N` channels, or one-hot ground truth) or drop the
//! segmentation network and SFT sites altogether.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Result};
use crate::models::{Bound, DenoiserConfig, DenoiserTiny, SegConfig, SegNetTiny, SftConfig};
use crate::rng::derive_seed;
use crate::tensor::{Tape, Tensor, Var};

/// Which condition drives a block's SFT sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockVariant {
    /// Softmax output of the block's own segmentation network.
    Conditioned,
    /// No segmentation input and no SFT sites.
    Plain,
    /// The block's input image replicated or truncated to `N` channels.
    ImgCondition,
    /// One-hot ground-truth labels.
    GtCondition,
}

impl BlockVariant {
    pub fn name(self) -> &'static str {
        match self {
            BlockVariant::Conditioned => "conditioned",
            BlockVariant::Plain => "plain",
            BlockVariant::ImgCondition => "img-condition",
            BlockVariant::GtCondition => "gt-condition",
        }
    }
}

/// Layer sizes shared by every block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub classes: usize,
    pub seg_widths: [usize; 3],
    pub den_width: usize,
    pub sft_branch_width: usize,
    pub sft_head_kernel: usize,
    pub residual: bool,
}

impl ArchConfig {
    pub fn new(classes: usize) -> Self {
        ArchConfig {
            classes,
            seg_widths: [16, 32, 64],
            den_width: 16,
            sft_branch_width: 16,
            sft_head_kernel: 1,
            residual: true,
        }
    }

    pub fn seg(&self) -> SegConfig {
        SegConfig {
            classes: self.classes,
            widths: self.seg_widths,
        }
    }

    /// Denoiser for 0-based block `index` of the given variant.
    pub fn den(&self, index: usize, variant: BlockVariant) -> DenoiserConfig {
        let inputs = if index == 0 { 1 } else { 2 };
        let mut cfg = match variant {
            BlockVariant::Plain => DenoiserConfig::plain(inputs, self.den_width),
            _ => DenoiserConfig::conditioned(
                inputs,
                self.den_width,
                SftConfig {
                    classes: self.classes,
                    branch_width: self.sft_branch_width,
                    head_kernel: self.sft_head_kernel,
                },
            ),
        };
        cfg.residual = self.residual;
        cfg
    }
}

/// One unit of a cascade. Either network may be absent: a block without a
/// denoiser ends the cascade with a segmentation map, and a block without a
/// segmentation network has nothing to report for segmentation.
#[derive(Clone, Debug)]
pub struct Block {
    pub variant: BlockVariant,
    pub seg: Option<SegNetTiny>,
    pub den: Option<DenoiserTiny>,
}

impl Block {
    /// Fresh networks for 0-based block `index`. Only the conditioned
    /// variant carries a segmentation network.
    pub fn build(arch: &ArchConfig, index: usize, variant: BlockVariant, seed: u64) -> Result<Block> {
        let seg = match variant {
            BlockVariant::Conditioned => Some(SegNetTiny::new(arch.seg(), derive_seed(seed, &[index as u64, 1]))?),
            _ => None,
        };
        let den = DenoiserTiny::new(arch.den(index, variant), derive_seed(seed, &[index as u64, 2]))?;
        Ok(Block {
            variant,
            seg,
            den: Some(den),
        })
    }

    pub fn segmentation_only(seg: SegNetTiny) -> Block {
        Block {
            variant: BlockVariant::Conditioned,
            seg: Some(seg),
            den: None,
        }
    }
}

/// Handles for one block's parameters on a tape.
#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub seg: Option<Bound>,
    pub den: Option<Bound>,
}

/// Per-block tape outputs; `None` where a block has no such network or the
/// forward stopped early.
#[derive(Clone, Debug, Default)]
pub struct CascadeVars {
    pub logits: Vec<Option<Var>>,
    pub probs: Vec<Option<Var>>,
    pub denoised: Vec<Option<Var>>,
}

/// Per-block values from [`Cascade::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutput {
    pub probs: Vec<Option<Tensor>>,
    pub denoised: Vec<Option<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct Cascade {
    pub blocks: Vec<Block>,
}

impl Cascade {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(config_err!("a cascade needs at least one block"));
        }
        let mut classes = None;
        for (i, b) in blocks.iter().enumerate() {
            if b.seg.is_none() && b.den.is_none() {
                return Err(config_err!("block {} has neither network", i + 1));
            }
            if b.den.is_none() && i + 1 != blocks.len() {
                return Err(config_err!("only the last block may omit its denoiser"));
            }
            if let Some(s) = &b.seg {
                check_classes(&mut classes, s.classes())?;
            }
            if let Some(d) = &b.den {
                let want = if i == 0 { 1 } else { 2 };
                if d.config.image_inputs != want {
                    return Err(config_err!(
                        "block {} denoiser takes {} images, expected {want}",
                        i + 1,
                        d.config.image_inputs
                    ));
                }
                match (b.variant, d.config.sft) {
                    (BlockVariant::Plain, None) => {}
                    (BlockVariant::Plain, Some(_)) => {
                        return Err(config_err!("plain block {} has SFT sites", i + 1))
                    }
                    (_, None) => return Err(config_err!("block {} needs a conditioned denoiser", i + 1)),
                    (v, Some(sft)) => {
                        check_classes(&mut classes, sft.classes)?;
                        if v == BlockVariant::Conditioned && b.seg.is_none() {
                            return Err(config_err!("conditioned block {} lacks a segmentation network", i + 1));
                        }
                    }
                }
            }
        }
        Ok(Cascade { blocks })
    }

    /// `n` fresh blocks of one variant.
    pub fn build(arch: &ArchConfig, variant: BlockVariant, n: usize, seed: u64) -> Result<Self> {
        Self::new((0..n).map(|i| Block::build(arch, i, variant, seed)).collect::<Result<_>>()?)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Bind every network; `trainable(block, is_seg)` picks which ones get gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(usize, bool) -> bool) -> Vec<BoundBlock> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| BoundBlock {
                seg: b.seg.as_ref().map(|s| s.params.bind(tape, trainable(i, true))),
                den: b.den.as_ref().map(|d| d.params.bind(tape, trainable(i, false))),
            })
            .collect()
    }

    /// Run blocks `1..=upto` on the tape. With `last_den == false` the
    /// denoiser of block `upto` is skipped. `gt` is the one-hot condition
    /// required by ground-truth-conditioned blocks.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &[BoundBlock],
        y: Var,
        gt: Option<Var>,
        upto: usize,
        last_den: bool,
    ) -> Result<CascadeVars> {
        if upto == 0 || upto > self.blocks.len() {
            return Err(usage_err!("upto {upto} outside 1..={}", self.blocks.len()));
        }
        let mut out = CascadeVars::default();
        let mut current = y;
        for (i, (block, b)) in self.blocks.iter().zip(bound).take(upto).enumerate() {
            let (logits, probs) = match (&block.seg, &b.seg) {
                (Some(s), Some(p)) => {
                    let l = s.forward(tape, p, current)?;
                    (Some(l), Some(tape.softmax_channels(l)?))
                }
                _ => (None, None),
            };
            out.logits.push(logits);
            out.probs.push(probs);
            let run_den = i + 1 < upto || last_den;
            let denoised = match (&block.den, &b.den) {
                (Some(d), Some(p)) if run_den => {
                    let condition = match block.variant {
                        BlockVariant::Plain => None,
                        BlockVariant::Conditioned => probs,
                        BlockVariant::ImgCondition => Some(replicate_channels(tape, current, self.classes())?),
                        BlockVariant::GtCondition => Some(gt.ok_or_else(|| {
                            usage_err!("block {} is conditioned on ground truth but none was given", i + 1)
                        })?),
                    };
                    let images: Vec<Var> = if i == 0 { vec![y] } else { vec![current, y] };
                    Some(d.forward(tape, p, &images, condition)?)
                }
                _ => None,
            };
            out.denoised.push(denoised);
            if let Some(d) = denoised {
                current = d;
            }
        }
        Ok(out)
    }

    /// Class count shared by the blocks (0 for an all-plain cascade).
    pub fn classes(&self) -> usize {
        self.blocks
            .iter()
            .find_map(|b| {
                b.seg
                    .as_ref()
                    .map(|s| s.classes())
                    .or_else(|| b.den.as_ref().and_then(|d| d.config.sft.map(|s| s.classes)))
            })
            .unwrap_or(0)
    }

    /// Frozen forward of blocks `1..=upto` (all blocks when `None`).
    pub fn forward(&self, y: &Tensor, gt: Option<&Tensor>, upto: Option<usize>) -> Result<CascadeOutput> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_, _| false);
        let yv = tape.constant(y.clone());
        let gv = gt.map(|g| tape.constant(g.clone()));
        let vars = self.forward_on_tape(&mut tape, &bound, yv, gv, upto.unwrap_or(self.blocks.len()), true)?;
        let take = |v: &[Option<Var>]| v.iter().map(|o| o.map(|v| tape.value(v).clone())).collect();
        Ok(CascadeOutput {
            probs: take(&vars.probs),
            denoised: take(&vars.denoised),
        })
    }
}

fn check_classes(seen: &mut Option<usize>, n: usize) -> Result<()> {
    match *seen {
        Some(c) if c != n => Err(config_err!("blocks disagree on class count: {c} vs {n}")),
        _ => {
            *seen = Some(n);
            Ok(())
        }
    }
}

/// Channel `c` of the result is channel `c mod 3` of `image`.
pub fn replicate_channels(tape: &mut Tape, image: Var, n: usize) -> Result<Var> {
    let parts = (0..n)
        .map(|c| tape.slice_channels(image, c % 3, 1))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_channels(&parts)
}

/// The same cascade with the last denoiser removed, so that its final
/// output is the last segmentation map.
pub fn cascade_truncate_tail(cascade: &Cascade) -> Result<Cascade> {
    let mut blocks = cascade.blocks.clone();
    let last = blocks.last_mut().expect("cascade is non-empty");
    if last.seg.is_none() {
        return Err(usage_err!("the last block has no segmentation network to end on"));
    }
    last.den = None;
    Cascade::new(blocks)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::models::Sdb;
    use crate::rng::stream;

    fn arch() -> ArchConfig {
        ArchConfig {
            classes: 3,
            seg_widths: [4, 4, 4],
            den_width: 4,
            sft_branch_width: 4,
            sft_head_kernel: 1,
            residual: true,
        }
    }

    fn noisy(b: usize, s: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, &[]);
        Tensor::from_fn(&[b, 3, s, s], |_| rng.random_range(0.0..1.0))
    }

    fn one_hot(b: usize, n: usize, s: usize) -> Tensor {
        Tensor::from_fn(&[b, n, s, s], |i| ((i / (s * s)) % n == (i % 3)) as u8 as f64)
    }

    #[test]
    fn single_block_reduces_to_the_pair_forward() {
        let c = Cascade::build(&arch(), BlockVariant::Conditioned, 1, 4).unwrap();
        let sdb = Sdb {
            seg: c.blocks[0].seg.clone().unwrap(),
            den: c.blocks[0].den.clone().unwrap(),
        };
        let y = noisy(2, 8, 1);
        let out = c.forward(&y, None, None).unwrap();
        let mut tape = Tape::new();
        let b = sdb.bind(&mut tape, false, false);
        let yv = tape.constant(y.clone());
        let (p, d) = sdb.forward(&mut tape, &b, yv, None).unwrap();
        assert_eq!(out.probs[0].as_ref().unwrap(), tape.value(p));
        assert_eq!(out.denoised[0].as_ref().unwrap(), tape.value(d));
    }

    #[test]
    fn truncated_runs_are_prefixes() {
        for variant in [BlockVariant::Conditioned, BlockVariant::Plain, BlockVariant::ImgCondition] {
            let c = Cascade::build(&arch(), variant, 3, 5).unwrap();
            let y = noisy(1, 8, 2);
            let full = c.forward(&y, None, None).unwrap();
            for k in 1..=3 {
                let part = c.forward(&y, None, Some(k)).unwrap();
                assert_eq!(part.probs[..], full.probs[..k]);
                assert_eq!(part.denoised[..], full.denoised[..k]);
            }
            assert!(c.forward(&y, None, Some(0)).is_err());
            assert!(c.forward(&y, None, Some(4)).is_err());
        }
    }

    #[test]
    fn later_blocks_cannot_change_earlier_outputs() {
        let c = Cascade::build(&arch(), BlockVariant::Conditioned, 2, 5).unwrap();
        let mut d = c.clone();
        d.blocks[1] = Block::build(&arch(), 1, BlockVariant::Conditioned, 99).unwrap();
        let y = noisy(1, 8, 2);
        let (a, b) = (c.forward(&y, None, None).unwrap(), d.forward(&y, None, None).unwrap());
        assert_eq!(a.denoised[0], b.denoised[0]);
        assert_ne!(a.denoised[1], b.denoised[1]);
    }

    #[test]
    fn skip_connection_is_live() {
        let c = Cascade::build(&arch(), BlockVariant::Conditioned, 2, 6).unwrap();
        let y = noisy(1, 8, 3);
        let x1 = c.forward(&y, None, Some(1)).unwrap().denoised[0].clone().unwrap();
        let run = |skip: &Tensor| {
            let mut tape = Tape::new();
            let b = c.bind(&mut tape, |_, _| false);
            let block = &c.blocks[1];
            let xv = tape.constant(x1.clone());
            let sv = tape.constant(skip.clone());
            let l = block.seg.as_ref().unwrap().forward(&mut tape, b[1].seg.as_ref().unwrap(), xv).unwrap();
            let p = tape.softmax_channels(l).unwrap();
            let out = block.den.as_ref().unwrap().forward(&mut tape, b[1].den.as_ref().unwrap(), &[xv, sv], Some(p)).unwrap();
            tape.value(out).clone()
        };
        let with_y = run(&y);
        assert_eq!(&with_y, c.forward(&y, None, None).unwrap().denoised[1].as_ref().unwrap());
        assert!(with_y.max_abs_diff(&run(&Tensor::zeros(y.shape()))) > 0.0);
    }

    #[test]
    fn plain_blocks_ignore_segmentation_parameters() {
        let mut c = Cascade::build(&arch(), BlockVariant::Plain, 3, 7).unwrap();
        for (i, b) in c.blocks.iter_mut().enumerate() {
            b.seg = Some(SegNetTiny::new(arch().seg(), i as u64).unwrap());
        }
        let y = noisy(1, 8, 4);
        let mut tape = Tape::new();
        let bound = c.bind(&mut tape, |_, _| true);
        let yv = tape.constant(y.clone());
        let vars = c.forward_on_tape(&mut tape, &bound, yv, None, 3, true).unwrap();
        let target = tape.constant(Tensor::full(y.shape(), 0.5));
        let loss = tape.mse_loss(vars.denoised[2].unwrap(), target).unwrap();
        tape.backward(loss).unwrap();
        let mut den_grad = 0.0;
        for b in &bound {
            for &v in b.seg.as_ref().unwrap().vars() {
                assert!(tape.take_grad(v).unwrap().data().iter().all(|&g| g == 0.0));
            }
            for &v in b.den.as_ref().unwrap().vars() {
                den_grad += tape.take_grad(v).unwrap().data().iter().map(|g| g.abs()).sum::<f64>();
            }
        }
        assert!(den_grad > 0.0);
    }

    #[test]
    fn condition_variants() {
        let y = noisy(2, 8, 5);
        let gt = one_hot(2, 3, 8);
        let c = Cascade::build(&arch(), BlockVariant::GtCondition, 2, 8).unwrap();
        assert!(c.forward(&y, None, None).is_err());
        let a = c.forward(&y, Some(&gt), None).unwrap();
        assert!(a.probs.iter().all(Option::is_none));
        let mut flipped = gt.clone();
        flipped.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
        assert_ne!(a.denoised[1], c.forward(&y, Some(&flipped), None).unwrap().denoised[1]);

        let img = Cascade::build(&arch(), BlockVariant::ImgCondition, 1, 8).unwrap();
        let plain_params = Block::build(&arch(), 0, BlockVariant::Plain, 8).unwrap();
        let sd = Block::build(&arch(), 0, BlockVariant::Conditioned, 8).unwrap();
        let count = |b: &Block| b.den.as_ref().unwrap().params.scalar_count();
        assert_eq!(count(&img.blocks[0]), count(&sd));
        assert!(count(&plain_params) < count(&sd));
    }

    #[test]
    fn truncating_the_tail_ends_on_segmentation() {
        let c = Cascade::build(&arch(), BlockVariant::Conditioned, 2, 9).unwrap();
        let t = cascade_truncate_tail(&c).unwrap();
        let y = noisy(1, 8, 6);
        let (full, cut) = (c.forward(&y, None, None).unwrap(), t.forward(&y, None, None).unwrap());
        assert_eq!(cut.denoised[0], full.denoised[0]);
        assert_eq!(cut.probs, full.probs);
        assert!(cut.denoised[1].is_none());

        let one = cascade_truncate_tail(&Cascade::build(&arch(), BlockVariant::Conditioned, 1, 9).unwrap()).unwrap();
        let out = one.forward(&y, None, None).unwrap();
        assert_eq!(out.probs[0].as_ref().unwrap(), &c.blocks[0].seg.as_ref().unwrap().infer(&y).unwrap().1);
        assert!(out.denoised[0].is_none());

        assert!(cascade_truncate_tail(&Cascade::build(&arch(), BlockVariant::Plain, 1, 9).unwrap()).is_err());
    }

    #[test]
    fn structural_validation() {
        let a = arch();
        let b0 = Block::build(&a, 0, BlockVariant::Conditioned, 1).unwrap();
        let b1 = Block::build(&a, 1, BlockVariant::Conditioned, 1).unwrap();
        assert!(Cascade::new(vec![]).is_err());
        assert!(Cascade::new(vec![b1.clone()]).is_err());
        assert!(Cascade::new(vec![b0.clone(), b0.clone()]).is_err());
        let seg_only = Block::segmentation_only(b0.seg.clone().unwrap());
        assert!(Cascade::new(vec![seg_only.clone(), b1.clone()]).is_err());
        assert!(Cascade::new(vec![b0.clone(), seg_only]).is_ok());
        let mut wide = b1;
        wide.seg = Some(SegNetTiny::new(SegConfig::new(4), 0).unwrap());
        assert!(Cascade::new(vec![b0, wide]).is_err());
    }
}
