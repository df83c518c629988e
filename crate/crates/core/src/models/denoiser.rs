use crate::error::{config_err, usage_err, Result};
use crate::tensor::{Tape, Tensor, Var};

use super::params::{Bound, Conv, ConvShape, Init, ParamSet};
use super::sft::{SftBranch, SftHeads};

/// Dilations of the six body layers.
pub const BODY_DILATIONS: [usize; 6] = [1, 2, 4, 4, 2, 1];

/// Scale on the tail's Kaiming std; keeps a fresh residual denoiser close
/// to the identity map.
pub const TAIL_WEIGHT_SCALE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SftConfig {
    /// Channels of the condition map.
    pub classes: usize,
    /// Width of the shared condition branch.
    pub branch_width: usize,
    /// Kernel size of the gamma/beta heads.
    pub head_kernel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Number of 3-channel images concatenated at the head (1 or 2).
    pub image_inputs: usize,
    pub width: usize,
    /// Subtract the network output from the first image input.
    pub residual: bool,
    /// `None` builds the plain denoiser without SFT sites.
    pub sft: Option<SftConfig>,
}

impl DenoiserConfig {
    pub fn plain(image_inputs: usize, width: usize) -> Self {
        DenoiserConfig {
            image_inputs,
            width,
            residual: true,
            sft: None,
        }
    }

    pub fn conditioned(image_inputs: usize, width: usize, sft: SftConfig) -> Self {
        DenoiserConfig {
            sft: Some(sft),
            ..Self::plain(image_inputs, width)
        }
    }
}

#[derive(Clone, Debug)]
struct Conditioning {
    branch: SftBranch,
    /// One per body layer, then one before the tail.
    sites: Vec<SftHeads>,
}

/// Dilated residual denoiser with optional SFT modulation.
///
/// `head -> relu -> [sft] body_k -> relu (x6) -> [sft] tail`. SFT sites sit
/// in front of every layer except the head.
#[derive(Clone, Debug)]
pub struct DenoiserTiny {
    pub config: DenoiserConfig,
    pub params: ParamSet,
    head: Conv,
    body: Vec<Conv>,
    tail: Conv,
    cond: Option<Conditioning>,
}

impl DenoiserTiny {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if !(1..=2).contains(&config.image_inputs) {
            return Err(config_err!("denoiser takes 1 or 2 images, got {}", config.image_inputs));
        }
        if config.width == 0 {
            return Err(config_err!("denoiser width must be positive"));
        }
        let w = config.width;
        let mut ps = ParamSet::new();
        let head = Conv::build(
            &mut ps,
            seed,
            "den.head",
            ConvShape::same(3 * config.image_inputs, w, 3, 1),
            Init::KAIMING,
        );
        let body = BODY_DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| Conv::build(&mut ps, seed, &format!("den.body{i}"), ConvShape::same(w, w, 3, d), Init::KAIMING))
            .collect();
        let tail = Conv::build(
            &mut ps,
            seed,
            "den.tail",
            ConvShape::same(w, 3, 3, 1),
            Init::scaled(TAIL_WEIGHT_SCALE, 0.0),
        );
        let cond = match config.sft {
            None => None,
            Some(s) => {
                if s.classes == 0 || s.branch_width == 0 || s.head_kernel % 2 == 0 {
                    return Err(config_err!("invalid SFT configuration {s:?}"));
                }
                let branch = SftBranch::build(&mut ps, seed, "den.sft", s.classes, s.branch_width);
                let sites = (0..=BODY_DILATIONS.len())
                    .map(|i| SftHeads::build(&mut ps, seed, &format!("den.sft{i}"), s.branch_width, w, s.head_kernel))
                    .collect();
                Some(Conditioning { branch, sites })
            }
        };
        Ok(DenoiserTiny {
            config,
            params: ps,
            head,
            body,
            tail,
            cond,
        })
    }

    pub fn is_conditioned(&self) -> bool {
        self.cond.is_some()
    }

    /// Number of SFT sites (0 for the plain denoiser).
    pub fn sft_sites(&self) -> usize {
        self.cond.as_ref().map_or(0, |c| c.sites.len())
    }

    /// Denoise `images[0]`, with `images[1]` (if any) as an extra input and
    /// `condition` `[B, N, H, W]` driving the SFT sites.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, images: &[Var], condition: Option<Var>) -> Result<Var> {
        if images.len() != self.config.image_inputs {
            return Err(usage_err!(
                "denoiser expects {} image inputs, got {}",
                self.config.image_inputs,
                images.len()
            ));
        }
        let first = tape.value(images[0]).shape().to_vec();
        if first.len() != 4 || first[1] != 3 {
            return Err(config_err!("denoiser input must be [B, 3, H, W], got {first:?}"));
        }
        for &im in &images[1..] {
            if tape.value(im).shape() != first.as_slice() {
                return Err(config_err!(
                    "denoiser inputs misaligned: {first:?} vs {:?}",
                    tape.value(im).shape()
                ));
            }
        }
        let shared = match (&self.cond, condition) {
            (None, None) => None,
            (Some(c), Some(cv)) => {
                let s = tape.value(cv).shape();
                let n = self.config.sft.map(|s| s.classes).unwrap_or(0);
                if s.len() != 4 || s[0] != first[0] || s[1] != n || s[2..] != first[2..] {
                    return Err(config_err!("condition {s:?} does not match images {first:?} with {n} classes"));
                }
                Some((c, c.branch.forward(tape, p, cv)?))
            }
            (None, Some(_)) => return Err(usage_err!("plain denoiser given a condition")),
            (Some(_), None) => return Err(usage_err!("conditioned denoiser needs a condition")),
        };
        let x = if images.len() > 1 {
            tape.concat_channels(images)?
        } else {
            images[0]
        };
        let h = self.head.apply(tape, p, x)?;
        let mut h = tape.relu(h)?;
        for (i, conv) in self.body.iter().enumerate() {
            if let Some((c, sh)) = &shared {
                h = c.sites[i].apply(tape, p, h, *sh)?;
            }
            let z = conv.apply(tape, p, h)?;
            h = tape.relu(z)?;
        }
        if let Some((c, sh)) = &shared {
            h = c.sites[self.body.len()].apply(tape, p, h, *sh)?;
        }
        let t = self.tail.apply(tape, p, h)?;
        if self.config.residual {
            tape.sub(images[0], t)
        } else {
            Ok(t)
        }
    }

    /// Forward on a throwaway tape.
    pub fn infer(&self, images: &[&Tensor], condition: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xs: Vec<Var> = images.iter().map(|t| tape.constant((*t).clone())).collect();
        let c = condition.map(|t| tape.constant(t.clone()));
        let out = self.forward(&mut tape, &p, &xs, c)?;
        Ok(tape.value(out).clone())
    }
}
