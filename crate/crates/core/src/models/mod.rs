//! Network building blocks: parameter storage, the SFT layer, the
//! segmentation network, the denoiser and their pairing into a block.

mod denoiser;
mod params;
mod seg;
mod sft;
#[cfg(test)]
mod tests;

pub use denoiser::{DenoiserConfig, DenoiserTiny, SftConfig, BODY_DILATIONS, TAIL_WEIGHT_SCALE};
pub use params::{Bound, Conv, ConvShape, Init, ParamSet};
pub use seg::{SegConfig, SegNetTiny};
pub use sft::{SftBranch, SftHeads, SftLayer, HEAD_WEIGHT_SCALE};

use crate::error::{config_err, Result};
use crate::rng::derive_seed;
use crate::tensor::{Tape, Var};

/// A segmentation network paired with a conditioned denoiser.
#[derive(Clone, Debug)]
pub struct Sdb {
    pub seg: SegNetTiny,
    pub den: DenoiserTiny,
}

#[derive(Clone, Debug)]
pub struct BoundSdb {
    pub seg: Bound,
    pub den: Bound,
}

impl Sdb {
    pub fn new(seg: SegConfig, den: DenoiserConfig, seed: u64) -> Result<Self> {
        match den.sft {
            Some(s) if s.classes == seg.classes => {}
            Some(s) => {
                return Err(config_err!(
                    "condition has {} channels but segmentation predicts {} classes",
                    s.classes,
                    seg.classes
                ))
            }
            None => return Err(config_err!("a block needs a conditioned denoiser")),
        }
        Ok(Sdb {
            seg: SegNetTiny::new(seg, derive_seed(seed, &[1]))?,
            den: DenoiserTiny::new(den, derive_seed(seed, &[2]))?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, train_seg: bool, train_den: bool) -> BoundSdb {
        BoundSdb {
            seg: self.seg.params.bind(tape, train_seg),
            den: self.den.params.bind(tape, train_den),
        }
    }

    /// `s = S(input)`, `x = D([input, skip], s)`; returns `(probs, denoised)`.
    pub fn forward(&self, tape: &mut Tape, b: &BoundSdb, input: Var, skip: Option<Var>) -> Result<(Var, Var)> {
        let logits = self.seg.forward(tape, &b.seg, input)?;
        let probs = tape.softmax_channels(logits)?;
        let images: Vec<Var> = std::iter::once(input).chain(skip).collect();
        let denoised = self.den.forward(tape, &b.den, &images, Some(probs))?;
        Ok((probs, denoised))
    }
}
