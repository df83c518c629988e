//! Spatial feature transform: `F' = gamma * F + beta`, with `gamma` and
//! `beta` predicted per pixel from a class-probability map.

use crate::error::{config_err, Result};
use crate::tensor::{Tape, Var};

use super::params::{Bound, Conv, ConvShape, Init, ParamSet};

/// Scale on the Kaiming std of the gamma/beta heads, so that the transform
/// starts close to identity.
pub const HEAD_WEIGHT_SCALE: f64 = 0.1;

/// Two shared conv-relu layers turning the condition into features.
#[derive(Clone, Debug)]
pub struct SftBranch {
    convs: [Conv; 2],
    width: usize,
}

impl SftBranch {
    pub fn build(ps: &mut ParamSet, seed: u64, prefix: &str, classes: usize, width: usize) -> Self {
        let convs = [
            Conv::build(
                ps,
                seed,
                &format!("{prefix}.cond0"),
                ConvShape::same(classes, width, 3, 1),
                Init::KAIMING,
            ),
            Conv::build(
                ps,
                seed,
                &format!("{prefix}.cond1"),
                ConvShape::same(width, width, 3, 1),
                Init::KAIMING,
            ),
        ];
        SftBranch { convs, width }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, condition: Var) -> Result<Var> {
        let h = self.convs[0].apply(tape, p, condition)?;
        let h = tape.relu(h)?;
        let h = self.convs[1].apply(tape, p, h)?;
        tape.relu(h)
    }
}

/// Per-site gamma and beta heads.
#[derive(Clone, Debug)]
pub struct SftHeads {
    pub gamma: Conv,
    pub beta: Conv,
}

impl SftHeads {
    pub fn build(ps: &mut ParamSet, seed: u64, prefix: &str, branch_width: usize, channels: usize, kernel: usize) -> Self {
        let shape = ConvShape::same(branch_width, channels, kernel, 1);
        SftHeads {
            gamma: Conv::build(
                ps,
                seed,
                &format!("{prefix}.gamma"),
                shape,
                Init::scaled(HEAD_WEIGHT_SCALE, 1.0),
            ),
            beta: Conv::build(
                ps,
                seed,
                &format!("{prefix}.beta"),
                shape,
                Init::scaled(HEAD_WEIGHT_SCALE, 0.0),
            ),
        }
    }

    /// `(gamma, beta)` from the shared branch features.
    pub fn modulation(&self, tape: &mut Tape, p: &Bound, shared: Var) -> Result<(Var, Var)> {
        Ok((self.gamma.apply(tape, p, shared)?, self.beta.apply(tape, p, shared)?))
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, features: Var, shared: Var) -> Result<Var> {
        let (f, s) = (tape.value(features).shape(), tape.value(shared).shape());
        if f.len() != 4 || s.len() != 4 || f[0] != s[0] || f[2..] != s[2..] {
            return Err(config_err!("SFT features {f:?} and condition {s:?} are not aligned"));
        }
        let (gamma, beta) = self.modulation(tape, p, shared)?;
        let scaled = tape.mul(features, gamma)?;
        tape.add(scaled, beta)
    }
}

/// A self-contained single-site SFT layer.
#[derive(Clone, Debug)]
pub struct SftLayer {
    pub params: ParamSet,
    pub branch: SftBranch,
    pub heads: SftHeads,
}

impl SftLayer {
    pub fn new(classes: usize, channels: usize, branch_width: usize, head_kernel: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let branch = SftBranch::build(&mut params, seed, "sft", classes, branch_width);
        let heads = SftHeads::build(&mut params, seed, "sft", branch_width, channels, head_kernel);
        SftLayer { params, branch, heads }
    }

    /// `gamma * features + beta` with the modulation computed from `condition`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, features: Var, condition: Var) -> Result<Var> {
        let (f, c) = (tape.value(features).shape(), tape.value(condition).shape());
        if f.len() != 4 || c.len() != 4 || f[0] != c[0] || f[2..] != c[2..] {
            return Err(config_err!("SFT features {f:?} and condition {c:?} are not aligned"));
        }
        let shared = self.branch.forward(tape, p, condition)?;
        self.heads.apply(tape, p, features, shared)
    }

    pub fn modulation(&self, tape: &mut Tape, p: &Bound, condition: Var) -> Result<(Var, Var)> {
        let shared = self.branch.forward(tape, p, condition)?;
        self.heads.modulation(tape, p, shared)
    }
}
