use crate::error::{config_err, Result};
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

use super::params::{Bound, Conv, ConvShape, Init, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegConfig {
    pub classes: usize,
    /// Encoder widths at full, half and quarter resolution.
    pub widths: [usize; 3],
}

impl SegConfig {
    pub fn new(classes: usize) -> Self {
        SegConfig {
            classes,
            widths: [16, 32, 64],
        }
    }
}

/// Small encoder-decoder segmentation network.
///
/// Three conv-relu encoder stages (the last two with stride 2), two decoder
/// stages that upsample, concatenate the matching encoder features and apply
/// a conv-relu, then a 1x1 classifier.
#[derive(Clone, Debug)]
pub struct SegNetTiny {
    pub config: SegConfig,
    pub params: ParamSet,
    enc: [Conv; 3],
    dec: [Conv; 2],
    head: Conv,
}

impl SegNetTiny {
    pub fn new(config: SegConfig, seed: u64) -> Result<Self> {
        if config.classes < 2 {
            return Err(config_err!("segmentation needs at least 2 classes, got {}", config.classes));
        }
        if config.widths.contains(&0) {
            return Err(config_err!("segmentation widths must be positive: {:?}", config.widths));
        }
        let [c1, c2, c3] = config.widths;
        let mut ps = ParamSet::new();
        let down = |cin, cout| ConvShape {
            cin,
            cout,
            kernel: 3,
            spec: ConvSpec::new(2, 1, 1),
        };
        let enc = [
            Conv::build(&mut ps, seed, "seg.enc1", ConvShape::same(3, c1, 3, 1), Init::KAIMING),
            Conv::build(&mut ps, seed, "seg.enc2", down(c1, c2), Init::KAIMING),
            Conv::build(&mut ps, seed, "seg.enc3", down(c2, c3), Init::KAIMING),
        ];
        let dec = [
            Conv::build(&mut ps, seed, "seg.dec2", ConvShape::same(c3 + c2, c2, 3, 1), Init::KAIMING),
            Conv::build(&mut ps, seed, "seg.dec1", ConvShape::same(c2 + c1, c1, 3, 1), Init::KAIMING),
        ];
        let head = Conv::build(
            &mut ps,
            seed,
            "seg.classifier",
            ConvShape::same(c1, config.classes, 1, 1),
            Init::KAIMING,
        );
        Ok(SegNetTiny {
            config,
            params: ps,
            enc,
            dec,
            head,
        })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Logits `[B, N, H, W]` for images `[B, 3, H, W]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.value(x).shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(config_err!("segmentation input must be [B, 3, H, W], got {s:?}"));
        }
        if s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(config_err!("segmentation input {}x{} is not divisible by 4", s[2], s[3]));
        }
        let stage = |tape: &mut Tape, conv: &Conv, x: Var| -> Result<Var> {
            let h = conv.apply(tape, p, x)?;
            tape.relu(h)
        };
        let e1 = stage(tape, &self.enc[0], x)?;
        let e2 = stage(tape, &self.enc[1], e1)?;
        let e3 = stage(tape, &self.enc[2], e2)?;
        let u = tape.upsample2x(e3)?;
        let u = tape.concat_channels(&[u, e2])?;
        let d2 = stage(tape, &self.dec[0], u)?;
        let u = tape.upsample2x(d2)?;
        let u = tape.concat_channels(&[u, e1])?;
        let d1 = stage(tape, &self.dec[1], u)?;
        self.head.apply(tape, p, d1)
    }

    /// Logits and softmax probabilities on a throwaway tape.
    pub fn infer(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let logits = self.forward(&mut tape, &p, x)?;
        let probs = tape.softmax_channels(logits)?;
        Ok((tape.value(logits).clone(), tape.value(probs).clone()))
    }
}
