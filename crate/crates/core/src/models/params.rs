use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{fill_normal, stream};
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles for a [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, index: usize) -> Var {
        self.0[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Replace one handle, e.g. to probe a single tensor with finite differences.
    pub fn with(mut self, index: usize, var: Var) -> Bound {
        self.0[index] = var;
        self
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Put every tensor on the tape; `trainable` decides whether gradients flow.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect())
    }

    /// SHA-256 over names, shapes and the exact bits of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Named differences in tensor names or shapes; `None` when compatible.
    pub fn layout_diff(&self, other: &ParamSet) -> Option<String> {
        let mut s = String::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            match other.by_name(n) {
                None => {
                    let _ = writeln!(s, "  missing tensor `{n}` {:?}", t.shape());
                }
                Some(o) if o.shape() != t.shape() => {
                    let _ = writeln!(s, "  tensor `{n}`: expected {:?}, found {:?}", t.shape(), o.shape());
                }
                Some(_) => {}
            }
        }
        for (n, t) in other.names.iter().zip(&other.tensors) {
            if self.by_name(n).is_none() {
                let _ = writeln!(s, "  unexpected tensor `{n}` {:?}", t.shape());
            }
        }
        (!s.is_empty()).then_some(s)
    }

    /// Copy values from a set with the same layout (order may differ).
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if let Some(diff) = self.layout_diff(other) {
            return Err(Error::CheckpointMismatch(diff));
        }
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            *t = other.by_name(n).expect("layout checked").clone();
        }
        Ok(())
    }
}

fn name_tag(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// 2-d convolution with its weight and bias stored in a [`ParamSet`].
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    weight: usize,
    bias: usize,
    spec: ConvSpec,
}

/// Weight initialisation for [`Conv::build`].
#[derive(Clone, Copy, Debug)]
pub struct Init {
    /// Multiplier on the fan-in (Kaiming) standard deviation `sqrt(2 / fan_in)`.
    pub weight_scale: f64,
    pub bias: f64,
}

impl Init {
    pub const KAIMING: Init = Init {
        weight_scale: 1.0,
        bias: 0.0,
    };

    pub const fn scaled(weight_scale: f64, bias: f64) -> Self {
        Init { weight_scale, bias }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
}

impl ConvShape {
    /// Stride-1 "same" convolution.
    pub const fn same(cin: usize, cout: usize, kernel: usize, dilation: usize) -> Self {
        ConvShape {
            cin,
            cout,
            kernel,
            spec: ConvSpec::same(kernel, dilation),
        }
    }
}

impl Conv {
    /// Register `<name>.weight` and `<name>.bias`. Values depend only on
    /// `(seed, name)`.
    pub fn build(ps: &mut ParamSet, seed: u64, name: &str, shape: ConvShape, init: Init) -> Conv {
        let ConvShape { cin, cout, kernel, spec } = shape;
        let fan_in = cin * kernel * kernel;
        let mut w = vec![0.0; cout * fan_in];
        let std = init.weight_scale * (2.0 / fan_in as f64).sqrt();
        if std > 0.0 {
            fill_normal(&mut stream(seed, &[name_tag(name)]), std, &mut w);
        }
        let weight = ps.push(
            format!("{name}.weight"),
            Tensor::new(vec![cout, cin, kernel, kernel], w).expect("conv weight shape"),
        );
        let bias = ps.push(format!("{name}.bias"), Tensor::full(&[cout], init.bias));
        Conv { weight, bias, spec }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), p.var(self.bias), self.spec)
    }

    pub fn weight_index(&self) -> usize {
        self.weight
    }

    pub fn bias_index(&self) -> usize {
        self.bias
    }
}
