use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Result};
use crate::models::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerConfig::Sgd { lr, momentum }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if !ok {
            return Err(config_err!("invalid optimizer hyperparameters {self:?}"));
        }
        Ok(())
    }
}

/// Hyperparameters plus moment buffers for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// Learning rate in effect; schedules overwrite it between epochs.
    pub lr: f64,
    pub step: u64,
    /// SGD velocity or Adam first moment.
    pub m: Vec<Tensor>,
    /// Adam second moment (empty for SGD).
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParamSet) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        let v = match config {
            OptimizerConfig::Adam { .. } => zeros(),
            OptimizerConfig::Sgd { .. } => Vec::new(),
        };
        OptimizerState {
            config,
            lr: config.lr(),
            step: 0,
            m: zeros(),
            v,
        }
    }

    /// Dispatch on the configured kind.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        match self.config {
            OptimizerConfig::Sgd { .. } => sgd_step(params, grads, self),
            OptimizerConfig::Adam { .. } => adam_step(params, grads, self),
        }
    }
}

fn check<'a>(params: &ParamSet, grads: &'a [Option<Tensor>], state: &OptimizerState) -> Result<Vec<&'a Tensor>> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(usage_err!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        ));
    }
    grads
        .iter()
        .zip(params.names().iter().zip(params.tensors()))
        .map(|(g, (name, p))| match g {
            Some(g) if g.shape() == p.shape() => Ok(g),
            Some(g) => Err(usage_err!("gradient for `{name}` has shape {:?}, expected {:?}", g.shape(), p.shape())),
            None => Err(usage_err!("missing gradient for `{name}`")),
        })
        .collect()
}

/// Classical momentum: `v = mu * v + g`, `p = p - lr * v`.
pub fn sgd_step(params: &mut ParamSet, grads: &[Option<Tensor>], state: &mut OptimizerState) -> Result<()> {
    let OptimizerConfig::Sgd { momentum, .. } = state.config else {
        return Err(usage_err!("sgd_step called with {:?}", state.config));
    };
    let grads = check(params, grads, state)?;
    let lr = state.lr;
    for ((p, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut state.m) {
        for ((p, g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
    state.step += 1;
    Ok(())
}

/// Bias-corrected Adam.
pub fn adam_step(params: &mut ParamSet, grads: &[Option<Tensor>], state: &mut OptimizerState) -> Result<()> {
    let OptimizerConfig::Adam { beta1, beta2, eps, .. } = state.config else {
        return Err(usage_err!("adam_step called with {:?}", state.config));
    };
    let grads = check(params, grads, state)?;
    let t = (state.step + 1) as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    let lr = state.lr;
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(p: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push("p", Tensor::scalar(p));
        ps
    }

    fn g(v: f64) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::scalar(v))]
    }

    fn value(ps: &ParamSet) -> f64 {
        ps.get(0).data()[0]
    }

    #[test]
    fn sgd_analytic_cases() {
        let mut ps = scalar_set(1.0);
        let mut st = OptimizerState::new(OptimizerConfig::sgd(0.1, 0.0), &ps);
        sgd_step(&mut ps, &g(2.0), &mut st).unwrap();
        assert!((value(&ps) - 0.8).abs() < 1e-15);
        sgd_step(&mut ps, &g(0.0), &mut st).unwrap();
        assert!((value(&ps) - 0.8).abs() < 1e-15);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn sgd_two_step_momentum_recursion() {
        let mut ps = scalar_set(1.0);
        let mut st = OptimizerState::new(OptimizerConfig::sgd(0.1, 0.9), &ps);
        sgd_step(&mut ps, &g(2.0), &mut st).unwrap();
        sgd_step(&mut ps, &g(-1.0), &mut st).unwrap();
        // v1 = 2, p1 = 0.8; v2 = 0.9 * 2 - 1 = 0.8, p2 = 0.8 - 0.08 = 0.72
        assert!((value(&ps) - 0.72).abs() < 1e-12);
        assert!((st.m[0].data()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        for scale in [1e-3, 1.0, 1e3] {
            let mut ps = ParamSet::new();
            ps.push("w", Tensor::full(&[4], 0.5));
            let mut st = OptimizerState::new(OptimizerConfig::adam(0.01), &ps);
            let grads = vec![Some(Tensor::full(&[4], scale))];
            adam_step(&mut ps, &grads, &mut st).unwrap();
            for &p in ps.get(0).data() {
                assert!(((0.5 - p) - 0.01).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut ps = scalar_set(0.3);
        let mut st = OptimizerState::new(OptimizerConfig::adam(0.1), &ps);
        for _ in 0..5 {
            adam_step(&mut ps, &g(0.0), &mut st).unwrap();
        }
        assert_eq!(value(&ps), 0.3);
    }

    #[test]
    fn adam_five_step_trace() {
        // reference recursion written out independently of the implementation
        let (lr, b1, b2, eps) = (0.05f64, 0.9f64, 0.999f64, 1e-8f64);
        let grads = [0.5, -1.5, 2.0, 0.25, -0.75];
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (k, &gr) in grads.iter().enumerate() {
            let t = k as f64 + 1.0;
            m = b1 * m + (1.0 - b1) * gr;
            v = b2 * v + (1.0 - b2) * gr * gr;
            let mh = m / (1.0 - b1.powf(t));
            let vh = v / (1.0 - b2.powf(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        let mut ps = scalar_set(1.0);
        let mut st = OptimizerState::new(OptimizerConfig::adam(lr), &ps);
        for &gr in &grads {
            adam_step(&mut ps, &g(gr), &mut st).unwrap();
        }
        assert!((value(&ps) - p).abs() < 1e-10);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn missing_or_misshapen_gradients_are_usage_errors() {
        let mut ps = scalar_set(1.0);
        let mut st = OptimizerState::new(OptimizerConfig::sgd(0.1, 0.9), &ps);
        assert!(matches!(sgd_step(&mut ps, &[None], &mut st), Err(crate::Error::Usage(_))));
        let bad = vec![Some(Tensor::zeros(&[2]))];
        assert!(matches!(sgd_step(&mut ps, &bad, &mut st), Err(crate::Error::Usage(_))));
        let mut st = OptimizerState::new(OptimizerConfig::adam(0.1), &ps);
        assert!(matches!(adam_step(&mut ps, &[None], &mut st), Err(crate::Error::Usage(_))));
        assert!(matches!(sgd_step(&mut ps, &g(1.0), &mut st), Err(crate::Error::Usage(_))));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn config_validation_and_parsing() {
        assert!(OptimizerConfig::sgd(0.0, 0.9).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 1.0).validate().is_err());
        assert!(OptimizerConfig::adam(1e-3).validate().is_ok());
        let a: OptimizerConfig = toml::from_str("kind = \"adam\"\nlr = 0.002\n").unwrap();
        assert_eq!(a, OptimizerConfig::adam(0.002));
        assert!(toml::from_str::<OptimizerConfig>("kind = \"sgd\"\nlr = 0.1\n").is_err());
    }
}
