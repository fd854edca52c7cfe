use indexmap::IndexMap;

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let moments = params
            .iter()
            .map(|(k, p)| (k.to_string(), (vec![0.0; p.value.len()], vec![0.0; p.value.len()])))
            .collect();
        Self { config, t: 0, moments }
    }
}

/// One bias-corrected Adam update over every entry of `params`.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    for name in params.names() {
        match state.moments.get(name) {
            Some((m, _)) if m.len() == params.value(name)?.len() => {}
            Some(_) => return Err(Error::Params(format!("Adam moments for `{name}` have the wrong size"))),
            None => return Err(Error::Params(format!("no Adam state for parameter `{name}`"))),
        }
    }
    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (name, p) in params.iter_mut() {
        let (m, v) = state.moments.get_mut(name).expect("checked above");
        let grad = p.grad.data();
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut ParamStore, lr: f64) {
    for (_, p) in params.iter_mut() {
        let grad = p.grad.data().to_vec();
        for (w, g) in p.value.data_mut().iter_mut().zip(grad) {
            *w -= lr * g;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Either optimizer behind one `step` call.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamStore, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(params, AdamConfig::with_lr(lr))),
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        match self {
            Optimizer::Adam(s) => adam_step(params, s),
            Optimizer::Sgd { lr } => {
                sgd_step(params, *lr);
                Ok(())
            }
        }
    }
}
