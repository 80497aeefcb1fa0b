//! First-order optimizers, selectable by name.
//!
//! | name    | update                                                     |
//! |---------|------------------------------------------------------------|
//! | `sgd`   | `w -= lr * (g + wd * w)`                                   |
//! | `adam`  | Adam on `g + wd * w` (coupled L2)                          |
//! | `adamw` | `w -= lr * wd * w`, then Adam on `g` (decoupled decay)     |
//!
//! Frozen parameters are skipped entirely. Gradients are zeroed after every
//! step.

use std::fmt;

use crate::error::{NumericsError, Result};
use crate::param::Parameter;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First moments, one buffer per parameter (empty until the first step).
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(NumericsError::pre("optimizer", format!("learning_rate={learning_rate} must be positive")));
        }
        if !(weight_decay >= 0.0) {
            return Err(NumericsError::pre("optimizer", format!("weight_decay={weight_decay} must be >= 0")));
        }
        Ok(OptimizerState {
            kind,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: Vec::new(),
            second: Vec::new(),
            step_count: 0,
        })
    }

    fn ensure_moments(&mut self, params: &[Parameter]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.first.len() != params.len() || self.first.iter().zip(params).any(|(m, p)| m.len() != p.numel()) {
            return Err(NumericsError::dim("optimizer_step", "moment buffers do not match the parameter set"));
        }
        Ok(())
    }
}

pub trait Optimizer: Send {
    fn name(&self) -> &'static str;
    fn state(&self) -> &OptimizerState;
    fn update(&mut self, params: &mut [Parameter]) -> Result<()>;

    /// Applies one update to every non-frozen parameter and zeroes all grads.
    fn step(&mut self, params: &mut [Parameter]) -> Result<()> {
        for p in params.iter() {
            if !p.frozen && !p.grad.is_finite() {
                return Err(NumericsError::NonFinite { op: "optimizer_step" });
            }
        }
        self.update(params)?;
        for p in params.iter_mut() {
            if !p.frozen && !p.value.is_finite() {
                return Err(NumericsError::NonFinite { op: "optimizer_step" });
            }
            p.zero_grad();
        }
        Ok(())
    }
}

pub struct Sgd(OptimizerState);

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }
    fn state(&self) -> &OptimizerState {
        &self.0
    }
    fn update(&mut self, params: &mut [Parameter]) -> Result<()> {
        let (lr, wd) = (self.0.learning_rate, self.0.weight_decay);
        for p in params.iter_mut().filter(|p| !p.frozen) {
            let g = p.grad.data().to_vec();
            for (w, g) in p.value.data_mut().iter_mut().zip(g) {
                *w -= lr * (g + wd * *w);
            }
        }
        self.0.step_count += 1;
        Ok(())
    }
}

pub struct Adam(OptimizerState);
pub struct AdamW(OptimizerState);

fn adam_update(st: &mut OptimizerState, params: &mut [Parameter], decoupled: bool) -> Result<()> {
    st.ensure_moments(params)?;
    st.step_count += 1;
    let t = st.step_count as i32;
    let bc1 = 1.0 - st.beta1.powi(t);
    let bc2 = 1.0 - st.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if p.frozen {
            continue;
        }
        let grad = p.grad.data().to_vec();
        let (m, v) = (&mut st.first[i], &mut st.second[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let mut g = grad[j];
            if decoupled {
                *w -= st.learning_rate * st.weight_decay * *w;
            } else {
                g += st.weight_decay * *w;
            }
            m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g;
            v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= st.learning_rate * mhat / (vhat.sqrt() + st.eps);
        }
    }
    Ok(())
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }
    fn state(&self) -> &OptimizerState {
        &self.0
    }
    fn update(&mut self, params: &mut [Parameter]) -> Result<()> {
        adam_update(&mut self.0, params, false)
    }
}

impl Optimizer for AdamW {
    fn name(&self) -> &'static str {
        "adamw"
    }
    fn state(&self) -> &OptimizerState {
        &self.0
    }
    fn update(&mut self, params: &mut [Parameter]) -> Result<()> {
        adam_update(&mut self.0, params, true)
    }
}

type Ctor = fn(OptimizerState) -> Box<dyn Optimizer>;

const REGISTRY: &[(&str, OptimizerKind, Ctor)] = &[
    ("sgd", OptimizerKind::Sgd, |s| Box::new(Sgd(s))),
    ("adam", OptimizerKind::Adam, |s| Box::new(Adam(s))),
    ("adamw", OptimizerKind::AdamW, |s| Box::new(AdamW(s))),
];

pub fn optimizer_names() -> impl Iterator<Item = &'static str> {
    REGISTRY.iter().map(|(n, _, _)| *n)
}

/// Builds a registered optimizer by name.
pub fn build_optimizer(name: &str, learning_rate: f64, weight_decay: f64) -> Result<Box<dyn Optimizer>> {
    let (_, kind, ctor) = REGISTRY
        .iter()
        .find(|(n, _, _)| *n == name)
        .ok_or_else(|| NumericsError::pre("optimizer", format!("unknown optimizer '{name}' (known: sgd, adam, adamw)")))?;
    Ok(ctor(OptimizerState::new(*kind, learning_rate, weight_decay)?))
}
