//! Discrete first-order optimizers.
//!
//! Every method exposes the update vector `R_k` separately from the
//! parameter step `θ_{k+1} = θ_k − η R_k`, so the update can be probed for
//! its dependence on gradient scale with the internal state held fixed.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, domain, Error, Result};

/// Hyperparameters of Adam / AdamW.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub bias_correction: bool,
    /// Decoupled (AdamW-style) decay coefficient; `0` disables it.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eta: 1e-3,
            epsilon: 1e-8,
            bias_correction: true,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    /// Raw recurrences: no bias correction, `ε = 0`, no decay.
    pub fn raw(beta1: f64, beta2: f64, eta: f64) -> Self {
        Self {
            beta1,
            beta2,
            eta,
            epsilon: 0.0,
            bias_correction: false,
            weight_decay: 0.0,
        }
    }

    pub fn with_bias_correction(mut self, on: bool) -> Self {
        self.bias_correction = on;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(domain(format!("{name} = {b} must lie in (0, 1)")));
            }
        }
        if !(self.epsilon >= 0.0) {
            return Err(domain(format!("epsilon = {} must be >= 0", self.epsilon)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(domain(format!(
                "weight_decay = {} must be >= 0",
                self.weight_decay
            )));
        }
        if !self.eta.is_finite() {
            return Err(domain("eta must be finite"));
        }
        Ok(())
    }
}

/// Per-coordinate optimizer state `(m_k, v_k, θ_k, k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub k: u64,
}

impl MomentState {
    /// `m = 0`, `v = 0` at the given parameters.
    pub fn zeros(theta: Vec<f64>) -> Self {
        let d = theta.len();
        Self {
            m: vec![0.0; d],
            v: vec![0.0; d],
            theta,
            k: 0,
        }
    }

    pub fn new(m: Vec<f64>, v: Vec<f64>, theta: Vec<f64>, k: u64) -> Result<Self> {
        check_dim(theta.len(), m.len())?;
        check_dim(theta.len(), v.len())?;
        Ok(Self { m, v, theta, k })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

/// The update vector `R_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateVector {
    pub r: Vec<f64>,
}

impl UpdateVector {
    pub fn norm2(&self) -> f64 {
        self.r.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.r.iter().fold(0.0, |acc, x| acc.max(x.abs()))
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }
}

/// `sign` with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One Adam step. Returns the advanced state and the update `R_k`.
pub fn adam_step(
    state: &MomentState,
    g: &[f64],
    config: &OptimizerConfig,
) -> Result<(MomentState, UpdateVector)> {
    config.validate()?;
    let d = state.dim();
    check_dim(d, g.len())?;
    check_dim(d, state.m.len())?;
    check_dim(d, state.v.len())?;

    let OptimizerConfig {
        beta1,
        beta2,
        eta,
        epsilon,
        bias_correction,
        weight_decay,
    } = *config;

    let k_next = state.k + 1;
    let (c1, c2) = if bias_correction {
        let e = i32::try_from(k_next).unwrap_or(i32::MAX);
        (1.0 - beta1.powi(e), 1.0 - beta2.powi(e))
    } else {
        (1.0, 1.0)
    };

    let mut m = Vec::with_capacity(d);
    let mut v = Vec::with_capacity(d);
    let mut r = Vec::with_capacity(d);
    for i in 0..d {
        let mi = beta1 * state.m[i] + (1.0 - beta1) * g[i];
        let vi = beta2 * state.v[i] + (1.0 - beta2) * g[i] * g[i];
        let denom = (vi / c2).sqrt() + epsilon;
        if denom == 0.0 {
            return Err(Error::ZeroSecondMoment { coordinate: i });
        }
        r.push((mi / c1) / denom);
        m.push(mi);
        v.push(vi);
    }

    let theta = state
        .theta
        .iter()
        .zip(&r)
        .map(|(th, ri)| {
            let stepped = th - eta * ri;
            if weight_decay > 0.0 {
                stepped * (1.0 - eta * weight_decay)
            } else {
                stepped
            }
        })
        .collect();

    Ok((
        MomentState {
            m,
            v,
            theta,
            k: k_next,
        },
        UpdateVector { r },
    ))
}

pub fn signsgd_step(g: &[f64]) -> UpdateVector {
    UpdateVector {
        r: g.iter().copied().map(sign).collect(),
    }
}

pub fn gd_step(g: &[f64]) -> UpdateVector {
    UpdateVector { r: g.to_vec() }
}

/// `R_k` of raw Adam (`ε = 0`) after `k` steps of the constant gradient `c`
/// from zero state: `sign(c) (1 − β₁ᵏ) / √(1 − β₂ᵏ)`.
pub fn constant_gradient_closed_form(c: f64, k: u64, beta1: f64, beta2: f64) -> Result<f64> {
    if k == 0 {
        return Err(domain("closed form needs k >= 1"));
    }
    if c == 0.0 {
        return Err(domain("closed form needs a nonzero gradient"));
    }
    let e = i32::try_from(k).map_err(|_| domain("k too large"))?;
    Ok(sign(c) * (1.0 - beta1.powi(e)) / (1.0 - beta2.powi(e)).sqrt())
}

/// A selectable update rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Method {
    Adam(OptimizerConfig),
    SignSgd { eta: f64 },
    Gd { eta: f64 },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Adam(c) if c.weight_decay > 0.0 => "adamw",
            Method::Adam(_) => "adam",
            Method::SignSgd { .. } => "signsgd",
            Method::Gd { .. } => "gd",
        }
    }

    /// Update vector for `g` given the frozen `state`, without advancing it.
    pub fn update(&self, state: &MomentState, g: &[f64]) -> Result<UpdateVector> {
        check_dim(state.dim(), g.len())?;
        match self {
            Method::Adam(c) => adam_step(state, g, c).map(|(_, r)| r),
            Method::SignSgd { .. } => Ok(signsgd_step(g)),
            Method::Gd { .. } => Ok(gd_step(g)),
        }
    }

    /// Advance `state` by one step.
    pub fn step(&self, state: &MomentState, g: &[f64]) -> Result<(MomentState, UpdateVector)> {
        check_dim(state.dim(), g.len())?;
        match self {
            Method::Adam(c) => adam_step(state, g, c),
            Method::SignSgd { eta } | Method::Gd { eta } => {
                let r = if matches!(self, Method::SignSgd { .. }) {
                    signsgd_step(g)
                } else {
                    gd_step(g)
                };
                let theta = state
                    .theta
                    .iter()
                    .zip(&r.r)
                    .map(|(th, ri)| th - eta * ri)
                    .collect();
                let next = MomentState {
                    m: state.m.clone(),
                    v: state.v.clone(),
                    theta,
                    k: state.k + 1,
                };
                Ok((next, r))
            }
        }
    }
}
