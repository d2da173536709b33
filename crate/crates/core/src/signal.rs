//! Time-parametrized gradient signals `g(t)` and their logarithmic drift.
//!
//! Analytic kinds return exact derivatives. Tabulated and custom signals fall
//! back to central finite differences with step `1e-4 · max(1, |t|)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{domain, Result};

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// One coordinate of a gradient signal.
#[derive(Clone)]
pub enum ScalarSignal {
    Constant {
        c: f64,
    },
    /// `c · exp(rate · t)`
    Exponential {
        c: f64,
        rate: f64,
    },
    /// `c · exp(amplitude · sin(omega t + phase))`; the drift is a cosine.
    SinusoidalLog {
        c: f64,
        amplitude: f64,
        omega: f64,
        phase: f64,
    },
    /// `offset + amplitude · sin(omega t + phase)`
    Sinusoid {
        offset: f64,
        amplitude: f64,
        omega: f64,
        phase: f64,
    },
    /// `Σ coeffs[j] · t^j`
    Polynomial {
        coeffs: Vec<f64>,
    },
    /// `base(t)` times the multiplier active at `t`. `schedule` holds
    /// `(start_time, multiplier)` pairs in increasing time order; the
    /// multiplier is 1 before the first entry.
    StepScale {
        base: Box<ScalarSignal>,
        schedule: Vec<(f64, f64)>,
    },
    /// Piecewise-linear interpolation of samples, clamped outside the table.
    Tabulated {
        times: Vec<f64>,
        values: Vec<f64>,
    },
    Custom(ScalarFn),
}

impl fmt::Debug for ScalarSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.descriptor())
    }
}

/// Central-difference step used by every numeric derivative.
pub fn fd_step(t: f64) -> f64 {
    1e-4 * t.abs().max(1.0)
}

impl ScalarSignal {
    pub fn custom(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        ScalarSignal::Custom(Arc::new(f))
    }

    pub fn tabulated(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times.len() != values.len() {
            return Err(domain("tabulated signal needs >= 2 samples of equal length"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(domain("tabulated times must be strictly increasing"));
        }
        Ok(ScalarSignal::Tabulated { times, values })
    }

    pub fn step_scale(base: ScalarSignal, schedule: Vec<(f64, f64)>) -> Result<Self> {
        if schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(domain("step-scale schedule times must be strictly increasing"));
        }
        if schedule.iter().any(|&(_, m)| !(m > 0.0)) {
            return Err(domain("step-scale multipliers must be positive"));
        }
        Ok(ScalarSignal::StepScale {
            base: Box::new(base),
            schedule,
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ScalarSignal::Constant { .. } => "constant",
            ScalarSignal::Exponential { .. } => "exponential",
            ScalarSignal::SinusoidalLog { .. } => "sinusoidal-log",
            ScalarSignal::Sinusoid { .. } => "sinusoid",
            ScalarSignal::Polynomial { .. } => "polynomial",
            ScalarSignal::StepScale { .. } => "step-scale",
            ScalarSignal::Tabulated { .. } => "tabulated",
            ScalarSignal::Custom(_) => "custom",
        }
    }

    pub fn descriptor(&self) -> String {
        match self {
            ScalarSignal::Constant { c } => format!("constant(c={c})"),
            ScalarSignal::Exponential { c, rate } => format!("exponential(c={c},rate={rate})"),
            ScalarSignal::SinusoidalLog {
                c,
                amplitude,
                omega,
                phase,
            } => format!("sinusoidal-log(c={c},a={amplitude},omega={omega},phase={phase})"),
            ScalarSignal::Sinusoid {
                offset,
                amplitude,
                omega,
                phase,
            } => format!("sinusoid(offset={offset},a={amplitude},omega={omega},phase={phase})"),
            ScalarSignal::Polynomial { coeffs } => format!("polynomial({coeffs:?})"),
            ScalarSignal::StepScale { base, schedule } => {
                format!("step-scale({},{schedule:?})", base.descriptor())
            }
            ScalarSignal::Tabulated { times, .. } => format!("tabulated(n={})", times.len()),
            ScalarSignal::Custom(_) => "custom".to_string(),
        }
    }

    fn multiplier_at(schedule: &[(f64, f64)], t: f64) -> f64 {
        schedule
            .iter()
            .take_while(|(start, _)| *start <= t)
            .last()
            .map_or(1.0, |&(_, m)| m)
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            ScalarSignal::Constant { c } => *c,
            ScalarSignal::Exponential { c, rate } => c * (rate * t).exp(),
            ScalarSignal::SinusoidalLog {
                c,
                amplitude,
                omega,
                phase,
            } => c * (amplitude * (omega * t + phase).sin()).exp(),
            ScalarSignal::Sinusoid {
                offset,
                amplitude,
                omega,
                phase,
            } => offset + amplitude * (omega * t + phase).sin(),
            ScalarSignal::Polynomial { coeffs } => {
                coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
            }
            ScalarSignal::StepScale { base, schedule } => {
                Self::multiplier_at(schedule, t) * base.value(t)
            }
            ScalarSignal::Tabulated { times, values } => interpolate(times, values, t),
            ScalarSignal::Custom(f) => f(t),
        }
    }

    /// Analytic `g'(t)` when the kind has one.
    pub fn analytic_derivative(&self, t: f64) -> Option<f64> {
        Some(match self {
            ScalarSignal::Constant { .. } => 0.0,
            ScalarSignal::Exponential { rate, .. } => rate * self.value(t),
            ScalarSignal::SinusoidalLog {
                amplitude,
                omega,
                phase,
                ..
            } => self.value(t) * amplitude * omega * (omega * t + phase).cos(),
            ScalarSignal::Sinusoid {
                amplitude,
                omega,
                phase,
                ..
            } => amplitude * omega * (omega * t + phase).cos(),
            ScalarSignal::Polynomial { coeffs } => coeffs
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (j, c)| acc * t + j as f64 * c),
            ScalarSignal::StepScale { base, schedule } => {
                Self::multiplier_at(schedule, t) * base.analytic_derivative(t)?
            }
            ScalarSignal::Tabulated { .. } | ScalarSignal::Custom(_) => return None,
        })
    }

    /// Analytic `g''(t)` when the kind has one.
    pub fn analytic_second_derivative(&self, t: f64) -> Option<f64> {
        Some(match self {
            ScalarSignal::Constant { .. } => 0.0,
            ScalarSignal::Exponential { rate, .. } => rate * rate * self.value(t),
            ScalarSignal::SinusoidalLog {
                amplitude,
                omega,
                phase,
                ..
            } => {
                let arg = omega * t + phase;
                let d = amplitude * omega * arg.cos();
                self.value(t) * (d * d - amplitude * omega * omega * arg.sin())
            }
            ScalarSignal::Sinusoid {
                amplitude,
                omega,
                phase,
                ..
            } => -amplitude * omega * omega * (omega * t + phase).sin(),
            ScalarSignal::Polynomial { coeffs } => coeffs
                .iter()
                .enumerate()
                .skip(2)
                .rev()
                .fold(0.0, |acc, (j, c)| acc * t + (j * (j - 1)) as f64 * c),
            ScalarSignal::StepScale { base, schedule } => {
                Self::multiplier_at(schedule, t) * base.analytic_second_derivative(t)?
            }
            ScalarSignal::Tabulated { .. } | ScalarSignal::Custom(_) => return None,
        })
    }

    pub fn fd_derivative(&self, t: f64) -> f64 {
        let h = fd_step(t);
        (self.value(t + h) - self.value(t - h)) / (2.0 * h)
    }

    pub fn fd_second_derivative(&self, t: f64) -> f64 {
        let h = fd_step(t);
        (self.value(t + h) - 2.0 * self.value(t) + self.value(t - h)) / (h * h)
    }

    pub fn derivative(&self, t: f64) -> f64 {
        self.analytic_derivative(t)
            .unwrap_or_else(|| self.fd_derivative(t))
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        self.analytic_second_derivative(t)
            .unwrap_or_else(|| self.fd_second_derivative(t))
    }

    /// `δ(t) = g'(t) / g(t)`.
    pub fn log_drift(&self, t: f64) -> Result<f64> {
        let g = self.value(t);
        if g == 0.0 {
            return Err(domain(format!("gradient vanishes at t = {t}")));
        }
        Ok(self.derivative(t) / g)
    }

    /// `δ(t)` always through the finite-difference path.
    pub fn log_drift_fd(&self, t: f64) -> Result<f64> {
        let g = self.value(t);
        if g == 0.0 {
            return Err(domain(format!("gradient vanishes at t = {t}")));
        }
        Ok(self.fd_derivative(t) / g)
    }

    /// `δ'(t) = g''/g − δ²`.
    pub fn log_drift_derivative(&self, t: f64) -> Result<f64> {
        match self {
            ScalarSignal::Constant { .. } | ScalarSignal::Exponential { .. } => Ok(0.0),
            ScalarSignal::SinusoidalLog {
                amplitude,
                omega,
                phase,
                ..
            } => Ok(-amplitude * omega * omega * (omega * t + phase).sin()),
            _ => {
                let g = self.value(t);
                if g == 0.0 {
                    return Err(domain(format!("gradient vanishes at t = {t}")));
                }
                let delta = self.derivative(t) / g;
                Ok(self.second_derivative(t) / g - delta * delta)
            }
        }
    }
}

fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    let n = times.len();
    if t <= times[0] {
        return values[0];
    }
    if t >= times[n - 1] {
        return values[n - 1];
    }
    let hi = times.partition_point(|&x| x <= t);
    let (t0, t1) = (times[hi - 1], times[hi]);
    let w = (t - t0) / (t1 - t0);
    values[hi - 1] * (1.0 - w) + values[hi] * w
}

/// A vector-valued signal, one [`ScalarSignal`] per coordinate.
#[derive(Debug, Clone)]
pub struct GradientSignal {
    components: Vec<ScalarSignal>,
}

impl GradientSignal {
    pub fn new(components: Vec<ScalarSignal>) -> Result<Self> {
        if components.is_empty() {
            return Err(domain("gradient signal needs at least one coordinate"));
        }
        Ok(Self { components })
    }

    pub fn scalar(component: ScalarSignal) -> Self {
        Self {
            components: vec![component],
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::scalar(ScalarSignal::Constant { c })
    }

    pub fn exponential(c: f64, rate: f64) -> Self {
        Self::scalar(ScalarSignal::Exponential { c, rate })
    }

    pub fn sinusoidal_log(c: f64, amplitude: f64, omega: f64) -> Self {
        Self::scalar(ScalarSignal::SinusoidalLog {
            c,
            amplitude,
            omega,
            phase: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[ScalarSignal] {
        &self.components
    }

    pub fn kind(&self) -> &'static str {
        let first = self.components[0].kind();
        if self.components.iter().all(|c| c.kind() == first) {
            first
        } else {
            "mixed"
        }
    }

    pub fn descriptor(&self) -> String {
        self.components
            .iter()
            .map(ScalarSignal::descriptor)
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn value(&self, t: f64) -> Vec<f64> {
        self.components.iter().map(|c| c.value(t)).collect()
    }

    pub fn value_into(&self, t: f64, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.value(t);
        }
    }

    pub fn derivative(&self, t: f64) -> Vec<f64> {
        self.components.iter().map(|c| c.derivative(t)).collect()
    }

    pub fn log_drift(&self, t: f64) -> Result<Vec<f64>> {
        self.components.iter().map(|c| c.log_drift(t)).collect()
    }

    pub fn log_drift_derivative(&self, t: f64) -> Result<Vec<f64>> {
        self.components
            .iter()
            .map(|c| c.log_drift_derivative(t))
            .collect()
    }
}

impl From<ScalarSignal> for GradientSignal {
    fn from(c: ScalarSignal) -> Self {
        Self::scalar(c)
    }
}
