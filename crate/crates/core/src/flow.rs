//! The continuous-time Adam flow
//!
//! ```text
//! τ₁ m' = −m + g,   τ₂ v' = −v + g²,   θ' = −η̄ m/√v
//! ```
//!
//! integrated with a fixed-step classical Runge–Kutta scheme, plus the
//! closed-form solutions for exponential gradients that serve as oracles.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, domain, Error, Result};
use crate::optimizer::{adam_step, MomentState, OptimizerConfig};
use crate::signal::{GradientSignal, ScalarSignal};

/// Burn-in, in units of `max(τ₁, τ₂)`, after which initialization transients
/// are treated as decayed.
pub const BURN_IN_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeScales {
    pub tau1: f64,
    pub tau2: f64,
    pub eta_bar: f64,
    pub dt: f64,
}

impl TimeScales {
    pub fn new(tau1: f64, tau2: f64, eta_bar: f64, dt: f64) -> Result<Self> {
        let ts = Self {
            tau1,
            tau2,
            eta_bar,
            dt,
        };
        ts.validate()?;
        Ok(ts)
    }

    /// Recover the time scales implied by discrete `(β₁, β₂, η)` at step `dt`.
    pub fn from_betas(beta1: f64, beta2: f64, eta: f64, dt: f64) -> Result<Self> {
        Self::new(
            tau_from_beta(beta1, dt)?,
            tau_from_beta(beta2, dt)?,
            eta / dt,
            dt,
        )
    }

    pub fn validate(&self) -> Result<()> {
        for (name, x) in [
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("eta_bar", self.eta_bar),
            ("dt", self.dt),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(domain(format!("{name} = {x} must be positive and finite")));
            }
        }
        Ok(())
    }

    pub fn beta1(&self) -> f64 {
        beta_from_tau(self.tau1, self.dt)
    }

    pub fn beta2(&self) -> f64 {
        beta_from_tau(self.tau2, self.dt)
    }

    pub fn tau_max(&self) -> f64 {
        self.tau1.max(self.tau2)
    }

    pub fn burn_in(&self) -> f64 {
        BURN_IN_FACTOR * self.tau_max()
    }

    /// Default integration step `min(τ₁, τ₂) / 50`.
    pub fn default_step(&self) -> f64 {
        self.tau1.min(self.tau2) / 50.0
    }

    /// Raw Adam (`ε = 0`, no bias correction) with `β = e^{−Δt/τ}` and `η = η̄ Δt`.
    pub fn discrete_config(&self) -> OptimizerConfig {
        OptimizerConfig::raw(self.beta1(), self.beta2(), self.eta_bar * self.dt)
    }
}

/// `τ = −Δt / ln β`.
pub fn tau_from_beta(beta: f64, dt: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(domain(format!("beta = {beta} must lie in (0, 1)")));
    }
    if !(dt > 0.0) {
        return Err(domain(format!("dt = {dt} must be positive")));
    }
    Ok(-dt / beta.ln())
}

/// `β = e^{−Δt/τ}`.
pub fn beta_from_tau(tau: f64, dt: f64) -> f64 {
    (-dt / tau).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub t: f64,
}

impl FlowState {
    pub fn new(m: Vec<f64>, v: Vec<f64>, t: f64) -> Result<Self> {
        check_dim(m.len(), v.len())?;
        let theta = vec![0.0; m.len()];
        Ok(Self { m, v, theta, t })
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// `R = m / √v`, coordinate-wise.
    pub fn update(&self) -> Vec<f64> {
        self.m
            .iter()
            .zip(&self.v)
            .map(|(m, v)| m / v.sqrt())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowDerivative {
    pub dm: Vec<f64>,
    pub dv: Vec<f64>,
    pub dtheta: Vec<f64>,
}

/// Right-hand side of the flow at `state.t`.
pub fn flow_rhs(
    state: &FlowState,
    signal: &GradientSignal,
    ts: &TimeScales,
) -> Result<FlowDerivative> {
    let d = state.dim();
    check_dim(d, signal.dim())?;
    check_dim(d, state.v.len())?;
    let g = signal.value(state.t);
    rhs_with_gradient(&state.m, &state.v, &g, ts, state.t)
}

fn rhs_with_gradient(
    m: &[f64],
    v: &[f64],
    g: &[f64],
    ts: &TimeScales,
    t: f64,
) -> Result<FlowDerivative> {
    let d = m.len();
    let mut out = FlowDerivative {
        dm: Vec::with_capacity(d),
        dv: Vec::with_capacity(d),
        dtheta: Vec::with_capacity(d),
    };
    for i in 0..d {
        if !(v[i] > 0.0) {
            return Err(Error::NonPositiveSecondMoment {
                t,
                coordinate: i,
                value: v[i],
            });
        }
        out.dm.push((g[i] - m[i]) / ts.tau1);
        out.dv.push((g[i] * g[i] - v[i]) / ts.tau2);
        out.dtheta.push(-ts.eta_bar * m[i] / v[i].sqrt());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSample {
    pub t: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub r: Vec<f64>,
    pub theta: Vec<f64>,
}

impl FlowSample {
    fn from_state(s: &FlowState) -> Self {
        Self {
            t: s.t,
            m: s.m.clone(),
            v: s.v.clone(),
            r: s.update(),
            theta: s.theta.clone(),
        }
    }

    pub fn norm_r(&self) -> f64 {
        self.r.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn norm_r_inf(&self) -> f64 {
        self.r.iter().fold(0.0, |a, x| a.max(x.abs()))
    }
}

/// Uniformly spaced samples of a flow or of a discrete run viewed on the
/// flow's time axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    pub samples: Vec<FlowSample>,
    pub time_scales: TimeScales,
    pub signal: String,
    /// Time between consecutive samples.
    pub spacing: f64,
}

impl FlowTrace {
    pub fn t0(&self) -> f64 {
        self.samples.first().map_or(0.0, |s| s.t)
    }

    pub fn last(&self) -> &FlowSample {
        self.samples.last().expect("trace is never empty")
    }

    /// Samples with `t − t₀ ≥ burn_in`.
    pub fn after(&self, burn_in: f64) -> impl Iterator<Item = &FlowSample> {
        let start = self.t0() + burn_in;
        // small slack so a sample landing exactly on the boundary is kept
        let slack = 1e-9 * self.spacing;
        self.samples.iter().filter(move |s| s.t >= start - slack)
    }

    pub fn dim(&self) -> usize {
        self.samples[0].m.len()
    }
}

fn axpy(out: &mut [f64], base: &[f64], a: f64, x: &[f64]) {
    for ((o, b), xi) in out.iter_mut().zip(base).zip(x) {
        *o = b + a * xi;
    }
}

/// Integrate the flow from `init` to `t_end` with classical RK4 at a step of
/// (at most) `h`, recording every `stride`-th step.
///
/// The step is shrunk so that an integer number of steps lands on `t_end`.
pub fn integrate_flow(
    signal: &GradientSignal,
    ts: &TimeScales,
    init: &FlowState,
    t_end: f64,
    h: f64,
    stride: usize,
) -> Result<FlowTrace> {
    ts.validate()?;
    let d = init.dim();
    check_dim(d, signal.dim())?;
    check_dim(d, init.v.len())?;
    check_dim(d, init.theta.len())?;
    if !(h > 0.0) {
        return Err(domain(format!("step h = {h} must be positive")));
    }
    if !(t_end > init.t) {
        return Err(domain(format!("t_end = {t_end} must exceed t0 = {}", init.t)));
    }
    if stride == 0 {
        return Err(domain("stride must be >= 1"));
    }
    if let Some(i) = init.v.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::NonPositiveSecondMoment {
            t: init.t,
            coordinate: i,
            value: init.v[i],
        });
    }

    let span = t_end - init.t;
    let n = (span / h - 1e-9).ceil().max(1.0) as usize;
    let h = span / n as f64;

    let mut state = init.clone();
    let mut samples = Vec::with_capacity(n / stride + 2);
    samples.push(FlowSample::from_state(&state));

    let mut g = vec![0.0; d];
    let (mut m_tmp, mut v_tmp) = (vec![0.0; d], vec![0.0; d]);
    let t0 = init.t;
    for step in 1..=n {
        let t = t0 + (step - 1) as f64 * h;
        signal.value_into(t, &mut g);
        let k1 = rhs_with_gradient(&state.m, &state.v, &g, ts, t)?;

        signal.value_into(t + 0.5 * h, &mut g);
        axpy(&mut m_tmp, &state.m, 0.5 * h, &k1.dm);
        axpy(&mut v_tmp, &state.v, 0.5 * h, &k1.dv);
        let k2 = rhs_with_gradient(&m_tmp, &v_tmp, &g, ts, t + 0.5 * h)?;

        axpy(&mut m_tmp, &state.m, 0.5 * h, &k2.dm);
        axpy(&mut v_tmp, &state.v, 0.5 * h, &k2.dv);
        let k3 = rhs_with_gradient(&m_tmp, &v_tmp, &g, ts, t + 0.5 * h)?;

        signal.value_into(t + h, &mut g);
        axpy(&mut m_tmp, &state.m, h, &k3.dm);
        axpy(&mut v_tmp, &state.v, h, &k3.dv);
        let k4 = rhs_with_gradient(&m_tmp, &v_tmp, &g, ts, t + h)?;

        let w = h / 6.0;
        for i in 0..d {
            state.m[i] += w * (k1.dm[i] + 2.0 * k2.dm[i] + 2.0 * k3.dm[i] + k4.dm[i]);
            state.v[i] += w * (k1.dv[i] + 2.0 * k2.dv[i] + 2.0 * k3.dv[i] + k4.dv[i]);
            state.theta[i] +=
                w * (k1.dtheta[i] + 2.0 * k2.dtheta[i] + 2.0 * k3.dtheta[i] + k4.dtheta[i]);
        }
        state.t = t0 + step as f64 * h;
        if let Some(i) = state.v.iter().position(|v| !(*v > 0.0)) {
            return Err(Error::NonPositiveSecondMoment {
                t: state.t,
                coordinate: i,
                value: state.v[i],
            });
        }
        if step % stride == 0 {
            samples.push(FlowSample::from_state(&state));
        }
    }

    Ok(FlowTrace {
        samples,
        time_scales: *ts,
        signal: signal.descriptor(),
        spacing: h * stride as f64,
    })
}

/// Integrate the scalar relaxation `τ x' = −x + y(t)` with an exponential
/// integrator: over each step
/// `x_{n+1} = ȳ_n + e^{−h/τ} (x_n − ȳ_n)`, where `ȳ_n` is the
/// `e^{−(t_{n+1}−s)/τ}`-weighted mean of `y` over the step, evaluated by
/// three-point Gauss–Legendre quadrature. The decaying mode is propagated
/// exactly and a constant input is a fixed point bit for bit.
/// Returns `(t, x)` at every step, starting at `(t0, x0)`.
pub fn integrate_relaxation(
    y: &ScalarSignal,
    tau: f64,
    x0: f64,
    t0: f64,
    t_end: f64,
    h: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(tau > 0.0) || !(h > 0.0) || !(t_end > t0) {
        return Err(domain("relaxation needs tau > 0, h > 0, t_end > t0"));
    }
    let span = t_end - t0;
    let n = (span / h - 1e-9).ceil().max(1.0) as usize;
    let h = span / n as f64;
    let decay = (-h / tau).exp();

    let r = (0.6f64).sqrt();
    let nodes = [0.5 * (1.0 - r), 0.5, 0.5 * (1.0 + r)];
    let gl = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];
    let mut w = [0.0; 3];
    for j in 0..3 {
        w[j] = gl[j] * (-(1.0 - nodes[j]) * h / tau).exp();
    }
    let total: f64 = w.iter().sum();
    for wj in &mut w {
        *wj /= total;
    }

    let mut out = Vec::with_capacity(n + 1);
    let mut x = x0;
    out.push((t0, x));
    for step in 1..=n {
        let t = t0 + (step - 1) as f64 * h;
        let y0 = y.value(t);
        let mut ybar = y0;
        for j in 0..3 {
            ybar += w[j] * (y.value(t + nodes[j] * h) - y0);
        }
        x = ybar + decay * (x - ybar);
        out.push((t0 + step as f64 * h, x));
    }
    Ok(out)
}

/// Exact asymptotic ratios `m/g`, `v/g²` and `R/sign(g)` for `g = c e^{δ₀ t}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialGains {
    pub m_gain: f64,
    pub v_gain: f64,
    pub r_gain: f64,
}

pub fn steady_state_exponential_gains(delta0: f64, ts: &TimeScales) -> Result<ExponentialGains> {
    let dm = 1.0 + ts.tau1 * delta0;
    let dv = 1.0 + 2.0 * ts.tau2 * delta0;
    if !(dm > 0.0) || !(dv > 0.0) {
        return Err(domain(format!(
            "drift {delta0} crosses a pole: 1 + τ₁δ₀ = {dm}, 1 + 2τ₂δ₀ = {dv}"
        )));
    }
    let m_gain = 1.0 / dm;
    let v_gain = 1.0 / dv;
    Ok(ExponentialGains {
        m_gain,
        v_gain,
        r_gain: m_gain / v_gain.sqrt(),
    })
}

/// Exact `(m(t), v(t))` for `g = c e^{rate t}` from `(m0, v0)` at `t0`:
/// steady exponential mode plus the decaying homogeneous part.
pub fn exponential_flow_solution(
    c: f64,
    rate: f64,
    ts: &TimeScales,
    m0: f64,
    v0: f64,
    t0: f64,
    t: f64,
) -> Result<(f64, f64)> {
    let gains = steady_state_exponential_gains(rate, ts)?;
    let mode_m = |s: f64| gains.m_gain * c * (rate * s).exp();
    let mode_v = |s: f64| gains.v_gain * c * c * (2.0 * rate * s).exp();
    let m = mode_m(t) + (m0 - mode_m(t0)) * (-(t - t0) / ts.tau1).exp();
    let v = mode_v(t) + (v0 - mode_v(t0)) * (-(t - t0) / ts.tau2).exp();
    Ok((m, v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyInit {
    pub state: FlowState,
    /// Set when the first-order `v` was non-positive and had to be clamped.
    pub v_clamped: bool,
}

/// Initialize `(m, v)` on the first-order tracking manifold
/// `m = g(1 − τ₁δ)`, `v = g²(1 − 2τ₂δ)` to skip most of the transient.
pub fn steady_state_init(signal: &GradientSignal, ts: &TimeScales, t0: f64) -> Result<SteadyInit> {
    let g = signal.value(t0);
    let delta = signal.log_drift(t0)?;
    let mut clamped = false;
    let mut m = Vec::with_capacity(g.len());
    let mut v = Vec::with_capacity(g.len());
    for (gi, di) in g.iter().zip(&delta) {
        m.push(gi * (1.0 - ts.tau1 * di));
        let mut vi = gi * gi * (1.0 - 2.0 * ts.tau2 * di);
        if !(vi > 0.0) {
            vi = 1e-12 * gi * gi;
            clamped = true;
        }
        v.push(vi);
    }
    Ok(SteadyInit {
        state: FlowState::new(m, v, t0)?,
        v_clamped: clamped,
    })
}

/// Run raw Adam with `β = e^{−Δt/τ}`, `η = η̄Δt` on `g_k = g(t0 + kΔt)` and
/// report it on the flow's time axis: sample `k` holds `(m_k, v_k, R_k)`.
pub fn discrete_trace(
    signal: &GradientSignal,
    ts: &TimeScales,
    init: &FlowState,
    steps: usize,
) -> Result<FlowTrace> {
    let cfg = ts.discrete_config();
    let mut state = MomentState::new(init.m.clone(), init.v.clone(), init.theta.clone(), 0)?;
    check_dim(state.dim(), signal.dim())?;
    let mut samples = Vec::with_capacity(steps + 1);
    samples.push(FlowSample::from_state(init));
    for k in 0..steps {
        let t = init.t + k as f64 * ts.dt;
        let g = signal.value(t);
        let (next, r) = adam_step(&state, &g, &cfg)?;
        state = next;
        samples.push(FlowSample {
            t: init.t + (k + 1) as f64 * ts.dt,
            m: state.m.clone(),
            v: state.v.clone(),
            r: r.r,
            theta: state.theta.clone(),
        });
    }
    Ok(FlowTrace {
        samples,
        time_scales: *ts,
        signal: signal.descriptor(),
        spacing: ts.dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ts(tau1: f64, tau2: f64) -> TimeScales {
        TimeScales::new(tau1, tau2, 1.0, 0.01).unwrap()
    }

    #[test]
    fn tau_beta_conversions() {
        assert_relative_eq!(tau_from_beta((-1.0f64).exp(), 1.0).unwrap(), 1.0, epsilon = 1e-15);
        // -1 / ln(0.9)
        assert_relative_eq!(
            tau_from_beta(0.9, 1.0).unwrap(),
            9.491_221_581_029_905,
            max_relative = 1e-14
        );
        let tau = tau_from_beta(0.999, 0.01).unwrap();
        assert!((beta_from_tau(tau, 0.01) - 0.999).abs() < 1e-14);
        for b in [0.0, 1.0, -0.5, 1.5] {
            assert!(tau_from_beta(b, 1.0).is_err());
        }
        assert!(tau_from_beta(0.9, 0.0).is_err());
    }

    #[test]
    fn time_scales_reject_nonpositive() {
        assert!(TimeScales::new(0.0, 1.0, 1.0, 0.1).is_err());
        assert!(TimeScales::new(1.0, 1.0, -1.0, 0.1).is_err());
        let t = TimeScales::from_betas(0.9, 0.99, 0.01, 1.0).unwrap();
        assert_relative_eq!(t.beta1(), 0.9, epsilon = 1e-14);
        assert_relative_eq!(t.beta2(), 0.99, epsilon = 1e-14);
        assert_relative_eq!(t.eta_bar, 0.01, epsilon = 1e-15);
    }

    #[test]
    fn rhs_examples() {
        let t = TimeScales::new(2.0, 3.0, 0.5, 0.1).unwrap();
        let s = FlowState::new(vec![0.0], vec![1.0], 0.0).unwrap();
        let d = flow_rhs(&s, &GradientSignal::constant(1.0), &t).unwrap();
        assert_eq!(d.dm, vec![0.5]);
        assert_eq!(d.dv, vec![0.0]);

        // fixed point of the moment equations
        let s = FlowState::new(vec![-2.0], vec![4.0], 0.0).unwrap();
        let d = flow_rhs(&s, &GradientSignal::constant(-2.0), &t).unwrap();
        assert_eq!(d.dm, vec![0.0]);
        assert_eq!(d.dv, vec![0.0]);
        assert_eq!(d.dtheta, vec![0.5]);

        let s = FlowState::new(vec![1.0], vec![0.0], 0.0).unwrap();
        assert!(matches!(
            flow_rhs(&s, &GradientSignal::constant(1.0), &t),
            Err(Error::NonPositiveSecondMoment { .. })
        ));
    }

    #[test]
    fn rhs_on_exponential_mode() {
        let t = TimeScales::new(1.5, 0.7, 1.0, 0.1).unwrap();
        let m = 1.0 / (1.0 + 0.1 * 1.5);
        let v = 1.0 / (1.0 + 0.2 * 0.7);
        let s = FlowState::new(vec![m], vec![v], 0.0).unwrap();
        let d = flow_rhs(&s, &GradientSignal::exponential(1.0, 0.1), &t).unwrap();
        assert_relative_eq!(d.dm[0], 0.1 * m, epsilon = 1e-15);
        assert_relative_eq!(d.dv[0], 0.2 * v, epsilon = 1e-15);
    }

    #[test]
    fn constant_signal_converges_to_fixed_point() {
        let t = ts(1.0, 1.0);
        let init = FlowState::new(vec![0.0], vec![1.0], 0.0).unwrap();
        let tr = integrate_flow(&GradientSignal::constant(1.0), &t, &init, 20.0, 0.02, 1).unwrap();
        let last = tr.last();
        assert_relative_eq!(last.t, 20.0, epsilon = 1e-12);
        assert!((last.m[0] - 1.0).abs() < 1e-8);
        assert!((last.v[0] - 1.0).abs() < 1e-8);
        assert!((last.r[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn exponential_signal_reaches_steady_gain() {
        let t = ts(1.0, 1.0);
        let sig = GradientSignal::exponential(1.0, 0.05);
        let init = steady_state_init(&sig, &t, 0.0).unwrap().state;
        let tr = integrate_flow(&sig, &t, &init, 40.0, t.default_step(), 5).unwrap();
        for s in tr.after(t.burn_in()) {
            let g = sig.value(s.t)[0];
            assert!((s.m[0] / g - 1.0 / 1.05).abs() < 1e-6, "t={}", s.t);
        }
    }

    #[test]
    fn integration_matches_closed_form_for_arbitrary_init() {
        let t = ts(0.8, 2.5);
        let sig = GradientSignal::exponential(-1.7, 0.07);
        let init = FlowState::new(vec![0.3], vec![0.4], 0.0).unwrap();
        let tr = integrate_flow(&sig, &t, &init, 30.0, 0.01, 10).unwrap();
        for s in &tr.samples {
            let (m, v) =
                exponential_flow_solution(-1.7, 0.07, &t, 0.3, 0.4, 0.0, s.t).unwrap();
            assert!((s.m[0] - m).abs() < 1e-9 * m.abs().max(1.0));
            assert!((s.v[0] - v).abs() < 1e-9 * v.abs().max(1.0));
        }
    }

    #[test]
    fn trace_spacing_is_uniform() {
        let t = ts(1.0, 2.0);
        let init = FlowState::new(vec![1.0, -1.0], vec![1.0, 1.0], 0.0).unwrap();
        let sig = GradientSignal::new(vec![
            ScalarSignal::Constant { c: 1.0 },
            ScalarSignal::Constant { c: -2.0 },
        ])
        .unwrap();
        let tr = integrate_flow(&sig, &t, &init, 3.0, 0.07, 3).unwrap();
        for w in tr.samples.windows(2) {
            assert!(w[1].t > w[0].t);
            assert!((w[1].t - w[0].t - tr.spacing).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_gradient_aborts() {
        let t = ts(1.0, 1.0);
        // v decays once g vanishes; the start value is tiny so it crosses quickly
        let sig = GradientSignal::constant(0.0);
        let init = FlowState::new(vec![0.0], vec![1e-300], 0.0).unwrap();
        let r = integrate_flow(&sig, &t, &init, 1e6, 100.0, 1);
        assert!(matches!(r, Err(Error::NonPositiveSecondMoment { .. })));

        let init = FlowState::new(vec![0.0], vec![0.0], 0.0).unwrap();
        assert!(integrate_flow(&sig, &t, &init, 1.0, 0.1, 1).is_err());
    }

    #[test]
    fn gains_examples() {
        let g = steady_state_exponential_gains(0.0, &ts(3.0, 0.5)).unwrap();
        assert_eq!((g.m_gain, g.v_gain, g.r_gain), (1.0, 1.0, 1.0));

        let g = steady_state_exponential_gains(0.1, &ts(1.0, 1.0)).unwrap();
        assert_relative_eq!(g.m_gain, 1.0 / 1.1, epsilon = 1e-15);
        assert_relative_eq!(g.v_gain, 1.0 / 1.2, epsilon = 1e-15);
        // sqrt(1.2) / 1.1
        assert_relative_eq!(g.r_gain, 0.995_859_195_463_938_3, epsilon = 1e-15);
        assert!((g.r_gain - 1.0).abs() < 0.005);

        let g = steady_state_exponential_gains(0.1, &ts(1.0, 2.0)).unwrap();
        // sqrt(1.4) / 1.1
        assert_relative_eq!(g.r_gain, 1.075_650_869_654_475_5, epsilon = 1e-15);

        assert!(steady_state_exponential_gains(-1.0, &ts(1.0, 1.0)).is_err());
        assert!(steady_state_exponential_gains(-0.3, &ts(1.0, 2.0)).is_err());
    }

    #[test]
    fn steady_init_examples() {
        let t = ts(1.0, 1.0);
        let s = steady_state_init(&GradientSignal::constant(-3.0), &t, 0.0).unwrap();
        assert_eq!(s.state.m, vec![-3.0]);
        assert_eq!(s.state.v, vec![9.0]);
        assert!(!s.v_clamped);

        let s = steady_state_init(&GradientSignal::exponential(1.0, 0.05), &t, 0.0).unwrap();
        assert_relative_eq!(s.state.m[0], 0.95, epsilon = 1e-15);
        assert_relative_eq!(s.state.v[0], 0.9, epsilon = 1e-15);

        assert!(steady_state_init(&GradientSignal::constant(0.0), &t, 0.0).is_err());

        let s = steady_state_init(&GradientSignal::exponential(1.0, 1.0), &t, 0.0).unwrap();
        assert!(s.v_clamped);
        assert!(s.state.v[0] > 0.0);
    }

    #[test]
    fn relaxation_tracks_linear_input_exactly() {
        let y = ScalarSignal::Polynomial {
            coeffs: vec![0.0, 1.0],
        };
        let xs = integrate_relaxation(&y, 1.0, -1.0, 0.0, 10.0, 0.05).unwrap();
        for (t, x) in xs {
            assert!((x - (t - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn moment_equations_are_linear() {
        let t = ts(0.7, 1.9);
        let a = ScalarSignal::SinusoidalLog {
            c: 1.0,
            amplitude: 0.3,
            omega: 0.8,
            phase: 0.0,
        };
        let b = ScalarSignal::Exponential { c: 0.5, rate: -0.04 };
        let (a2, b2) = (a.clone(), b.clone());
        let sum = ScalarSignal::custom(move |s| a2.value(s) + b2.value(s));
        for tau in [t.tau1, t.tau2] {
            let xa = integrate_relaxation(&a, tau, 0.2, 0.0, 15.0, 0.01).unwrap();
            let xb = integrate_relaxation(&b, tau, -0.1, 0.0, 15.0, 0.01).unwrap();
            let xs = integrate_relaxation(&sum, tau, 0.1, 0.0, 15.0, 0.01).unwrap();
            for ((p, q), r) in xa.iter().zip(&xb).zip(&xs) {
                assert!((p.1 + q.1 - r.1).abs() < 1e-10);
            }
        }
        // v channel: input is g²
        let (a3, b3) = (a.clone(), b.clone());
        let sq_a = ScalarSignal::custom(move |s| a3.value(s).powi(2));
        let sq_b = ScalarSignal::custom(move |s| b3.value(s).powi(2));
        let (a4, b4) = (a, b);
        let sq_sum = ScalarSignal::custom(move |s| a4.value(s).powi(2) + b4.value(s).powi(2));
        let xa = integrate_relaxation(&sq_a, t.tau2, 1.0, 0.0, 15.0, 0.01).unwrap();
        let xb = integrate_relaxation(&sq_b, t.tau2, 0.25, 0.0, 15.0, 0.01).unwrap();
        let xs = integrate_relaxation(&sq_sum, t.tau2, 1.25, 0.0, 15.0, 0.01).unwrap();
        for ((p, q), r) in xa.iter().zip(&xb).zip(&xs) {
            assert!((p.1 + q.1 - r.1).abs() < 1e-10);
        }
    }

    #[test]
    fn discrete_trace_uses_exponential_betas() {
        let t = TimeScales::new(1.0, 2.0, 0.5, 0.1).unwrap();
        let sig = GradientSignal::constant(2.0);
        let init = FlowState::new(vec![2.0], vec![4.0], 0.0).unwrap();
        let tr = discrete_trace(&sig, &t, &init, 5).unwrap();
        assert_eq!(tr.samples.len(), 6);
        for s in &tr.samples[1..] {
            assert_relative_eq!(s.r[0], 1.0, epsilon = 1e-15);
        }
        assert_relative_eq!(tr.last().theta[0], -5.0 * 0.05, epsilon = 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn steady_update_is_independent_of_gradient_scale(
            c in prop_oneof![1e-4f64..1e4, -1e4f64..-1e-4],
            rate in -0.08f64..0.08,
            tau2 in 0.5f64..2.0,
        ) {
            let t = TimeScales::new(1.0, tau2, 1.0, 0.01).unwrap();
            let unit = GradientSignal::exponential(c.signum(), rate);
            let scaled = GradientSignal::exponential(c, rate);
            let end = t.burn_in() + 5.0;
            let h = t.default_step();
            let a = integrate_flow(&unit, &t, &steady_state_init(&unit, &t, 0.0).unwrap().state, end, h, 10).unwrap();
            let b = integrate_flow(&scaled, &t, &steady_state_init(&scaled, &t, 0.0).unwrap().state, end, h, 10).unwrap();
            for (x, y) in a.after(t.burn_in()).zip(b.after(t.burn_in())) {
                prop_assert!((x.r[0] - y.r[0]).abs() < 1e-8);
            }
        }
    }
}
