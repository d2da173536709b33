//! Logarithmic drift `δ = g'/g`, its interval bounds `Λ`, `Λ'`, the
//! first-order predictors for `m`, `v` and `R`, and numerical checks of the
//! remainder bounds.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::flow::{integrate_relaxation, FlowTrace, TimeScales};
use crate::optimizer::sign;
use crate::signal::{GradientSignal, ScalarSignal};

/// Dense-sampling resolution for interval suprema.
pub const SUP_SAMPLES: usize = 10_001;
/// Safety inflation applied to sampled suprema of the drift.
pub const SUP_INFLATION: f64 = 1.01;

pub fn log_drift(signal: &GradientSignal, t: f64) -> Result<Vec<f64>> {
    signal.log_drift(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftProfile {
    /// `Λ = sup ‖δ‖∞`
    pub lambda_bound: f64,
    /// `Λ' = sup ‖δ'‖∞`
    pub lambda_prime_bound: f64,
    pub t0: f64,
    pub t1: f64,
}

impl DriftProfile {
    /// `Λ² + Λ'`, the scale of the expansion remainders.
    pub fn second_order_scale(&self) -> f64 {
        self.lambda_bound * self.lambda_bound + self.lambda_prime_bound
    }
}

fn grid(t0: f64, t1: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = (t1 - t0) / (n - 1) as f64;
    (0..n).map(move |i| if i + 1 == n { t1 } else { t0 + i as f64 * step })
}

pub fn drift_bounds(signal: &GradientSignal, t0: f64, t1: f64) -> Result<DriftProfile> {
    if !(t1 > t0) {
        return Err(domain(format!("empty interval [{t0}, {t1}]")));
    }
    let mut lambda = 0.0f64;
    let mut lambda_prime = 0.0f64;
    for t in grid(t0, t1, SUP_SAMPLES) {
        for (d, dp) in signal
            .log_drift(t)?
            .into_iter()
            .zip(signal.log_drift_derivative(t)?)
        {
            lambda = lambda.max(d.abs());
            lambda_prime = lambda_prime.max(dp.abs());
        }
    }
    Ok(DriftProfile {
        lambda_bound: SUP_INFLATION * lambda,
        lambda_prime_bound: SUP_INFLATION * lambda_prime,
        t0,
        t1,
    })
}

fn sup_abs(f: impl Fn(f64) -> f64, t0: f64, t1: f64) -> f64 {
    grid(t0, t1, SUP_SAMPLES).fold(0.0, |acc, t| acc.max(f(t).abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderPrediction {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub r: Vec<f64>,
}

/// `m ≈ g(1 − τ₁δ)`, `v ≈ g²(1 − 2τ₂δ)`, `R ≈ sign(g)(1 + (τ₂ − τ₁)δ)`.
pub fn predict_first_order(
    signal: &GradientSignal,
    ts: &TimeScales,
    t: f64,
) -> Result<FirstOrderPrediction> {
    let g = signal.value(t);
    let delta = signal.log_drift(t)?;
    let mut p = FirstOrderPrediction {
        m: Vec::with_capacity(g.len()),
        v: Vec::with_capacity(g.len()),
        r: Vec::with_capacity(g.len()),
    };
    for (gi, di) in g.iter().zip(&delta) {
        p.m.push(gi * (1.0 - ts.tau1 * di));
        p.v.push(gi * gi * (1.0 - 2.0 * ts.tau2 * di));
        p.r.push(sign(*gi) * (1.0 + (ts.tau2 - ts.tau1) * di));
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    M,
    V,
    R,
}

impl Channel {
    pub fn as_str(&self) -> &'static str {
        match self {
            Channel::M => "m",
            Channel::V => "v",
            Channel::R => "R",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRemainder {
    pub channel: Channel,
    /// Sup over post-burn-in samples of `|actual − predicted|`.
    pub max_abs_remainder: f64,
    /// Same, divided by `|g|` (m), `g²` (v) or 1 (R).
    pub max_rel_remainder: f64,
    /// `max_abs_remainder / (Λ² + Λ')`: the measured stand-in for the
    /// constant in front of the second-order term. `None` when `Λ² + Λ' = 0`.
    pub measured_constant: Option<f64>,
    /// Explicit bound at the start of the post-burn-in window (m and v only).
    pub bound: Option<f64>,
    /// Whether the explicit bound held at every sample of the trace.
    pub bound_holds: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderReport {
    pub drift: DriftProfile,
    pub channels: Vec<ChannelRemainder>,
    /// Set when the report belongs to an exponential-drift study.
    pub delta0: Option<f64>,
    /// Slope of log(relative remainder) against log Λ across a study.
    pub fitted_order: Option<f64>,
}

impl RemainderReport {
    pub fn channel(&self, c: Channel) -> &ChannelRemainder {
        self.channels
            .iter()
            .find(|x| x.channel == c)
            .expect("all channels are always present")
    }
}

/// Compare a trace from `integrate_flow` with the first-order predictions.
pub fn measure_remainder(
    trace: &FlowTrace,
    signal: &GradientSignal,
    ts: &TimeScales,
) -> Result<RemainderReport> {
    let t0 = trace.t0();
    let t1 = trace.last().t;
    let burn_in = ts.burn_in();
    if trace.after(burn_in).next().is_none() {
        return Err(Error::EmptyWindow {
            burn_in_end: t0 + burn_in,
        });
    }
    let drift = drift_bounds(signal, t0, t1)?;
    let scale = drift.second_order_scale();

    // Explicit remainder bounds for the moment channels, per coordinate.
    let first = &trace.samples[0];
    let g0 = signal.value(t0);
    let delta0 = signal.log_drift(t0)?;
    let d = signal.dim();
    let mut b_sup = vec![0.0; d];
    for (i, c) in signal.components().iter().enumerate() {
        b_sup[i] = SUP_INFLATION * sup_abs(|t| c.value(t), t0, t1);
    }
    let m_offset: Vec<f64> = (0..d)
        .map(|i| (first.m[i] - g0[i] + ts.tau1 * g0[i] * delta0[i]).abs())
        .collect();
    let v_offset: Vec<f64> = (0..d)
        .map(|i| (first.v[i] - g0[i] * g0[i] + 2.0 * ts.tau2 * g0[i] * g0[i] * delta0[i]).abs())
        .collect();
    let m_bound = |i: usize, t: f64| {
        m_offset[i] * (-(t - t0) / ts.tau1).exp() + ts.tau1 * ts.tau1 * b_sup[i] * scale
    };
    let v_bound = |i: usize, t: f64| {
        v_offset[i] * (-(t - t0) / ts.tau2).exp()
            + 4.0 * ts.tau2 * ts.tau2 * b_sup[i] * b_sup[i] * scale
    };

    let mut m_holds = true;
    let mut v_holds = true;
    let mut abs = [0.0f64; 3];
    let mut rel = [0.0f64; 3];
    let start = t0 + burn_in - 1e-9 * trace.spacing;
    for s in &trace.samples {
        let p = predict_first_order(signal, ts, s.t)?;
        let g = signal.value(s.t);
        for i in 0..d {
            let rm = (s.m[i] - p.m[i]).abs();
            let rv = (s.v[i] - p.v[i]).abs();
            let rr = (s.r[i] - p.r[i]).abs();
            // integrator noise floor
            let tol = 1e-9 * (1.0 + g[i].abs());
            m_holds &= rm <= m_bound(i, s.t) + tol;
            v_holds &= rv <= v_bound(i, s.t) + tol * (1.0 + g[i].abs());
            if s.t >= start {
                abs[0] = abs[0].max(rm);
                abs[1] = abs[1].max(rv);
                abs[2] = abs[2].max(rr);
                rel[0] = rel[0].max(rm / g[i].abs());
                rel[1] = rel[1].max(rv / (g[i] * g[i]));
                rel[2] = rel[2].max(rr);
            }
        }
    }
    let bound_start = t0 + burn_in;
    let m_b = (0..d).map(|i| m_bound(i, bound_start)).fold(0.0, f64::max);
    let v_b = (0..d).map(|i| v_bound(i, bound_start)).fold(0.0, f64::max);
    let constant = |x: f64| (scale > 0.0).then(|| x / scale);

    Ok(RemainderReport {
        drift,
        channels: vec![
            ChannelRemainder {
                channel: Channel::M,
                max_abs_remainder: abs[0],
                max_rel_remainder: rel[0],
                measured_constant: constant(abs[0]),
                bound: Some(m_b),
                bound_holds: Some(m_holds),
            },
            ChannelRemainder {
                channel: Channel::V,
                max_abs_remainder: abs[1],
                max_rel_remainder: rel[1],
                measured_constant: constant(abs[1]),
                bound: Some(v_b),
                bound_holds: Some(v_holds),
            },
            ChannelRemainder {
                channel: Channel::R,
                max_abs_remainder: abs[2],
                max_rel_remainder: rel[2],
                measured_constant: constant(abs[2]),
                bound: None,
                bound_holds: None,
            },
        ],
        delta0: None,
        fitted_order: None,
    })
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::DegenerateFit(format!(
            "need >= 2 paired points, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all abscissae coincide".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::DegenerateFit(
            "log-log fit needs strictly positive values".into(),
        ));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly).map(|(s, _)| s)
}

/// Run exponential-drift flows (`g = e^{δ₀ t}`) over `delta0_grid`, measure
/// remainders after burn-in and fit their order in `Λ` per channel.
///
/// Returns one report per grid point; every report carries the fitted order
/// of the R channel.
pub fn remainder_order_study(
    delta0_grid: &[f64],
    ts: &TimeScales,
) -> Result<(Vec<RemainderReport>, [f64; 3])> {
    if delta0_grid.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "order study needs >= 3 drift values, got {}",
            delta0_grid.len()
        )));
    }
    let mut reports = Vec::with_capacity(delta0_grid.len());
    for &delta0 in delta0_grid {
        let signal = GradientSignal::exponential(1.0, delta0);
        let init = crate::flow::steady_state_init(&signal, ts, 0.0)?.state;
        let t_end = ts.burn_in() + 5.0 * ts.tau_max();
        let trace =
            crate::flow::integrate_flow(&signal, ts, &init, t_end, ts.default_step(), 10)?;
        let mut report = measure_remainder(&trace, &signal, ts)?;
        report.delta0 = Some(delta0);
        reports.push(report);
    }
    let lambdas: Vec<f64> = reports.iter().map(|r| r.drift.lambda_bound).collect();
    let mut orders = [0.0; 3];
    for (k, c) in [Channel::M, Channel::V, Channel::R].into_iter().enumerate() {
        let rem: Vec<f64> = reports
            .iter()
            .map(|r| r.channel(c).max_rel_remainder)
            .collect();
        orders[k] = log_log_slope(&lambdas, &rem)?;
    }
    for r in &mut reports {
        r.fitted_order = Some(orders[2]);
    }
    Ok((reports, orders))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingCheck {
    pub max_residual: f64,
    /// `τ² sup|y''|`, the transient-free part of the bound.
    pub bound: f64,
    /// Smallest `bound(t) + roundoff − |r(t)|` over the samples.
    pub min_margin: f64,
    pub pass: bool,
}

/// Integrate `τx' = −x + y` from `x0` and check the tracking residual
/// `r = x − (y − τy')` against
/// `|x₀ − y(t₀) + τy'(t₀)| e^{−(t−t₀)/τ} + τ² sup|y''|` at every step.
pub fn tracking_check(
    y: &ScalarSignal,
    tau: f64,
    x0: f64,
    t0: f64,
    t1: f64,
) -> Result<TrackingCheck> {
    let h = tau / 200.0;
    let xs = integrate_relaxation(y, tau, x0, t0, t1, h)?;
    let mut curvature = sup_abs(|t| y.second_derivative(t), t0, t1);
    for &(t, _) in &xs {
        curvature = curvature.max(y.second_derivative(t).abs());
    }
    let offset = (x0 - y.value(t0) + tau * y.derivative(t0)).abs();
    let tail = tau * tau * curvature;

    let mut max_residual = 0.0f64;
    let mut min_margin = f64::INFINITY;
    for (n, (t, x)) in xs.into_iter().enumerate() {
        let yv = y.value(t);
        let lead = yv - tau * y.derivative(t);
        let r = (x - lead).abs();
        let bound = offset * (-(t - t0) / tau).exp() + tail;
        // rounding accumulated over n contracting steps, a few ulps each
        let scale = x.abs().max(yv.abs()).max(lead.abs()).max(offset);
        let roundoff = 8.0 * (n + 1) as f64 * f64::EPSILON * scale;
        max_residual = max_residual.max(r);
        min_margin = min_margin.min(bound + roundoff - r);
    }
    Ok(TrackingCheck {
        max_residual,
        bound: tail,
        min_margin,
        pass: min_margin >= 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{integrate_flow, steady_state_exponential_gains, steady_state_init, FlowState};
    use approx::assert_relative_eq;

    fn ts(tau1: f64, tau2: f64) -> TimeScales {
        TimeScales::new(tau1, tau2, 1.0, 0.01).unwrap()
    }

    #[test]
    fn bounds_examples() {
        let p = drift_bounds(&GradientSignal::exponential(1.0, 0.05), 0.0, 10.0).unwrap();
        assert_relative_eq!(p.lambda_bound, 0.05 * 1.01, epsilon = 1e-15);
        assert_eq!(p.lambda_prime_bound, 0.0);

        let p = drift_bounds(&GradientSignal::constant(3.0), 0.0, 10.0).unwrap();
        assert_eq!((p.lambda_bound, p.lambda_prime_bound), (0.0, 0.0));

        let s = GradientSignal::scalar(ScalarSignal::Sinusoid {
            offset: 2.0,
            amplitude: 1.0,
            omega: 1.0,
            phase: 0.0,
        });
        let p = drift_bounds(&s, 0.0, 2.0 * std::f64::consts::PI).unwrap();
        // analytic sup of |cos t / (2 + sin t)| is 1/sqrt(3)
        assert!((p.lambda_bound - 1.01 / 3f64.sqrt()).abs() < 1e-6);

        assert!(drift_bounds(&GradientSignal::constant(1.0), 1.0, 1.0).is_err());
    }

    #[test]
    fn prediction_examples() {
        let t = ts(1.0, 2.0);
        let p = predict_first_order(&GradientSignal::constant(-2.0), &t, 0.0).unwrap();
        assert_eq!((p.m[0], p.v[0], p.r[0]), (-2.0, 4.0, -1.0));

        let sig = GradientSignal::exponential(1.0, 0.1);
        let p = predict_first_order(&sig, &t, 0.0).unwrap();
        assert_relative_eq!(p.r[0], 1.1, epsilon = 1e-15);

        // balanced time scales: sign(g) regardless of drift
        for d in [-0.3, 0.01, 0.2] {
            let p = predict_first_order(&GradientSignal::exponential(-5.0, d), &ts(1.7, 1.7), 2.0)
                .unwrap();
            assert_eq!(p.r[0], -1.0);
        }
    }

    #[test]
    fn prediction_error_is_second_order_in_drift() {
        for (a, b) in [(1.0, 1.0), (1.0, 2.0), (2.0, 1.0), (0.5, 3.0)] {
            let t = ts(a, b);
            for i in 1..=10 {
                let d = 0.01 * i as f64;
                let exact = steady_state_exponential_gains(d, &t).unwrap();
                let half = steady_state_exponential_gains(d / 2.0, &t).unwrap();
                let pairs = [
                    (exact.m_gain, half.m_gain, 1.0 - a * d, 1.0 - a * d / 2.0),
                    (exact.v_gain, half.v_gain, 1.0 - 2.0 * b * d, 1.0 - b * d),
                    (exact.r_gain, half.r_gain, 1.0 + (b - a) * d, 1.0 + (b - a) * d / 2.0),
                ];
                for (g, gh, p, ph) in pairs {
                    assert!((g - p).abs() <= 2.0 * (gh - ph).abs() * 4.0, "{a} {b} {d}");
                }
            }
        }
    }

    #[test]
    fn constant_signal_has_no_remainder() {
        let t = ts(1.0, 1.5);
        let sig = GradientSignal::constant(2.5);
        let init = FlowState::new(vec![2.5], vec![6.25], 0.0).unwrap();
        let tr = integrate_flow(&sig, &t, &init, 40.0, t.default_step(), 5).unwrap();
        let rep = measure_remainder(&tr, &sig, &t).unwrap();
        for c in &rep.channels {
            assert!(c.max_abs_remainder < 1e-8, "{c:?}");
            assert!(c.bound_holds.unwrap_or(true));
            assert!(c.measured_constant.is_none());
        }
    }

    #[test]
    fn exponential_remainders_match_closed_form() {
        let t = ts(1.0, 1.0);
        let mut r = Vec::new();
        for d in [0.05, 0.025] {
            let sig = GradientSignal::exponential(1.0, d);
            let init = steady_state_init(&sig, &t, 0.0).unwrap().state;
            let tr = integrate_flow(&sig, &t, &init, 15.0, t.default_step(), 5).unwrap();
            let rep = measure_remainder(&tr, &sig, &t).unwrap();
            assert!(rep.channel(Channel::M).bound_holds.unwrap());
            assert!(rep.channel(Channel::V).bound_holds.unwrap());
            r.push(rep.channel(Channel::R).max_abs_remainder);
        }
        // |sqrt(1.1)/1.05 - 1| and |sqrt(1.05)/1.025 - 1|
        assert!((r[0] - 0.001_134_430_314_141_4).abs() < 1e-6);
        assert!((r[1] - 0.000_297_486_247_843_98).abs() < 1e-6);
        assert!((r[0] / r[1] - 3.813).abs() < 0.02);
    }

    #[test]
    fn remainder_needs_post_burn_in_samples() {
        let t = ts(1.0, 1.0);
        let sig = GradientSignal::constant(1.0);
        let init = FlowState::new(vec![1.0], vec![1.0], 0.0).unwrap();
        let tr = integrate_flow(&sig, &t, &init, 5.0, 0.02, 1).unwrap();
        assert!(matches!(
            measure_remainder(&tr, &sig, &t),
            Err(Error::EmptyWindow { .. })
        ));
    }

    #[test]
    fn order_study_recovers_second_order() {
        let (reports, orders) = remainder_order_study(&[0.01, 0.02, 0.04, 0.08], &ts(1.0, 1.0)).unwrap();
        assert_eq!(reports.len(), 4);
        for o in orders {
            assert!((o - 2.0).abs() < 0.2, "{orders:?}");
        }
        assert!(remainder_order_study(&[0.01, 0.02], &ts(1.0, 1.0)).is_err());
    }

    #[test]
    fn tracking_examples() {
        let ramp = ScalarSignal::Polynomial {
            coeffs: vec![0.0, 1.0],
        };
        let c = tracking_check(&ramp, 1.0, -1.0, 0.0, 20.0).unwrap();
        assert!(c.max_residual < 1e-12);
        assert!(c.pass);

        let c = tracking_check(&ScalarSignal::Constant { c: 3.0 }, 0.7, 3.0, 0.0, 14.0).unwrap();
        assert_eq!(c.max_residual, 0.0);
        assert!(c.pass);

        let sine = ScalarSignal::Sinusoid {
            offset: 0.0,
            amplitude: 1.0,
            omega: 1.0,
            phase: 0.0,
        };
        // start on the leading-order curve so only the tail term remains
        let c = tracking_check(&sine, 0.5, -0.5, 0.0, 10.0).unwrap();
        assert!(c.pass);
        assert!((c.bound - 0.25).abs() < 1e-6);
        // steady residual amplitude is tau^2 / sqrt(1 + tau^2)
        assert!(c.max_residual <= 0.25);
        assert!(c.max_residual > 0.2);
    }

    #[test]
    fn tracking_bound_battery() {
        let signals = vec![
            ScalarSignal::Polynomial {
                coeffs: vec![1.0, -0.5, 0.2, -0.01],
            },
            ScalarSignal::Sinusoid {
                offset: 1.0,
                amplitude: 2.0,
                omega: 3.0,
                phase: 0.4,
            },
            ScalarSignal::Exponential { c: 2.0, rate: 0.3 },
            ScalarSignal::Exponential { c: -1.0, rate: -0.7 },
            ScalarSignal::SinusoidalLog {
                c: 1.0,
                amplitude: 0.5,
                omega: 2.0,
                phase: 0.0,
            },
        ];
        for y in &signals {
            for tau in [0.1, 0.5, 2.0] {
                for x0 in [-3.0, 0.0, 5.0] {
                    let c = tracking_check(y, tau, x0, 0.0, 20.0 * tau).unwrap();
                    assert!(c.pass, "{y:?} tau={tau} x0={x0} margin={}", c.min_margin);
                }
            }
        }
    }

    #[test]
    fn fits() {
        let (s, b) = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert_relative_eq!(s, 2.0, epsilon = 1e-15);
        assert_relative_eq!(b, 1.0, epsilon = 1e-15);
        assert_relative_eq!(
            log_log_slope(&[1.0, 2.0, 4.0], &[3.0, 12.0, 48.0]).unwrap(),
            2.0,
            epsilon = 1e-14
        );
        assert!(linear_fit(&[1.0, 1.0], &[0.0, 1.0]).is_err());
        assert!(log_log_slope(&[1.0, 2.0], &[0.0, 1.0]).is_err());
    }
}
