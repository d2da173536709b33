//! Probes of gradient-scale invariance.
//!
//! Three experiments live here: the exact probe (rescale the current
//! gradient with the state frozen), the first-order sensitivity study on
//! exponential-drift flows, and the step-rescale experiment where the
//! gradient stream is multiplied by a piecewise-constant factor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::{linear_fit, log_log_slope};
use crate::error::{domain, Error, Result};
use crate::flow::{integrate_flow, steady_state_init, TimeScales};
use crate::optimizer::{Method, MomentState, OptimizerConfig};
use crate::signal::GradientSignal;

/// Deviation threshold for both classifications.
pub const CLASSIFY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    ExactInvariant,
    ScaleLinear,
    Other,
}

impl Classification {
    pub fn as_str(&self) -> &'static str {
        match self {
            Classification::ExactInvariant => "exact-invariant",
            Classification::ScaleLinear => "scale-linear",
            Classification::Other => "other",
        }
    }
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Classification {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact-invariant" => Ok(Classification::ExactInvariant),
            "scale-linear" => Ok(Classification::ScaleLinear),
            "other" => Ok(Classification::Other),
            other => Err(domain(format!("unknown classification `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaleProbeResult {
    pub method: String,
    pub lambda_values: Vec<f64>,
    /// `‖R̃(λ) − R(1)‖∞` per λ.
    pub deviations: Vec<f64>,
    /// `‖R̃(λ) − λ R(1)‖∞` per λ.
    pub linear_deviations: Vec<f64>,
    pub classification: Classification,
}

fn max_abs_diff(a: &[f64], b: impl Iterator<Item = f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Evaluate `R̃ = R(state, λ g)` for every λ with `state` frozen and compare
/// against the unscaled update.
pub fn exact_invariance_probe(
    method: &Method,
    state: &MomentState,
    g: &[f64],
    lambdas: &[f64],
) -> Result<RescaleProbeResult> {
    if lambdas.is_empty() {
        return Err(domain("probe needs at least one lambda"));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(domain(format!("lambda must be positive and finite, got {bad}")));
    }
    let base = method.update(state, g)?;
    let mut deviations = Vec::with_capacity(lambdas.len());
    let mut linear_deviations = Vec::with_capacity(lambdas.len());
    let mut scaled = vec![0.0; g.len()];
    for &lambda in lambdas {
        for (s, gi) in scaled.iter_mut().zip(g) {
            *s = lambda * gi;
        }
        let r = method.update(state, &scaled)?;
        deviations.push(max_abs_diff(&r.r, base.r.iter().copied()));
        linear_deviations.push(max_abs_diff(&r.r, base.r.iter().map(|x| lambda * x)));
    }
    let classification = if deviations.iter().all(|d| *d < CLASSIFY_TOL) {
        Classification::ExactInvariant
    } else if linear_deviations.iter().all(|d| *d < CLASSIFY_TOL) {
        Classification::ScaleLinear
    } else {
        Classification::Other
    };
    Ok(RescaleProbeResult {
        method: method.name().to_string(),
        lambda_values: lambdas.to_vec(),
        deviations,
        linear_deviations,
        classification,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityStudy {
    pub delta0: Vec<f64>,
    /// Signed steady `‖R‖∞ − 1` per drift value.
    pub deviations: Vec<f64>,
    /// Log-log slope of `|‖R‖∞ − 1|` against `δ₀`.
    pub slope: f64,
    /// Signed `lim_{δ₀→0} (‖R‖∞ − 1)/δ₀`, from a linear fit in `δ₀`.
    pub coefficient: f64,
}

impl SensitivityStudy {
    pub fn abs_coefficient(&self) -> f64 {
        self.coefficient.abs()
    }
}

/// Steady `‖R‖∞ − 1` for the flow driven by `g = e^{δ₀ t}`, read at the end
/// of a run that starts on the first-order manifold and lasts well past
/// burn-in.
pub fn steady_exponential_deviation(delta0: f64, ts: &TimeScales) -> Result<f64> {
    let signal = GradientSignal::exponential(1.0, delta0);
    let init = steady_state_init(&signal, ts, 0.0)?.state;
    let t_end = ts.burn_in() + 5.0 * ts.tau_max();
    let trace = integrate_flow(&signal, ts, &init, t_end, ts.default_step(), 1)?;
    Ok(trace.last().norm_r_inf() - 1.0)
}

pub fn first_order_sensitivity(ts: &TimeScales, delta0_grid: &[f64]) -> Result<SensitivityStudy> {
    if delta0_grid.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "sensitivity fit needs >= 3 drift values, got {}",
            delta0_grid.len()
        )));
    }
    if let Some(bad) = delta0_grid.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
        return Err(domain(format!("drift values must be positive, got {bad}")));
    }
    let deviations = delta0_grid
        .iter()
        .map(|&d| steady_exponential_deviation(d, ts))
        .collect::<Result<Vec<_>>>()?;
    let abs: Vec<f64> = deviations.iter().map(|d| d.abs()).collect();
    let slope = log_log_slope(delta0_grid, &abs)?;
    let ratios: Vec<f64> = deviations
        .iter()
        .zip(delta0_grid)
        .map(|(d, x)| d / x)
        .collect();
    let (_, coefficient) = linear_fit(delta0_grid, &ratios)?;
    Ok(SensitivityStudy {
        delta0: delta0_grid.to_vec(),
        deviations,
        slope,
        coefficient,
    })
}

/// Piecewise-constant rescaling of a base gradient stream. The base signal
/// is sampled at `t = k`; the multiplier is that of the last schedule entry
/// with `step <= k`, and `1` before the first entry.
#[derive(Debug, Clone)]
pub struct StepScaleExperiment {
    pub base_signal: GradientSignal,
    pub schedule: Vec<(u64, f64)>,
    pub grid: Vec<(f64, f64)>,
    /// Template for the grid cells; β₁ and β₂ are overwritten per cell.
    pub template: OptimizerConfig,
}

impl StepScaleExperiment {
    pub fn new(
        base_signal: GradientSignal,
        schedule: Vec<(u64, f64)>,
        grid: Vec<(f64, f64)>,
        template: OptimizerConfig,
    ) -> Result<Self> {
        for &(_, m) in &schedule {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::InvalidSchedule(format!(
                    "multiplier must be positive and finite, got {m}"
                )));
            }
        }
        if schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidSchedule(
                "schedule steps must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            base_signal,
            schedule,
            grid,
            template,
        })
    }

    /// Constant unit gradient in `dim` coordinates with a single `×factor`
    /// jump at `jump_step`, over the given β grid.
    pub fn constant_jump(
        dim: usize,
        jump_step: u64,
        factor: f64,
        grid: Vec<(f64, f64)>,
        template: OptimizerConfig,
    ) -> Result<Self> {
        let base = GradientSignal::new(vec![crate::signal::ScalarSignal::Constant { c: 1.0 }; dim])?;
        Self::new(base, vec![(jump_step, factor)], grid, template)
    }

    pub fn multiplier(&self, k: u64) -> f64 {
        self.schedule
            .iter()
            .rev()
            .find(|(s, _)| *s <= k)
            .map_or(1.0, |(_, m)| *m)
    }

    /// Segment boundaries `[0, s₁, s₂, …, steps]`.
    pub fn segments(&self, steps: u64) -> Result<Vec<(u64, u64)>> {
        let mut edges = vec![0];
        edges.extend(self.schedule.iter().map(|(s, _)| *s));
        edges.push(steps);
        let segs: Vec<(u64, u64)> = edges.windows(2).map(|w| (w[0], w[1])).collect();
        if let Some((a, b)) = segs.iter().find(|(a, b)| b <= a) {
            return Err(Error::InvalidSchedule(format!(
                "segment [{a}, {b}) is shorter than one step"
            )));
        }
        Ok(segs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScaleRecord {
    pub step: u64,
    pub multiplier: f64,
    pub norm_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScaleTrace {
    pub method: Method,
    pub records: Vec<StepScaleRecord>,
}

impl StepScaleTrace {
    pub fn norms(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.norm_r)
    }
}

pub fn run_step_scale_experiment(
    exp: &StepScaleExperiment,
    method: &Method,
    steps: u64,
) -> Result<StepScaleTrace> {
    exp.segments(steps)?;
    let d = exp.base_signal.dim();
    let mut state = MomentState::zeros(vec![0.0; d]);
    let mut g = vec![0.0; d];
    let mut records = Vec::with_capacity(steps as usize);
    for k in 0..steps {
        let mult = exp.multiplier(k);
        exp.base_signal.value_into(k as f64, &mut g);
        for gi in &mut g {
            *gi *= mult;
        }
        let (next, r) = method.step(&state, &g)?;
        state = next;
        records.push(StepScaleRecord {
            step: k,
            multiplier: mult,
            norm_r: r.norm2(),
        });
    }
    Ok(StepScaleTrace {
        method: *method,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScaleCell {
    pub beta1: f64,
    pub beta2: f64,
    pub trace: StepScaleTrace,
    /// `Σ |‖R_k‖ − ‖R‖_ref|` over every post-jump segment, with the
    /// reference taken on the last step before each jump.
    pub transient_integral: f64,
    /// `max |‖R_k‖ − ‖R‖_ref|` over the same windows.
    pub peak_excursion: f64,
    /// Largest `|‖R‖_end − ‖R‖_ref|` between the end of a segment and the
    /// reference before the first jump.
    pub settle_error: f64,
}

/// Transient size of a trace relative to its pre-jump levels.
pub fn transient_summary(exp: &StepScaleExperiment, trace: &StepScaleTrace) -> Result<(f64, f64, f64)> {
    let n = trace.records.len() as u64;
    let segs = exp.segments(n)?;
    let norm = |k: u64| trace.records[k as usize].norm_r;
    let mut integral = 0.0;
    let mut peak = 0.0f64;
    let reference = norm(segs[0].1 - 1);
    let mut settle = 0.0f64;
    for w in segs.windows(2) {
        let (prev, cur) = (w[0], w[1]);
        let r = norm(prev.1 - 1);
        for k in cur.0..cur.1 {
            let e = (norm(k) - r).abs();
            integral += e;
            peak = peak.max(e);
        }
        settle = settle.max((norm(cur.1 - 1) - reference).abs());
    }
    Ok((integral, peak, settle))
}

/// Run every `(β₁, β₂)` cell of `exp` concurrently.
pub fn run_step_scale_grid(exp: &StepScaleExperiment, steps: u64) -> Result<Vec<StepScaleCell>> {
    if exp.grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    exp.grid
        .par_iter()
        .map(|&(beta1, beta2)| {
            let cfg = OptimizerConfig {
                beta1,
                beta2,
                ..exp.template
            };
            cfg.validate()?;
            let trace = run_step_scale_experiment(exp, &Method::Adam(cfg), steps)?;
            let (transient_integral, peak_excursion, settle_error) = transient_summary(exp, &trace)?;
            Ok(StepScaleCell {
                beta1,
                beta2,
                trace,
                transient_integral,
                peak_excursion,
                settle_error,
            })
        })
        .collect()
}

/// Full square grid over `axis`, row-major in β₁.
pub fn square_grid(axis: &[f64]) -> Vec<(f64, f64)> {
    axis.iter()
        .flat_map(|&b1| axis.iter().map(move |&b2| (b1, b2)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::ScalarSignal;
    use proptest::prelude::*;

    #[test]
    fn signsgd_is_exactly_invariant() {
        let state = MomentState::zeros(vec![0.0; 3]);
        let p = exact_invariance_probe(
            &Method::SignSgd { eta: 0.1 },
            &state,
            &[0.3, -2.0, 1e-9],
            &[0.1, 2.0, 10.0],
        )
        .unwrap();
        assert_eq!(p.deviations, vec![0.0; 3]);
        assert_eq!(p.classification, Classification::ExactInvariant);
    }

    #[test]
    fn gd_is_scale_linear() {
        let state = MomentState::zeros(vec![0.0; 2]);
        let p = exact_invariance_probe(&Method::Gd { eta: 0.1 }, &state, &[1.0, -2.0], &[3.0]).unwrap();
        assert_eq!(p.deviations, vec![4.0]);
        assert_eq!(p.linear_deviations, vec![0.0]);
        assert_eq!(p.classification, Classification::ScaleLinear);
    }

    #[test]
    fn adam_probe_example() {
        let state = MomentState::new(vec![1.0], vec![1.0], vec![0.0], 0).unwrap();
        let cfg = OptimizerConfig::raw(0.9, 0.9, 1e-3);
        let p = exact_invariance_probe(&Method::Adam(cfg), &state, &[1.0], &[1.0, 2.0]).unwrap();
        assert_eq!(p.deviations[0], 0.0);
        let want = 1.0 - 1.1 / 1.3f64.sqrt();
        assert!((p.deviations[1] - want).abs() < 1e-15);
        assert!((p.deviations[1] - 0.035_236_178_762_267_8).abs() < 1e-12);
        assert_eq!(p.classification, Classification::Other);
    }

    #[test]
    fn probe_rejects_bad_lambda() {
        let state = MomentState::zeros(vec![0.0]);
        let m = Method::SignSgd { eta: 1.0 };
        assert!(exact_invariance_probe(&m, &state, &[1.0], &[2.0, 0.0]).is_err());
        assert!(exact_invariance_probe(&m, &state, &[1.0], &[-1.0]).is_err());
        assert!(exact_invariance_probe(&m, &state, &[1.0], &[]).is_err());
    }

    fn ts(t1: f64, t2: f64) -> TimeScales {
        TimeScales::new(t1, t2, 1.0, 0.01).unwrap()
    }

    const GRID: [f64; 4] = [0.01, 0.02, 0.04, 0.08];

    #[test]
    fn balanced_flow_is_second_order() {
        let s = first_order_sensitivity(&ts(1.0, 1.0), &GRID).unwrap();
        assert!((s.slope - 2.0).abs() < 0.2, "{s:?}");
        assert!(s.coefficient.abs() < 0.1, "{s:?}");
    }

    #[test]
    fn unbalanced_flow_is_first_order() {
        let s = first_order_sensitivity(&ts(1.0, 2.0), &GRID).unwrap();
        assert!((s.slope - 1.0).abs() < 0.1, "{s:?}");
        assert!((s.coefficient - 1.0).abs() < 0.1, "{s:?}");
        assert!(s.deviations.iter().all(|d| *d > 0.0));

        let s = first_order_sensitivity(&ts(2.0, 1.0), &GRID).unwrap();
        assert!((s.coefficient + 1.0).abs() < 0.1, "{s:?}");
        assert!(s.deviations.iter().all(|d| *d < 0.0));
        assert!((s.abs_coefficient() - 1.0).abs() < 0.1);
    }

    #[test]
    fn sensitivity_matches_closed_form_gain() {
        let t = ts(1.0, 2.0);
        let d = steady_exponential_deviation(0.05, &t).unwrap();
        let g = crate::flow::steady_state_exponential_gains(0.05, &t).unwrap();
        assert!((d - (g.r_gain - 1.0)).abs() < 1e-8);
        assert!(first_order_sensitivity(&t, &[0.01, 0.02]).is_err());
    }

    #[test]
    fn schedule_validation() {
        let base = GradientSignal::constant(1.0);
        let cfg = OptimizerConfig::default();
        assert!(StepScaleExperiment::new(base.clone(), vec![(5, 0.0)], vec![], cfg).is_err());
        assert!(StepScaleExperiment::new(base.clone(), vec![(5, 2.0), (5, 3.0)], vec![], cfg).is_err());
        let e = StepScaleExperiment::new(base, vec![(5, 2.0)], vec![], cfg).unwrap();
        assert!(e.segments(5).is_err());
        assert_eq!(e.segments(6).unwrap(), vec![(0, 5), (5, 6)]);
        assert_eq!((e.multiplier(4), e.multiplier(5), e.multiplier(99)), (1.0, 2.0, 2.0));
        let e = StepScaleExperiment::new(GradientSignal::constant(1.0), vec![(0, 2.0)], vec![], cfg).unwrap();
        assert!(e.segments(10).is_err());
    }

    #[test]
    fn signsgd_norm_is_root_dim() {
        let base = GradientSignal::new(vec![
            ScalarSignal::Sinusoid {
                offset: 2.0,
                amplitude: 1.0,
                omega: 0.1,
                phase: 0.0,
            },
            ScalarSignal::Constant { c: -3.0 },
            ScalarSignal::Constant { c: 0.5 },
            ScalarSignal::Constant { c: 7.0 },
        ])
        .unwrap();
        let e = StepScaleExperiment::new(base, vec![(10, 100.0), (20, 1e-3)], vec![], OptimizerConfig::default())
            .unwrap();
        let tr = run_step_scale_experiment(&e, &Method::SignSgd { eta: 0.1 }, 30).unwrap();
        assert_eq!(tr.records.len(), 30);
        assert!(tr.norms().all(|n| n == 2.0));
    }

    #[test]
    fn gd_norm_jumps_by_factor() {
        let e = StepScaleExperiment::constant_jump(2, 10, 10.0, vec![], OptimizerConfig::default()).unwrap();
        let tr = run_step_scale_experiment(&e, &Method::Gd { eta: 0.1 }, 20).unwrap();
        assert_eq!(tr.records[10].norm_r, 10.0 * tr.records[9].norm_r);
        assert_eq!(tr.records[10].multiplier, 10.0);
    }

    #[test]
    fn balanced_adam_recovers_faster() {
        let cfg = OptimizerConfig::default().with_epsilon(0.0);
        let e = StepScaleExperiment::constant_jump(1, 2000, 10.0, vec![(0.95, 0.95), (0.9, 0.999)], cfg)
            .unwrap();
        let cells = run_step_scale_grid(&e, 4000).unwrap();
        let (bal, unbal) = (&cells[0], &cells[1]);
        assert!(bal.transient_integral < unbal.transient_integral);
        assert!(bal.peak_excursion < unbal.peak_excursion);
        assert!(bal.settle_error < 1e-6, "{}", bal.settle_error);
        assert!((bal.trace.records[1999].norm_r - 1.0).abs() < 1e-12);
        let last = bal.trace.records.last().unwrap().norm_r;
        assert!((last - 1.0).abs() < 0.01);
    }

    #[test]
    fn diagonal_minimizes_transient_per_row() {
        let axis = [0.9, 0.99, 0.999];
        let cfg = OptimizerConfig::default().with_epsilon(0.0);
        let e = StepScaleExperiment::constant_jump(1, 40_000, 10.0, square_grid(&axis), cfg).unwrap();
        let cells = run_step_scale_grid(&e, 80_000).unwrap();
        for row in 0..3 {
            let ints: Vec<f64> = (0..3).map(|c| cells[3 * row + c].transient_integral).collect();
            let argmin = crate::metrics::row_argmin(&ints).unwrap();
            assert_eq!(argmin, row, "row {row}: {ints:?}");
        }
        for c in &cells {
            assert!(c.settle_error < 1e-6, "{} {}: {}", c.beta1, c.beta2, c.settle_error);
        }
    }

    proptest! {
        #[test]
        fn signsgd_invariant_over_wide_lambda(
            g in prop::collection::vec(prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3], 1..8),
            log_l in -3.0f64..3.0,
        ) {
            let state = MomentState::zeros(vec![0.0; g.len()]);
            let p = exact_invariance_probe(&Method::SignSgd { eta: 1.0 }, &state, &g, &[10f64.powf(log_l)]).unwrap();
            prop_assert!(p.deviations[0] < 1e-15);
        }

        #[test]
        fn gd_deviation_is_scaled_sup_norm(
            g in prop::collection::vec(-1e3f64..1e3, 1..8),
            log_l in -3.0f64..3.0,
        ) {
            let l = 10f64.powf(log_l);
            let state = MomentState::zeros(vec![0.0; g.len()]);
            let p = exact_invariance_probe(&Method::Gd { eta: 1.0 }, &state, &g, &[l]).unwrap();
            let sup = g.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            let want = (l - 1.0).abs() * sup;
            prop_assert!((p.deviations[0] - want).abs() <= 4.0 * f64::EPSILON * want.max(l * sup));
        }
    }
}
