//! `scale-lab` command-line driver.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on runtime or parse
//! errors. `SCALE_LAB_THREADS` caps the worker pool used for grid cells.

pub mod manifest;
pub mod plot;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use scale_lab::drift::measure_remainder;
use scale_lab::flow::{integrate_flow, steady_state_exponential_gains, steady_state_init, FlowState, TimeScales};
use scale_lab::invariance::{exact_invariance_probe, run_step_scale_grid, square_grid, StepScaleExperiment};
use scale_lab::io;
use scale_lab::metrics::{combine_reports, ema_smooth, grid_report, OmegaGrid, OscillationMetric};
use scale_lab::optimizer::{Method, MomentState, OptimizerConfig};
use scale_lab::signal::{GradientSignal, ScalarSignal};
use scale_lab::training::{make_problem, sweep_grid, ProblemKind, SweepOptions};

use manifest::OutputDir;
use plot::{line_chart, thin, Series};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const THREADS_ENV: &str = "SCALE_LAB_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lab(#[from] scale_lab::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "scale-lab", version, about = "Gradient-scale experiments for Adam and friends")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the continuous-time moment flow for a named signal.
    Flow(FlowArgs),
    /// Rescale probes and the step-rescale experiment.
    Probe(ProbeArgs),
    /// Train over a β grid and test whether the diagonal minimizes oscillation.
    Sweep(SweepArgs),
    /// Recompute rates and p-values from stored or hand-typed ω grids.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SignalKind {
    /// g = c
    Const,
    /// g = c·exp(δ₀ t)
    Exp,
    /// g = c·exp(a sin(ω t))
    Sinlog,
    /// g = c + a sin(ω t)
    Sin,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitKind {
    /// Start on the first-order tracking manifold.
    Steady,
    /// m = 0, v = g(t0)².
    Cold,
}

#[derive(Debug, Args)]
pub struct FlowArgs {
    #[arg(long, value_enum)]
    pub signal: SignalKind,
    /// Growth rate of the exponential signal.
    #[arg(long, default_value_t = 0.05, allow_hyphen_values = true)]
    pub delta0: f64,
    /// Signal scale (or offset for `sin`).
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub c: f64,
    #[arg(long, default_value_t = 0.5)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 0.5)]
    pub omega: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub tau1: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub tau2: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub eta_bar: f64,
    /// Discrete step used to report the equivalent β₁, β₂.
    #[arg(long, default_value_t = 0.01, value_parser = positive)]
    pub dt: f64,
    #[arg(long, default_value_t = 50.0, value_parser = positive)]
    pub t_end: f64,
    /// RK4 step; defaults to min(τ₁, τ₂)/50.
    #[arg(long, value_parser = positive)]
    pub h: Option<f64>,
    /// Record every n-th step.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub stride: u64,
    #[arg(long, value_enum, default_value_t = InitKind::Steady)]
    pub init: InitKind,
    #[arg(long, default_value = "scale-lab-out/flow")]
    pub out: PathBuf,
    /// Also write an SVG of R(t).
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodKind {
    Adam,
    Adamw,
    Signsgd,
    Gd,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, value_enum, default_value_t = MethodKind::Adam)]
    pub method: MethodKind,
    /// Positive rescaling factors.
    #[arg(long, value_delimiter = ',', value_parser = positive, default_value = "0.1,2,10")]
    pub lambdas: Vec<f64>,
    /// Current gradient.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "1")]
    pub g: Vec<f64>,
    /// Frozen first moment (defaults to ones).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub m: Option<Vec<f64>>,
    /// Frozen second moment (defaults to ones).
    #[arg(long, value_delimiter = ',')]
    pub v: Option<Vec<f64>>,
    /// Steps already taken (matters with bias correction).
    #[arg(long, default_value_t = 0)]
    pub k: u64,
    #[arg(long, default_value_t = 0.9, value_parser = beta)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999, value_parser = beta)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-3, value_parser = positive)]
    pub eta: f64,
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    pub epsilon: f64,
    #[arg(long)]
    pub bias_correction: bool,
    #[arg(long, default_value_t = 0.01, value_parser = non_negative)]
    pub weight_decay: f64,
    /// Run the step-rescale experiment over the β grid instead.
    #[arg(long)]
    pub step_scale: bool,
    /// Step-rescale: constant-gradient dimension.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub dim: u64,
    /// Step-rescale: step at which the multiplier switches.
    #[arg(long, default_value_t = 40_000)]
    pub jump_step: u64,
    #[arg(long, default_value_t = 10.0, value_parser = positive)]
    pub factor: f64,
    #[arg(long, default_value_t = 80_000)]
    pub steps: u64,
    #[arg(long, value_delimiter = ',', value_parser = beta, default_value = "0.9,0.99,0.999")]
    pub betas: Vec<f64>,
    #[arg(long, default_value = "scale-lab-out/probe")]
    pub out: PathBuf,
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProblemArg {
    Quadratic,
    Logistic,
    Mlp,
}

impl From<ProblemArg> for ProblemKind {
    fn from(p: ProblemArg) -> Self {
        match p {
            ProblemArg::Quadratic => ProblemKind::Quadratic,
            ProblemArg::Logistic => ProblemKind::Logistic,
            ProblemArg::Mlp => ProblemKind::Mlp,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Omega1,
    Omega2,
}

impl From<MetricArg> for OscillationMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Omega1 => OscillationMetric::Omega1,
            MetricArg::Omega2 => OscillationMetric::Omega2,
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// One or more problems; their diagonal counts are also pooled.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "logistic")]
    pub problem: Vec<ProblemArg>,
    /// Number of seeds (0, 1, ..).
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub seeds: u64,
    #[arg(long, default_value_t = 5000, value_parser = clap::value_parser!(u64).range(3..))]
    pub steps: u64,
    /// EMA window applied to the ‖R_k‖ series.
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    pub window: u64,
    #[arg(long, value_enum, default_value_t = MetricArg::Omega1)]
    pub metric: MetricArg,
    #[arg(long, value_delimiter = ',', value_parser = beta, default_value = "0.9,0.99,0.999")]
    pub betas: Vec<f64>,
    #[arg(long, default_value_t = 1e-3, value_parser = positive)]
    pub eta: f64,
    #[arg(long, default_value_t = 1e-8, value_parser = non_negative)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    /// Seed of the synthetic dataset.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Skip writing per-cell traces.
    #[arg(long)]
    pub no_traces: bool,
    #[arg(long, default_value = "scale-lab-out/sweep")]
    pub out: PathBuf,
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Grid CSVs with columns beta1, beta2, [seed], omega1 and/or omega2.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = MetricArg::Omega1)]
    pub metric: MetricArg,
    /// Treat each single grid as this many seeds sharing its argmin pattern.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub replicate_seeds: Option<u64>,
    /// Write a summary CSV here as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.trim().parse::<f64>().map_err(|_| format!("`{s}` is not a number"))
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    let x = parse_f64(s)?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{x} must be positive and finite"))
    }
}

fn non_negative(s: &str) -> std::result::Result<f64, String> {
    let x = parse_f64(s)?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{x} must be non-negative and finite"))
    }
}

fn beta(s: &str) -> std::result::Result<f64, String> {
    let x = parse_f64(s)?;
    if (0.0..1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("beta {x} must lie in [0, 1)"))
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> scale_lab::Result<()>) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn cfg_pairs(pairs: &[(&str, String)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn build_signal(a: &FlowArgs) -> GradientSignal {
    match a.signal {
        SignalKind::Const => GradientSignal::constant(a.c),
        SignalKind::Exp => GradientSignal::exponential(a.c, a.delta0),
        SignalKind::Sinlog => GradientSignal::sinusoidal_log(a.c, a.amplitude, a.omega),
        SignalKind::Sin => GradientSignal::scalar(ScalarSignal::Sinusoid {
            offset: a.c,
            amplitude: a.amplitude,
            omega: a.omega,
            phase: 0.0,
        }),
    }
}

fn cmd_flow(a: &FlowArgs, out: &mut (dyn Write + Send)) -> CliResult<()> {
    let start = Instant::now();
    let ts = TimeScales::new(a.tau1, a.tau2, a.eta_bar, a.dt)?;
    let signal = build_signal(a);
    let init = match a.init {
        InitKind::Steady => steady_state_init(&signal, &ts, 0.0)?.state,
        InitKind::Cold => {
            let g = signal.value(0.0);
            FlowState::new(vec![0.0; g.len()], g.iter().map(|x| x * x).collect(), 0.0)?
        }
    };
    let h = a.h.unwrap_or_else(|| ts.default_step());
    let trace = integrate_flow(&signal, &ts, &init, a.t_end, h, a.stride as usize)?;

    let mut dir = OutputDir::create(&a.out)?;
    dir.write("flow_trace.csv", &csv_bytes(|w| io::write_flow_trace(w, &trace))?)?;
    match measure_remainder(&trace, &signal, &ts) {
        Ok(rep) => {
            dir.write("remainder.csv", &csv_bytes(|w| io::write_remainder_report(w, &rep))?)?;
            for c in &rep.channels {
                writeln!(
                    out,
                    "remainder {:<2} max_abs={:.6e} max_rel={:.6e}",
                    c.channel.as_str(),
                    c.max_abs_remainder,
                    c.max_rel_remainder
                )?;
            }
        }
        Err(scale_lab::Error::EmptyWindow { burn_in_end }) => {
            eprintln!("warning: t-end {} does not pass burn-in {burn_in_end}; no remainder report", a.t_end);
        }
        Err(e) => return Err(e.into()),
    }
    if a.plot {
        let pts: Vec<(f64, f64)> = trace.samples.iter().map(|s| (s.t, s.r[0])).collect();
        let svg = line_chart(
            &format!("R(t), {}", trace.signal),
            "t",
            "R",
            &[Series {
                label: "R".into(),
                points: thin(pts, 2000),
            }],
        );
        dir.write("flow.svg", svg.as_bytes())?;
    }

    let last = trace.last();
    writeln!(out, "signal {}", trace.signal)?;
    writeln!(
        out,
        "tau1={} tau2={} beta1={:.6} beta2={:.6} burn_in={}",
        ts.tau1,
        ts.tau2,
        ts.beta1(),
        ts.beta2(),
        ts.burn_in()
    )?;
    writeln!(out, "final t={} R={:.9}", last.t, last.r[0])?;
    if let SignalKind::Exp = a.signal {
        if let Ok(g) = steady_state_exponential_gains(a.delta0, &ts) {
            writeln!(out, "steady gain R={:.9}", g.r_gain)?;
        }
    }
    let config = cfg_pairs(&[
        ("signal", format!("{:?}", a.signal).to_lowercase()),
        ("delta0", a.delta0.to_string()),
        ("c", a.c.to_string()),
        ("amplitude", a.amplitude.to_string()),
        ("omega", a.omega.to_string()),
        ("tau1", a.tau1.to_string()),
        ("tau2", a.tau2.to_string()),
        ("eta_bar", a.eta_bar.to_string()),
        ("dt", a.dt.to_string()),
        ("t_end", a.t_end.to_string()),
        ("h", h.to_string()),
        ("stride", a.stride.to_string()),
        ("init", format!("{:?}", a.init).to_lowercase()),
    ]);
    dir.finish("flow", config, Vec::new(), start.elapsed())?;
    Ok(())
}

fn cmd_probe(a: &ProbeArgs, out: &mut (dyn Write + Send)) -> CliResult<()> {
    let start = Instant::now();
    let cfg = OptimizerConfig {
        beta1: a.beta1,
        beta2: a.beta2,
        eta: a.eta,
        epsilon: a.epsilon,
        bias_correction: a.bias_correction,
        weight_decay: 0.0,
    };
    let mut dir = OutputDir::create(&a.out)?;
    let config;
    if a.step_scale {
        if a.betas.is_empty() {
            return Err(CliError::Usage("--betas must not be empty".into()));
        }
        let exp = StepScaleExperiment::constant_jump(a.dim as usize, a.jump_step, a.factor, square_grid(&a.betas), cfg)?;
        let cells = run_step_scale_grid(&exp, a.steps)?;
        dir.write("step_scale_summary.csv", &csv_bytes(|w| io::write_step_scale_summary(w, &cells))?)?;
        let mut series = Vec::new();
        for c in &cells {
            let name = format!("step_scale/beta1_{}_beta2_{}.csv", c.beta1, c.beta2);
            dir.write(&name, &csv_bytes(|w| io::write_step_scale_trace(w, &c.trace.records))?)?;
            writeln!(
                out,
                "beta1={} beta2={} transient_integral={:.6} peak_excursion={:.6} settle_error={:.3e}",
                c.beta1, c.beta2, c.transient_integral, c.peak_excursion, c.settle_error
            )?;
            let pts = c.trace.records.iter().map(|r| (r.step as f64, r.norm_r)).collect();
            series.push(Series {
                label: format!("({}, {})", c.beta1, c.beta2),
                points: thin(pts, 2000),
            });
        }
        if a.plot {
            dir.write("step_scale.svg", line_chart("step rescale", "step", "|R_k|", &series).as_bytes())?;
        }
        config = cfg_pairs(&[
            ("mode", "step-scale".into()),
            ("dim", a.dim.to_string()),
            ("jump_step", a.jump_step.to_string()),
            ("factor", a.factor.to_string()),
            ("steps", a.steps.to_string()),
            ("betas", join(&a.betas)),
            ("eta", a.eta.to_string()),
            ("epsilon", a.epsilon.to_string()),
            ("bias_correction", a.bias_correction.to_string()),
        ]);
    } else {
        let d = a.g.len();
        let m = a.m.clone().unwrap_or_else(|| vec![1.0; d]);
        let v = a.v.clone().unwrap_or_else(|| vec![1.0; d]);
        if m.len() != d || v.len() != d {
            return Err(CliError::Usage(format!(
                "--m and --v need {d} entries to match --g"
            )));
        }
        let method = match a.method {
            MethodKind::Adam => Method::Adam(cfg),
            MethodKind::Adamw => Method::Adam(cfg.with_weight_decay(a.weight_decay)),
            MethodKind::Signsgd => Method::SignSgd { eta: a.eta },
            MethodKind::Gd => Method::Gd { eta: a.eta },
        };
        let state = MomentState::new(m.clone(), v.clone(), vec![0.0; d], a.k)?;
        let probe = exact_invariance_probe(&method, &state, &a.g, &a.lambdas)?;
        dir.write("probe.csv", &csv_bytes(|w| io::write_probe_result(w, &probe))?)?;
        writeln!(out, "method {} classification {}", probe.method, probe.classification)?;
        writeln!(out, "lambda,deviation,linear_deviation")?;
        for i in 0..probe.lambda_values.len() {
            writeln!(
                out,
                "{},{:.9e},{:.9e}",
                probe.lambda_values[i], probe.deviations[i], probe.linear_deviations[i]
            )?;
        }
        config = cfg_pairs(&[
            ("mode", "rescale".into()),
            ("method", probe.method.clone()),
            ("lambdas", join(&a.lambdas)),
            ("g", join(&a.g)),
            ("m", join(&m)),
            ("v", join(&v)),
            ("k", a.k.to_string()),
            ("beta1", a.beta1.to_string()),
            ("beta2", a.beta2.to_string()),
            ("eta", a.eta.to_string()),
            ("epsilon", a.epsilon.to_string()),
            ("bias_correction", a.bias_correction.to_string()),
            ("weight_decay", a.weight_decay.to_string()),
        ]);
    }
    dir.finish("probe", config, Vec::new(), start.elapsed())?;
    Ok(())
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

fn cmd_sweep(a: &SweepArgs, out: &mut (dyn Write + Send)) -> CliResult<()> {
    let start = Instant::now();
    if a.betas.is_empty() {
        return Err(CliError::Usage("--betas must not be empty".into()));
    }
    let mut sorted = a.betas.clone();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() != a.betas.len() {
        return Err(CliError::Usage("--betas must not repeat values".into()));
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let options = SweepOptions {
        window: a.window as usize,
        metric: a.metric.into(),
        template: OptimizerConfig {
            eta: a.eta,
            epsilon: a.epsilon,
            ..OptimizerConfig::default()
        },
        batch_size: a.batch as usize,
    };
    let mut dir = OutputDir::create(&a.out)?;
    let mut reports = Vec::new();
    for &p in &a.problem {
        let kind: ProblemKind = p.into();
        let problem = make_problem(kind, a.data_seed);
        let res = sweep_grid(&problem, &a.betas, &seeds, a.steps, &options)?;
        let table = io::GridTable::from_sweep(&res);
        dir.write(&format!("{kind}/grid.csv"), &csv_bytes(|w| io::write_grid_table(w, &table))?)?;
        dir.write(
            &format!("{kind}/summary.csv"),
            &csv_bytes(|w| io::write_report_summary(w, &res.report))?,
        )?;
        if !a.no_traces {
            for c in &res.cells {
                let name = format!("{kind}/traces/beta1_{}_beta2_{}_seed_{}.csv", c.beta1, c.beta2, c.seed);
                dir.write(&name, &csv_bytes(|w| io::write_run_trace(w, &c.trace))?)?;
            }
        }
        if a.plot {
            let mut series = Vec::new();
            for c in res.cells.iter().filter(|c| c.seed == seeds[0]) {
                let s = ema_smooth(&c.trace.norms(), options.window)?;
                let pts = s.values.iter().enumerate().map(|(k, v)| (k as f64, *v)).collect();
                series.push(Series {
                    label: format!("({}, {})", c.beta1, c.beta2),
                    points: thin(pts, 1500),
                });
            }
            let title = format!("{kind}: smoothed |R_k|, seed {}", seeds[0]);
            dir.write(&format!("{kind}/norms.svg"), line_chart(&title, "step", "|R_k|", &series).as_bytes())?;
        }
        let r = &res.report;
        writeln!(
            out,
            "{kind}: rate={:.4} K={} N={} p_value={:.6e} degenerate_rows={}",
            r.rate,
            r.k,
            r.n,
            r.p_value,
            r.degenerate_rows().count()
        )?;
        reports.push(res.report);
    }
    if reports.len() > 1 {
        let (k, n, p) = combine_reports(reports.iter())?;
        writeln!(out, "combined: K={k} N={n} p_value={p:.6e}")?;
        let text = format!("K,N,p_value\n{k},{n},{p}\n");
        dir.write("combined_summary.csv", text.as_bytes())?;
    }
    let problems: Vec<String> = a.problem.iter().map(|p| ProblemKind::from(*p).to_string()).collect();
    let config = cfg_pairs(&[
        ("problem", problems.join(";")),
        ("seeds", a.seeds.to_string()),
        ("steps", a.steps.to_string()),
        ("window", a.window.to_string()),
        ("metric", OscillationMetric::from(a.metric).as_str().to_string()),
        ("betas", join(&a.betas)),
        ("eta", a.eta.to_string()),
        ("epsilon", a.epsilon.to_string()),
        ("batch", a.batch.to_string()),
        ("data_seed", a.data_seed.to_string()),
    ]);
    dir.finish("sweep", config, seeds, start.elapsed())?;
    Ok(())
}

fn cmd_report(a: &ReportArgs, out: &mut (dyn Write + Send)) -> CliResult<()> {
    let metric: OscillationMetric = a.metric.into();
    let mut reports = Vec::new();
    for path in &a.inputs {
        let text = std::fs::read_to_string(path)?;
        let table = io::read_grid_table(&text).map_err(|e| match e {
            scale_lab::Error::Parse { line, message } => scale_lab::Error::Parse {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        let (mut grids, axis) = table.to_grids(metric)?;
        if let Some(n) = a.replicate_seeds {
            if grids.len() != 1 {
                return Err(CliError::Usage(format!(
                    "--replicate-seeds needs a single-seed grid, {} has {}",
                    path.display(),
                    grids.len()
                )));
            }
            let g = grids.remove(0);
            grids = (0..n)
                .map(|seed| OmegaGrid {
                    seed,
                    omega: g.omega.clone(),
                })
                .collect();
        }
        let r = grid_report(&grids, &axis)?;
        writeln!(
            out,
            "{}: rate={:.4} K={} N={} p_value={:.6e} degenerate_rows={}",
            path.display(),
            r.rate,
            r.k,
            r.n,
            r.p_value,
            r.degenerate_rows().count()
        )?;
        if let Some(s) = &table.summary {
            if (s.k, s.n) != (r.k, r.n) && a.replicate_seeds.is_none() {
                writeln!(out, "  note: stored summary had K={} N={}", s.k, s.n)?;
            }
        }
        reports.push(r);
    }
    let (k, n, p) = combine_reports(reports.iter())?;
    if reports.len() > 1 {
        writeln!(out, "combined: K={k} N={n} p_value={p:.6e}")?;
    }
    if let Some(path) = &a.out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let rate = if n == 0 { 0.0 } else { k as f64 / n as f64 };
        std::fs::write(path, format!("rate,K,N,p_value\n{rate},{k},{n},{p}\n"))?;
    }
    Ok(())
}

fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))
}

pub fn execute(cli: &Cli, out: &mut (dyn Write + Send)) -> CliResult<()> {
    let pool = thread_pool()?;
    pool.install(|| match &cli.command {
        Command::Flow(a) => cmd_flow(a, out),
        Command::Probe(a) => cmd_probe(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Report(a) => cmd_report(a, out),
    })
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{rendered}")
            } else {
                write!(err, "{rendered}")
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
