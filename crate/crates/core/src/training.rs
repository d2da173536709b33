//! Small trainable problems with exact gradients and the β-grid sweep.
//!
//! Random streams come from ChaCha8 seeded with `seed_from_u64`, with
//! separate stream ids for the dataset, the initial parameters and the
//! minibatch order, so each can be reproduced independently.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::metrics::{ema_smooth, grid_report, OmegaGrid, OscillationGridReport, OscillationMetric};
use crate::optimizer::{Method, MomentState, OptimizerConfig};

pub const QUADRATIC_DIM: usize = 50;
pub const QUADRATIC_CONDITION: f64 = 100.0;
pub const FEATURES: usize = 20;
pub const SAMPLES: usize = 512;
pub const HIDDEN: usize = 16;
pub const CLASSES: usize = 2;
/// Per-coordinate offset of the two blob means from the origin.
pub const BLOB_OFFSET: f64 = 0.3;
pub const DEFAULT_BATCH: usize = 32;

const STREAM_DATA: u64 = 0;
const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn std_normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProblemKind {
    Quadratic,
    Logistic,
    Mlp,
}

impl ProblemKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProblemKind::Quadratic => "quadratic",
            ProblemKind::Logistic => "logistic",
            ProblemKind::Mlp => "mlp",
        }
    }
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(ProblemKind::Quadratic),
            "logistic" => Ok(ProblemKind::Logistic),
            "mlp" => Ok(ProblemKind::Mlp),
            other => Err(Error::UnknownProblem(other.to_string())),
        }
    }
}

/// Two Gaussian blobs with unit covariance and means `±BLOB_OFFSET·1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Row-major `SAMPLES × FEATURES`.
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn blobs(seed: u64) -> Self {
        let mut r = rng(seed, STREAM_DATA);
        let mut x = Vec::with_capacity(SAMPLES * FEATURES);
        let mut y = Vec::with_capacity(SAMPLES);
        for i in 0..SAMPLES {
            let label = i % 2;
            let mean = if label == 1 { BLOB_OFFSET } else { -BLOB_OFFSET };
            let n = Normal::new(mean, 1.0).expect("unit variance");
            x.extend((0..FEATURES).map(|_| n.sample(&mut r)));
            y.push(label);
        }
        Dataset { x, y }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * FEATURES..(i + 1) * FEATURES]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub kind: ProblemKind,
    pub seed: u64,
    /// Quadratic curvatures (empty otherwise).
    pub diag: Vec<f64>,
    pub data: Option<Dataset>,
}

pub fn make_problem(kind: ProblemKind, seed: u64) -> Problem {
    match kind {
        ProblemKind::Quadratic => Problem {
            kind,
            seed,
            diag: (0..QUADRATIC_DIM)
                .map(|i| QUADRATIC_CONDITION.powf(i as f64 / (QUADRATIC_DIM - 1) as f64))
                .collect(),
            data: None,
        },
        ProblemKind::Logistic | ProblemKind::Mlp => Problem {
            kind,
            seed,
            diag: Vec::new(),
            data: Some(Dataset::blobs(seed)),
        },
    }
}

/// Parse-and-build convenience for string problem ids.
pub fn make_problem_named(name: &str, seed: u64) -> Result<Problem> {
    Ok(make_problem(name.parse()?, seed))
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// MLP parameter layout: W1 (HIDDEN×FEATURES), b1, W2 (CLASSES×HIDDEN), b2.
const W1: usize = 0;
const B1: usize = W1 + HIDDEN * FEATURES;
const W2: usize = B1 + HIDDEN;
const B2: usize = W2 + CLASSES * HIDDEN;
const MLP_PARAMS: usize = B2 + CLASSES;

impl Problem {
    pub fn dim(&self) -> usize {
        match self.kind {
            ProblemKind::Quadratic => QUADRATIC_DIM,
            ProblemKind::Logistic => FEATURES + 1,
            ProblemKind::Mlp => MLP_PARAMS,
        }
    }

    pub fn id(&self) -> String {
        format!("{}-{}", self.kind, self.seed)
    }

    /// Number of samples a minibatch is drawn from (`0` for the quadratic).
    pub fn samples(&self) -> usize {
        self.data.as_ref().map_or(0, Dataset::len)
    }

    /// Seeded initial parameters.
    pub fn init_theta(&self, seed: u64) -> Vec<f64> {
        let mut r = rng(seed, STREAM_INIT);
        match self.kind {
            ProblemKind::Quadratic => (0..QUADRATIC_DIM).map(|_| std_normal(&mut r)).collect(),
            ProblemKind::Logistic => vec![0.0; FEATURES + 1],
            ProblemKind::Mlp => {
                let mut th = vec![0.0; MLP_PARAMS];
                let s1 = (1.0 / FEATURES as f64).sqrt();
                let s2 = (1.0 / HIDDEN as f64).sqrt();
                for w in &mut th[W1..B1] {
                    *w = s1 * std_normal(&mut r);
                }
                for w in &mut th[W2..B2] {
                    *w = s2 * std_normal(&mut r);
                }
                th
            }
        }
    }

    /// Loss over `batch` (all samples when `None`).
    pub fn loss(&self, theta: &[f64], batch: Option<&[usize]>) -> Result<f64> {
        self.eval(theta, batch, false).map(|(l, _)| l)
    }

    /// Loss and exact gradient over `batch` (all samples when `None`).
    pub fn loss_grad(&self, theta: &[f64], batch: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
        self.eval(theta, batch, true)
    }

    fn eval(&self, theta: &[f64], batch: Option<&[usize]>, want_grad: bool) -> Result<(f64, Vec<f64>)> {
        crate::error::check_dim(self.dim(), theta.len())?;
        let mut grad = vec![0.0; if want_grad { theta.len() } else { 0 }];
        if self.kind == ProblemKind::Quadratic {
            let mut loss = 0.0;
            for (i, (d, t)) in self.diag.iter().zip(theta).enumerate() {
                loss += 0.5 * d * t * t;
                if want_grad {
                    grad[i] = d * t;
                }
            }
            return Ok((loss, grad));
        }
        let data = self.data.as_ref().expect("data-backed problem");
        let all: Vec<usize>;
        let idx = match batch {
            Some(b) => b,
            None => {
                all = (0..data.len()).collect();
                &all
            }
        };
        if idx.is_empty() {
            return Err(domain("empty minibatch"));
        }
        let scale = 1.0 / idx.len() as f64;
        let mut loss = 0.0;
        match self.kind {
            ProblemKind::Logistic => {
                for &i in idx {
                    let x = data.row(i);
                    let z: f64 = theta[FEATURES] + x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
                    let s = if data.y[i] == 1 { 1.0 } else { -1.0 };
                    loss += softplus(-s * z);
                    if want_grad {
                        // d/dz softplus(-s z) = -s σ(-s z)
                        let dz = -s * sigmoid(-s * z) * scale;
                        for (gj, xj) in grad.iter_mut().zip(x) {
                            *gj += dz * xj;
                        }
                        grad[FEATURES] += dz;
                    }
                }
            }
            ProblemKind::Mlp => {
                let mut h = [0.0; HIDDEN];
                let mut logits = [0.0; CLASSES];
                for &i in idx {
                    let x = data.row(i);
                    for (u, hu) in h.iter_mut().enumerate() {
                        let w = &theta[W1 + u * FEATURES..W1 + (u + 1) * FEATURES];
                        let a: f64 = theta[B1 + u] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                        *hu = a.tanh();
                    }
                    for (c, lc) in logits.iter_mut().enumerate() {
                        let w = &theta[W2 + c * HIDDEN..W2 + (c + 1) * HIDDEN];
                        *lc = theta[B2 + c] + w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
                    let y = data.y[i];
                    loss += lse - logits[y];
                    if want_grad {
                        let mut dlog = [0.0; CLASSES];
                        for c in 0..CLASSES {
                            dlog[c] = ((logits[c] - lse).exp() - if c == y { 1.0 } else { 0.0 }) * scale;
                        }
                        let mut dh = [0.0; HIDDEN];
                        for c in 0..CLASSES {
                            grad[B2 + c] += dlog[c];
                            for u in 0..HIDDEN {
                                grad[W2 + c * HIDDEN + u] += dlog[c] * h[u];
                                dh[u] += dlog[c] * theta[W2 + c * HIDDEN + u];
                            }
                        }
                        for u in 0..HIDDEN {
                            let da = dh[u] * (1.0 - h[u] * h[u]);
                            grad[B1 + u] += da;
                            let row = &mut grad[W1 + u * FEATURES..W1 + (u + 1) * FEATURES];
                            for (gj, xj) in row.iter_mut().zip(x) {
                                *gj += da * xj;
                            }
                        }
                    }
                }
            }
            ProblemKind::Quadratic => unreachable!(),
        }
        Ok((loss * scale, grad))
    }
}

/// Epoch-shuffled minibatch indices; the quadratic is always full batch.
pub struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(samples: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(domain("batch size must be >= 1"));
        }
        let mut s = Self {
            order: (0..samples).collect(),
            pos: samples,
            batch: batch.min(samples.max(1)),
            rng: rng(seed, STREAM_BATCH),
        };
        s.pos = s.order.len();
        Ok(s)
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let b = &self.order[self.pos..end];
        self.pos = end;
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub norm_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub problem: String,
    pub seed: u64,
    pub method: Method,
    pub records: Vec<TrainRecord>,
    /// Set when a non-finite loss or update stopped the run early.
    pub truncated: bool,
}

impl RunTrace {
    pub fn norms(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.norm_r).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Train for `steps` iterations, recording the minibatch loss at `θ_k` and
/// `‖R_k‖₂` of the step taken from it.
pub fn run_training(
    problem: &Problem,
    method: &Method,
    seed: u64,
    steps: u64,
    batch_size: usize,
) -> Result<RunTrace> {
    if steps == 0 {
        return Err(domain("steps must be >= 1"));
    }
    let mut state = MomentState::zeros(problem.init_theta(seed));
    let mut batches = BatchStream::new(problem.samples(), batch_size, seed)?;
    let full_batch = problem.kind == ProblemKind::Quadratic;
    let mut records = Vec::with_capacity(steps as usize);
    let mut truncated = false;
    for k in 0..steps {
        let batch = if full_batch { None } else { Some(batches.next_batch()) };
        let (loss, g) = problem.loss_grad(&state.theta, batch)?;
        if !loss.is_finite() {
            truncated = true;
            break;
        }
        let (next, r) = match method.step(&state, &g) {
            Ok(x) => x,
            Err(Error::ZeroSecondMoment { .. }) => {
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let norm_r = r.norm2();
        if !norm_r.is_finite() {
            truncated = true;
            break;
        }
        records.push(TrainRecord { step: k, loss, norm_r });
        state = next;
    }
    Ok(RunTrace {
        problem: problem.id(),
        seed,
        method: *method,
        records,
        truncated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub window: usize,
    pub metric: OscillationMetric,
    /// β₁, β₂ are set per cell.
    pub template: OptimizerConfig,
    pub batch_size: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            window: 200,
            metric: OscillationMetric::Omega1,
            template: OptimizerConfig::default(),
            batch_size: DEFAULT_BATCH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub omega1: f64,
    pub omega2: f64,
    pub trace: RunTrace,
}

impl SweepCell {
    pub fn omega(&self, metric: OscillationMetric) -> f64 {
        match metric {
            OscillationMetric::Omega1 => self.omega1,
            OscillationMetric::Omega2 => self.omega2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub problem: String,
    pub beta_axis: Vec<f64>,
    pub seeds: Vec<u64>,
    pub options: SweepOptions,
    pub steps: u64,
    /// Ordered by seed, then β₁, then β₂.
    pub cells: Vec<SweepCell>,
    pub report: OscillationGridReport,
}

/// Smoothed oscillation of one trace; truncated or too-short traces give NaN.
pub fn trace_omegas(trace: &RunTrace, window: usize) -> Result<(f64, f64)> {
    if trace.truncated || trace.records.len() < 3 {
        return Ok((f64::NAN, f64::NAN));
    }
    let s = ema_smooth(&trace.norms(), window)?;
    Ok((
        OscillationMetric::Omega1.evaluate(&s.values)?,
        OscillationMetric::Omega2.evaluate(&s.values)?,
    ))
}

/// Run every `(β₁, β₂, seed)` cell concurrently and score the grid.
pub fn sweep_grid(
    problem: &Problem,
    beta_axis: &[f64],
    seeds: &[u64],
    steps: u64,
    options: &SweepOptions,
) -> Result<SweepResult> {
    if beta_axis.is_empty() || seeds.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if options.window < 1 {
        return Err(domain("EMA window must be >= 1"));
    }
    let jobs: Vec<(u64, f64, f64)> = seeds
        .iter()
        .flat_map(|&s| {
            beta_axis
                .iter()
                .flat_map(move |&b1| beta_axis.iter().map(move |&b2| (s, b1, b2)))
        })
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(seed, beta1, beta2)| {
            let cfg = OptimizerConfig {
                beta1,
                beta2,
                ..options.template
            };
            cfg.validate()?;
            let trace = run_training(problem, &Method::Adam(cfg), seed, steps, options.batch_size)?;
            let (omega1, omega2) = trace_omegas(&trace, options.window)?;
            Ok(SweepCell {
                beta1,
                beta2,
                seed,
                omega1,
                omega2,
                trace,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = beta_axis.len();
    let grids: Vec<OmegaGrid> = seeds
        .iter()
        .enumerate()
        .map(|(si, &seed)| OmegaGrid {
            seed,
            omega: (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| cells[si * n * n + i * n + j].omega(options.metric))
                        .collect()
                })
                .collect(),
        })
        .collect();
    let report = grid_report(&grids, beta_axis)?;
    Ok(SweepResult {
        problem: problem.id(),
        beta_axis: beta_axis.to_vec(),
        seeds: seeds.to_vec(),
        options: options.clone(),
        steps,
        cells,
        report,
    })
}
