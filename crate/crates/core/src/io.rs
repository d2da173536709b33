//! CSV readers and writers.
//!
//! Every table is plain RFC-4180 CSV with a header row. Scalar metadata
//! (time scales, configuration, summary statistics) travels in `# key=value`
//! comment lines, one pair per line, anywhere in the file. Floats are
//! written with Rust's shortest round-trip formatting, so a write followed
//! by a read reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::io::Write;

use crate::drift::{Channel, ChannelRemainder, DriftProfile, RemainderReport};
use crate::error::{Error, Result};
use crate::flow::{FlowSample, FlowTrace, TimeScales};
use crate::invariance::{Classification, RescaleProbeResult, StepScaleCell, StepScaleRecord};
use crate::metrics::{OmegaGrid, OscillationGridReport};
use crate::optimizer::{Method, OptimizerConfig};
use crate::training::{RunTrace, SweepResult, TrainRecord};

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Format an optional float; `None` becomes an empty field.
fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// A parsed table: metadata from comment lines plus the data rows tagged
/// with their 1-based line numbers.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub meta: BTreeMap<String, String>,
    pub header: Vec<String>,
    pub rows: Vec<(u64, Vec<String>)>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = BTreeMap::new();
        // data lines go to the CSV reader; `origin[i]` is the physical line
        // number of its `i + 1`-th line
        let mut data = String::with_capacity(text.len());
        let mut origin = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let physical = i as u64 + 1;
            if let Some(rest) = line.trim_start().strip_prefix('#') {
                let rest = rest.trim();
                if rest.is_empty() {
                    continue;
                }
                let (k, v) = rest.split_once('=').ok_or_else(|| Error::Parse {
                    line: physical,
                    message: format!("metadata `{rest}` is not key=value"),
                })?;
                meta.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                data.push_str(line);
                data.push('\n');
                origin.push(physical);
            }
        }
        let physical = |line: u64| {
            usize::try_from(line)
                .ok()
                .and_then(|l| l.checked_sub(1))
                .and_then(|l| origin.get(l).copied())
                .unwrap_or(line)
        };
        let remap = |e: Error| match e {
            Error::Parse { line, message } => Error::Parse {
                line: physical(line),
                message,
            },
            other => other,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(data.as_bytes());
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| remap(csv_err(e)))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.is_empty() || header.iter().all(String::is_empty) {
            return Err(Error::Parse {
                line: origin.first().copied().unwrap_or(1),
                message: "missing header row".into(),
            });
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| remap(csv_err(e)))?;
            let line = physical(rec.position().map_or(0, |p| p.line()));
            rows.push((line, rec.iter().map(str::to_string).collect()));
        }
        Ok(Table { meta, header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.column(name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column `{name}`"),
        })
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("missing metadata `{key}`"),
        })
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        parse_f64(self.meta_str(key)?, 0, key)
    }

    pub fn meta_opt_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.meta.get(key) {
            None => Ok(None),
            Some(s) if s.is_empty() => Ok(None),
            Some(s) => parse_f64(s, 0, key).map(Some),
        }
    }
}

pub fn parse_f64(s: &str, line: u64, what: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("`{s}` is not a number ({what})"),
    })
}

fn parse_u64(s: &str, line: u64, what: &str) -> Result<u64> {
    s.trim().parse::<u64>().map_err(|_| Error::Parse {
        line,
        message: format!("`{s}` is not a non-negative integer ({what})"),
    })
}

fn parse_bool(s: &str, line: u64, what: &str) -> Result<bool> {
    s.trim().parse::<bool>().map_err(|_| Error::Parse {
        line,
        message: format!("`{s}` is not true/false ({what})"),
    })
}

fn parse_opt_f64(s: &str, line: u64, what: &str) -> Result<Option<f64>> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        parse_f64(s, line, what).map(Some)
    }
}

fn field(row: &[String], idx: usize, line: u64) -> Result<&str> {
    row.get(idx).map(String::as_str).ok_or_else(|| Error::Parse {
        line,
        message: format!("row has {} fields, expected at least {}", row.len(), idx + 1),
    })
}

fn write_meta<W: Write>(w: &mut W, pairs: &[(&str, String)]) -> Result<()> {
    for (k, v) in pairs {
        writeln!(w, "# {k}={v}")?;
    }
    Ok(())
}

fn write_rows<W: Write>(w: &mut W, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut cw = csv::Writer::from_writer(w);
    cw.write_record(header).map_err(csv_err)?;
    for r in rows {
        cw.write_record(&r).map_err(csv_err)?;
    }
    cw.flush()?;
    Ok(())
}

fn time_scale_meta(ts: &TimeScales) -> Vec<(&'static str, String)> {
    vec![
        ("tau1", ts.tau1.to_string()),
        ("tau2", ts.tau2.to_string()),
        ("eta_bar", ts.eta_bar.to_string()),
        ("dt", ts.dt.to_string()),
    ]
}

/// Columns `t, m_0.., v_0.., R_0.., theta_0..`; time scales and signal in
/// metadata.
pub fn write_flow_trace<W: Write>(w: &mut W, trace: &FlowTrace) -> Result<()> {
    let d = trace.dim();
    let mut meta = time_scale_meta(&trace.time_scales);
    meta.push(("signal", trace.signal.clone()));
    meta.push(("spacing", trace.spacing.to_string()));
    meta.push(("dim", d.to_string()));
    write_meta(w, &meta)?;
    let mut header = vec!["t".to_string()];
    for p in ["m", "v", "R", "theta"] {
        header.extend((0..d).map(|i| format!("{p}_{i}")));
    }
    write_rows(
        w,
        &header,
        trace.samples.iter().map(|s| {
            let mut row = vec![s.t.to_string()];
            for part in [&s.m, &s.v, &s.r, &s.theta] {
                row.extend(part.iter().map(f64::to_string));
            }
            row
        }),
    )
}

pub fn read_flow_trace(text: &str) -> Result<FlowTrace> {
    let t = Table::parse(text)?;
    let d = parse_u64(t.meta_str("dim")?, 0, "dim")? as usize;
    let time_scales = TimeScales {
        tau1: t.meta_f64("tau1")?,
        tau2: t.meta_f64("tau2")?,
        eta_bar: t.meta_f64("eta_bar")?,
        dt: t.meta_f64("dt")?,
    };
    if t.header.len() != 1 + 4 * d {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected {} columns for dim {d}, found {}", 1 + 4 * d, t.header.len()),
        });
    }
    let mut samples = Vec::with_capacity(t.rows.len());
    for (line, row) in &t.rows {
        let vals = row
            .iter()
            .map(|s| parse_f64(s, *line, "flow sample"))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != 1 + 4 * d {
            return Err(Error::Parse {
                line: *line,
                message: format!("expected {} fields, found {}", 1 + 4 * d, vals.len()),
            });
        }
        let block = |k: usize| vals[1 + k * d..1 + (k + 1) * d].to_vec();
        samples.push(FlowSample {
            t: vals[0],
            m: block(0),
            v: block(1),
            r: block(2),
            theta: block(3),
        });
    }
    Ok(FlowTrace {
        samples,
        time_scales,
        signal: t.meta_str("signal")?.to_string(),
        spacing: t.meta_f64("spacing")?,
    })
}

const REMAINDER_COLUMNS: [&str; 6] = [
    "channel",
    "max_abs_remainder",
    "max_rel_remainder",
    "measured_constant",
    "bound",
    "bound_holds",
];

pub fn write_remainder_report<W: Write>(w: &mut W, r: &RemainderReport) -> Result<()> {
    write_meta(
        w,
        &[
            ("lambda_bound", r.drift.lambda_bound.to_string()),
            ("lambda_prime_bound", r.drift.lambda_prime_bound.to_string()),
            ("t0", r.drift.t0.to_string()),
            ("t1", r.drift.t1.to_string()),
            ("delta0", opt(r.delta0)),
            ("fitted_order", opt(r.fitted_order)),
        ],
    )?;
    let header: Vec<String> = REMAINDER_COLUMNS.iter().map(|s| s.to_string()).collect();
    write_rows(
        w,
        &header,
        r.channels.iter().map(|c| {
            vec![
                c.channel.as_str().to_string(),
                c.max_abs_remainder.to_string(),
                c.max_rel_remainder.to_string(),
                opt(c.measured_constant),
                opt(c.bound),
                c.bound_holds.map_or_else(String::new, |b| b.to_string()),
            ]
        }),
    )
}

pub fn read_remainder_report(text: &str) -> Result<RemainderReport> {
    let t = Table::parse(text)?;
    let cols = REMAINDER_COLUMNS
        .iter()
        .map(|c| t.require(c))
        .collect::<Result<Vec<_>>>()?;
    let mut channels = Vec::new();
    for (line, row) in &t.rows {
        let line = *line;
        let f = |k: usize| field(row, cols[k], line);
        let channel = match f(0)? {
            "m" => Channel::M,
            "v" => Channel::V,
            "R" => Channel::R,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown channel `{other}`"),
                })
            }
        };
        let holds = f(5)?;
        channels.push(ChannelRemainder {
            channel,
            max_abs_remainder: parse_f64(f(1)?, line, "max_abs_remainder")?,
            max_rel_remainder: parse_f64(f(2)?, line, "max_rel_remainder")?,
            measured_constant: parse_opt_f64(f(3)?, line, "measured_constant")?,
            bound: parse_opt_f64(f(4)?, line, "bound")?,
            bound_holds: if holds.is_empty() {
                None
            } else {
                Some(parse_bool(holds, line, "bound_holds")?)
            },
        });
    }
    Ok(RemainderReport {
        drift: DriftProfile {
            lambda_bound: t.meta_f64("lambda_bound")?,
            lambda_prime_bound: t.meta_f64("lambda_prime_bound")?,
            t0: t.meta_f64("t0")?,
            t1: t.meta_f64("t1")?,
        },
        channels,
        delta0: t.meta_opt_f64("delta0")?,
        fitted_order: t.meta_opt_f64("fitted_order")?,
    })
}

pub fn write_probe_result<W: Write>(w: &mut W, p: &RescaleProbeResult) -> Result<()> {
    write_meta(
        w,
        &[
            ("method", p.method.clone()),
            ("classification", p.classification.to_string()),
        ],
    )?;
    let header = ["lambda", "deviation", "linear_deviation"].map(String::from);
    write_rows(
        w,
        &header,
        (0..p.lambda_values.len()).map(|i| {
            vec![
                p.lambda_values[i].to_string(),
                p.deviations[i].to_string(),
                p.linear_deviations[i].to_string(),
            ]
        }),
    )
}

pub fn read_probe_result(text: &str) -> Result<RescaleProbeResult> {
    let t = Table::parse(text)?;
    let cols = ["lambda", "deviation", "linear_deviation"]
        .iter()
        .map(|c| t.require(c))
        .collect::<Result<Vec<_>>>()?;
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (line, row) in &t.rows {
        for (k, c) in cols.iter().enumerate() {
            out[k].push(parse_f64(field(row, *c, *line)?, *line, &t.header[*c])?);
        }
    }
    let [lambda_values, deviations, linear_deviations] = out;
    let classification: Classification = t.meta_str("classification")?.parse().map_err(|e: Error| Error::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    Ok(RescaleProbeResult {
        method: t.meta_str("method")?.to_string(),
        lambda_values,
        deviations,
        linear_deviations,
        classification,
    })
}

pub fn write_step_scale_trace<W: Write>(w: &mut W, records: &[StepScaleRecord]) -> Result<()> {
    let header = ["step", "multiplier", "norm_R"].map(String::from);
    write_rows(
        w,
        &header,
        records
            .iter()
            .map(|r| vec![r.step.to_string(), r.multiplier.to_string(), r.norm_r.to_string()]),
    )
}

pub fn read_step_scale_trace(text: &str) -> Result<Vec<StepScaleRecord>> {
    let t = Table::parse(text)?;
    let (s, m, n) = (t.require("step")?, t.require("multiplier")?, t.require("norm_R")?);
    t.rows
        .iter()
        .map(|(line, row)| {
            Ok(StepScaleRecord {
                step: parse_u64(field(row, s, *line)?, *line, "step")?,
                multiplier: parse_f64(field(row, m, *line)?, *line, "multiplier")?,
                norm_r: parse_f64(field(row, n, *line)?, *line, "norm_R")?,
            })
        })
        .collect()
}

pub fn write_step_scale_summary<W: Write>(w: &mut W, cells: &[StepScaleCell]) -> Result<()> {
    let header = ["beta1", "beta2", "transient_integral", "peak_excursion", "settle_error"].map(String::from);
    write_rows(
        w,
        &header,
        cells.iter().map(|c| {
            vec![
                c.beta1.to_string(),
                c.beta2.to_string(),
                c.transient_integral.to_string(),
                c.peak_excursion.to_string(),
                c.settle_error.to_string(),
            ]
        }),
    )
}

/// `(beta1, beta2, transient_integral)` rows of a step-scale summary.
pub fn read_step_scale_summary(text: &str) -> Result<Vec<(f64, f64, f64)>> {
    let t = Table::parse(text)?;
    let cols = [t.require("beta1")?, t.require("beta2")?, t.require("transient_integral")?];
    t.rows
        .iter()
        .map(|(line, row)| {
            let v = cols
                .iter()
                .map(|c| parse_f64(field(row, *c, *line)?, *line, &t.header[*c]))
                .collect::<Result<Vec<_>>>()?;
            Ok((v[0], v[1], v[2]))
        })
        .collect()
}

fn method_meta(m: &Method) -> Vec<(&'static str, String)> {
    let mut out = vec![("method", m.name().to_string())];
    match m {
        Method::Adam(c) => {
            out.push(("beta1", c.beta1.to_string()));
            out.push(("beta2", c.beta2.to_string()));
            out.push(("eta", c.eta.to_string()));
            out.push(("epsilon", c.epsilon.to_string()));
            out.push(("bias_correction", c.bias_correction.to_string()));
            out.push(("weight_decay", c.weight_decay.to_string()));
        }
        Method::SignSgd { eta } | Method::Gd { eta } => out.push(("eta", eta.to_string())),
    }
    out
}

fn method_from_meta(t: &Table) -> Result<Method> {
    let eta = t.meta_f64("eta")?;
    match t.meta_str("method")? {
        "adam" | "adamw" => Ok(Method::Adam(OptimizerConfig {
            beta1: t.meta_f64("beta1")?,
            beta2: t.meta_f64("beta2")?,
            eta,
            epsilon: t.meta_f64("epsilon")?,
            bias_correction: parse_bool(t.meta_str("bias_correction")?, 0, "bias_correction")?,
            weight_decay: t.meta_f64("weight_decay")?,
        })),
        "signsgd" => Ok(Method::SignSgd { eta }),
        "gd" => Ok(Method::Gd { eta }),
        other => Err(Error::Parse {
            line: 0,
            message: format!("unknown method `{other}`"),
        }),
    }
}

/// Columns `step, loss, norm_R`; problem, seed, method and truncation flag
/// in metadata.
pub fn write_run_trace<W: Write>(w: &mut W, tr: &RunTrace) -> Result<()> {
    let mut meta = vec![
        ("problem", tr.problem.clone()),
        ("seed", tr.seed.to_string()),
        ("truncated", tr.truncated.to_string()),
    ];
    meta.extend(method_meta(&tr.method));
    write_meta(w, &meta)?;
    let header = ["step", "loss", "norm_R"].map(String::from);
    write_rows(
        w,
        &header,
        tr.records
            .iter()
            .map(|r| vec![r.step.to_string(), r.loss.to_string(), r.norm_r.to_string()]),
    )
}

pub fn read_run_trace(text: &str) -> Result<RunTrace> {
    let t = Table::parse(text)?;
    let (s, l, n) = (t.require("step")?, t.require("loss")?, t.require("norm_R")?);
    let records = t
        .rows
        .iter()
        .map(|(line, row)| {
            Ok(TrainRecord {
                step: parse_u64(field(row, s, *line)?, *line, "step")?,
                loss: parse_f64(field(row, l, *line)?, *line, "loss")?,
                norm_r: parse_f64(field(row, n, *line)?, *line, "norm_R")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunTrace {
        problem: t.meta_str("problem")?.to_string(),
        seed: parse_u64(t.meta_str("seed")?, 0, "seed")?,
        method: method_from_meta(&t)?,
        records,
        truncated: parse_bool(t.meta_str("truncated")?, 0, "truncated")?,
    })
}

/// One ω cell of a grid table.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub beta1: f64,
    pub beta2: f64,
    pub seed: Option<u64>,
    pub omega1: Option<f64>,
    pub omega2: Option<f64>,
    pub window: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSummary {
    pub rate: f64,
    pub k: u64,
    pub n: u64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridTable {
    pub rows: Vec<GridRow>,
    pub summary: Option<GridSummary>,
}

fn summary_meta(rate: f64, k: u64, n: u64, p: f64) -> Vec<(&'static str, String)> {
    vec![
        ("rate", rate.to_string()),
        ("K", k.to_string()),
        ("N", n.to_string()),
        ("p_value", p.to_string()),
    ]
}

const GRID_COLUMNS: [&str; 6] = ["beta1", "beta2", "seed", "omega1", "omega2", "window"];

/// Write the cells of a grid table followed by the summary as trailing
/// `# rate=…`, `# K=…`, `# N=…`, `# p_value=…` comment lines.
pub fn write_grid_table<W: Write>(w: &mut W, table: &GridTable) -> Result<()> {
    let mut body = Vec::new();
    write_rows(
        &mut body,
        &GRID_COLUMNS.map(String::from),
        table.rows.iter().map(|r| {
            vec![
                r.beta1.to_string(),
                r.beta2.to_string(),
                r.seed.map_or_else(String::new, |s| s.to_string()),
                opt(r.omega1),
                opt(r.omega2),
                r.window.map_or_else(String::new, |s| s.to_string()),
            ]
        }),
    )?;
    w.write_all(&body)?;
    if let Some(s) = &table.summary {
        write_meta(w, &summary_meta(s.rate, s.k, s.n, s.p_value))?;
    }
    Ok(())
}

/// Read a grid table. Only `beta1`, `beta2` and at least one of `omega1`,
/// `omega2` are required; `seed` and `window` may be absent.
pub fn read_grid_table(text: &str) -> Result<GridTable> {
    let t = Table::parse(text)?;
    let b1 = t.require("beta1")?;
    let b2 = t.require("beta2")?;
    let (w1, w2) = (t.column("omega1"), t.column("omega2"));
    if w1.is_none() && w2.is_none() {
        return Err(Error::Parse {
            line: 1,
            message: "need an `omega1` or `omega2` column".into(),
        });
    }
    let (sc, wc) = (t.column("seed"), t.column("window"));
    if t.rows.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "grid table has no rows".into(),
        });
    }
    let mut rows = Vec::with_capacity(t.rows.len());
    for (line, row) in &t.rows {
        let line = *line;
        let opt_col = |c: Option<usize>, what: &str| -> Result<Option<f64>> {
            match c {
                None => Ok(None),
                Some(c) => parse_opt_f64(field(row, c, line)?, line, what),
            }
        };
        let opt_int = |c: Option<usize>, what: &str| -> Result<Option<u64>> {
            match c {
                None => Ok(None),
                Some(c) => {
                    let s = field(row, c, line)?;
                    if s.is_empty() {
                        Ok(None)
                    } else {
                        parse_u64(s, line, what).map(Some)
                    }
                }
            }
        };
        rows.push(GridRow {
            beta1: parse_f64(field(row, b1, line)?, line, "beta1")?,
            beta2: parse_f64(field(row, b2, line)?, line, "beta2")?,
            seed: opt_int(sc, "seed")?,
            omega1: opt_col(w1, "omega1")?,
            omega2: opt_col(w2, "omega2")?,
            window: opt_int(wc, "window")?,
        });
    }
    let summary = if t.meta.contains_key("K") {
        Some(GridSummary {
            rate: t.meta_f64("rate")?,
            k: parse_u64(t.meta_str("K")?, 0, "K")?,
            n: parse_u64(t.meta_str("N")?, 0, "N")?,
            p_value: t.meta_f64("p_value")?,
        })
    } else {
        None
    };
    Ok(GridTable { rows, summary })
}

impl GridTable {
    pub fn from_sweep(result: &SweepResult) -> Self {
        let r = &result.report;
        GridTable {
            rows: result
                .cells
                .iter()
                .map(|c| GridRow {
                    beta1: c.beta1,
                    beta2: c.beta2,
                    seed: Some(c.seed),
                    omega1: Some(c.omega1),
                    omega2: Some(c.omega2),
                    window: Some(result.options.window as u64),
                })
                .collect(),
            summary: Some(GridSummary {
                rate: r.rate,
                k: r.k,
                n: r.n,
                p_value: r.p_value,
            }),
        }
    }

    /// Rebuild per-seed ω matrices for `metric` (rows without a seed share
    /// seed 0). The β axis is the sorted set of distinct `beta1` values;
    /// missing cells are NaN.
    pub fn to_grids(&self, metric: crate::metrics::OscillationMetric) -> Result<(Vec<OmegaGrid>, Vec<f64>)> {
        use crate::metrics::OscillationMetric as M;
        let mut axis: Vec<f64> = self.rows.iter().map(|r| r.beta1).collect();
        axis.sort_by(f64::total_cmp);
        axis.dedup();
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed.unwrap_or(0)).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let pos = |b: f64| {
            axis.iter().position(|a| *a == b).ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("beta2 = {b} is not on the beta1 axis"),
            })
        };
        let n = axis.len();
        let mut grids: Vec<OmegaGrid> = seeds
            .iter()
            .map(|&seed| OmegaGrid {
                seed,
                omega: vec![vec![f64::NAN; n]; n],
            })
            .collect();
        for r in &self.rows {
            let s = seeds.binary_search(&r.seed.unwrap_or(0)).expect("seed collected above");
            let value = match metric {
                M::Omega1 => r.omega1,
                M::Omega2 => r.omega2,
            }
            .ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("no {} value for beta1={}, beta2={}", metric.as_str(), r.beta1, r.beta2),
            })?;
            grids[s].omega[pos(r.beta1)?][pos(r.beta2)?] = value;
        }
        Ok((grids, axis))
    }
}

/// Summary of a grid report as a one-row CSV.
pub fn write_report_summary<W: Write>(w: &mut W, r: &OscillationGridReport) -> Result<()> {
    let header = ["rate", "K", "N", "p_value", "degenerate_rows"].map(String::from);
    write_rows(
        w,
        &header,
        std::iter::once(vec![
            r.rate.to_string(),
            r.k.to_string(),
            r.n.to_string(),
            r.p_value.to_string(),
            r.degenerate_rows().count().to_string(),
        ]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::measure_remainder;
    use crate::flow::{integrate_flow, steady_state_init};
    use crate::invariance::{exact_invariance_probe, run_step_scale_grid, StepScaleExperiment};
    use crate::metrics::{grid_report, OscillationMetric};
    use crate::optimizer::MomentState;
    use crate::signal::GradientSignal;
    use crate::training::{make_problem, run_training, sweep_grid, ProblemKind, SweepOptions};

    fn to_string(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> String {
        let mut buf = Vec::new();
        f(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn flow_and_remainder_round_trip() {
        let ts = TimeScales::new(1.0, 2.0, 1.0, 0.01).unwrap();
        let sig = GradientSignal::new(vec![
            crate::signal::ScalarSignal::Exponential { c: 1.0, rate: 0.05 },
            crate::signal::ScalarSignal::Constant { c: -0.3 },
        ])
        .unwrap();
        let init = steady_state_init(&sig, &ts, 0.0).unwrap().state;
        let tr = integrate_flow(&sig, &ts, &init, 30.0, 0.04, 7).unwrap();
        let text = to_string(|w| write_flow_trace(w, &tr));
        assert_eq!(read_flow_trace(&text).unwrap(), tr);

        let rep = measure_remainder(&tr, &sig, &ts).unwrap();
        let text = to_string(|w| write_remainder_report(w, &rep));
        assert_eq!(read_remainder_report(&text).unwrap(), rep);
    }

    #[test]
    fn probe_and_step_scale_round_trip() {
        let state = MomentState::new(vec![1.0], vec![1.0], vec![0.0], 0).unwrap();
        let p = exact_invariance_probe(
            &Method::Adam(OptimizerConfig::raw(0.9, 0.9, 1e-3)),
            &state,
            &[1.0],
            &[0.5, 2.0, 1e3],
        )
        .unwrap();
        let text = to_string(|w| write_probe_result(w, &p));
        assert_eq!(read_probe_result(&text).unwrap(), p);

        let e = StepScaleExperiment::constant_jump(1, 50, 10.0, vec![(0.9, 0.99)], OptimizerConfig::default())
            .unwrap();
        let cells = run_step_scale_grid(&e, 100).unwrap();
        let text = to_string(|w| write_step_scale_trace(w, &cells[0].trace.records));
        assert_eq!(read_step_scale_trace(&text).unwrap(), cells[0].trace.records);
        let text = to_string(|w| write_step_scale_summary(w, &cells));
        let s = read_step_scale_summary(&text).unwrap();
        assert_eq!(s, vec![(0.9, 0.99, cells[0].transient_integral)]);
    }

    #[test]
    fn run_trace_round_trip() {
        let p = make_problem(ProblemKind::Mlp, 1);
        for m in [
            Method::Adam(OptimizerConfig::default().with_weight_decay(0.01)),
            Method::SignSgd { eta: 0.01 },
        ] {
            let tr = run_training(&p, &m, 2, 40, 32).unwrap();
            let text = to_string(|w| write_run_trace(w, &tr));
            assert_eq!(read_run_trace(&text).unwrap(), tr);
        }
    }

    #[test]
    fn grid_round_trip_and_rebuild() {
        let p = make_problem(ProblemKind::Quadratic, 0);
        let opts = SweepOptions {
            window: 5,
            ..SweepOptions::default()
        };
        let res = sweep_grid(&p, &[0.9, 0.99, 0.999], &[0, 1], 60, &opts).unwrap();
        let table = GridTable::from_sweep(&res);
        let text = to_string(|w| write_grid_table(w, &table));
        let back = read_grid_table(&text).unwrap();
        assert_eq!(back, table);
        let (grids, axis) = back.to_grids(OscillationMetric::Omega1).unwrap();
        let rep = grid_report(&grids, &axis).unwrap();
        assert_eq!((rep.k, rep.n, rep.p_value), (res.report.k, res.report.n, res.report.p_value));
        assert_eq!(rep.grids, res.report.grids);
    }

    #[test]
    fn hand_typed_table_without_seed() {
        let text = "beta1,beta2,omega1\n\
                    0.9,0.9,0.6329\n0.9,0.99,1.063\n0.9,0.999,1.147\n\
                    0.99,0.9,0.4227\n0.99,0.99,0.2413\n0.99,0.999,0.2644\n\
                    0.999,0.9,0.5249\n0.999,0.99,0.2356\n0.999,0.999,0.05768\n";
        let t = read_grid_table(text).unwrap();
        let (grids, axis) = t.to_grids(OscillationMetric::Omega1).unwrap();
        let r = grid_report(&grids, &axis).unwrap();
        assert_eq!((r.k, r.n), (3, 3));
        assert!(t.to_grids(OscillationMetric::Omega2).is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert!(matches!(read_grid_table(""), Err(Error::Parse { .. })));
        let bad = "beta1,beta2,omega1\n0.9,0.9,0.1\n# note=x\n0.9,0.99,abc\n";
        match read_grid_table(bad) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 4, "{message}");
                assert!(message.contains("abc"));
            }
            other => panic!("{other:?}"),
        }
        let ragged = "beta1,beta2,omega1\n0.9,0.9\n";
        assert!(matches!(read_grid_table(ragged), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(read_grid_table("beta1,beta2\n0.9,0.9\n"), Err(Error::Parse { .. })));
    }
}
