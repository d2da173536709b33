//! Smoothing, oscillation metrics and the diagonal-selection test.
//!
//! A β-grid run produces one oscillation value `ω(β₁, β₂)` per cell and
//! seed. For every `(β₁, seed)` row we record whether the minimizing `β₂`
//! equals `β₁`; under the null that the minimizer is uniform over the
//! three columns the count of hits is `Binomial(N, 1/3)`, and the reported
//! p-value is the exact upper tail `P(X ≥ K)`.

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedSeries {
    pub values: Vec<f64>,
    pub window: usize,
    pub alpha: f64,
}

/// `α = 2 / (window + 1)`, so `window = 1` is the identity.
pub fn ema_alpha(window: usize) -> f64 {
    2.0 / (window as f64 + 1.0)
}

/// Exponential moving average `s₀ = x₀`, `s_k = α x_k + (1 − α) s_{k−1}`.
pub fn ema_smooth(series: &[f64], window: usize) -> Result<SmoothedSeries> {
    if window < 1 {
        return Err(domain("EMA window must be >= 1"));
    }
    if series.is_empty() {
        return Err(Error::SeriesTooShort { needed: 1, got: 0 });
    }
    let alpha = ema_alpha(window);
    let values = if window == 1 {
        series.to_vec()
    } else {
        let mut out = Vec::with_capacity(series.len());
        let mut s = series[0];
        out.push(s);
        for &x in &series[1..] {
            s = alpha * x + (1.0 - alpha) * s;
            out.push(s);
        }
        out
    };
    Ok(SmoothedSeries {
        values,
        window,
        alpha,
    })
}

/// Mean absolute first difference.
pub fn oscillation_omega1(x: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::SeriesTooShort {
            needed: 2,
            got: x.len(),
        });
    }
    let sum: f64 = x.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    Ok(sum / (x.len() - 1) as f64)
}

/// Mean absolute second difference, normalized by `T − 1`.
///
/// The `T − 2` interior terms `|x_{k+1} − 2x_k + x_{k−1}|` are complemented
/// by one boundary term at the left end, the one-sided forward stencil
/// `|x₂ − 2x₁ + x₀|`, so there are `T − 1` terms in total.
pub fn oscillation_omega2(x: &[f64]) -> Result<f64> {
    if x.len() < 3 {
        return Err(Error::SeriesTooShort {
            needed: 3,
            got: x.len(),
        });
    }
    let second = |w: &[f64]| (w[2] - 2.0 * w[1] + w[0]).abs();
    let interior: f64 = x.windows(3).map(second).sum();
    let boundary = second(&x[..3]);
    Ok((interior + boundary) / (x.len() - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OscillationMetric {
    Omega1,
    Omega2,
}

impl OscillationMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            OscillationMetric::Omega1 => "omega1",
            OscillationMetric::Omega2 => "omega2",
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        match self {
            OscillationMetric::Omega1 => oscillation_omega1(x),
            OscillationMetric::Omega2 => oscillation_omega2(x),
        }
    }
}

impl std::str::FromStr for OscillationMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "omega1" | "w1" => Ok(OscillationMetric::Omega1),
            "omega2" | "w2" => Ok(OscillationMetric::Omega2),
            other => Err(domain(format!("unknown metric `{other}`"))),
        }
    }
}

fn binomial(n: u64, k: u64) -> BigUint {
    let mut c = BigUint::one();
    for i in 0..k {
        c = c * (n - i) / (i + 1);
    }
    c
}

/// Exact `P(X ≥ K)` for `X ~ Binomial(N, 1/3)` as a rational:
/// `Σ_{j ≥ K} C(N, j) 2^{N−j} / 3^N`.
pub fn binomial_tail_exact(k: u64, n: u64) -> Result<BigRational> {
    if n == 0 {
        return Err(domain("binomial test needs N >= 1"));
    }
    if k > n {
        return Err(domain(format!("K = {k} exceeds N = {n}")));
    }
    let two = BigUint::from(2u32);
    let mut numer = BigUint::zero();
    for j in k..=n {
        numer += binomial(n, j) * two.pow((n - j) as u32);
    }
    let denom = BigUint::from(3u32).pow(n as u32);
    Ok(BigRational::new(BigInt::from(numer), BigInt::from(denom)))
}

/// One-sided exact binomial p-value for `K` diagonal hits in `N` rows.
pub fn binomial_diagonal_test(k: u64, n: u64) -> Result<f64> {
    let p = binomial_tail_exact(k, n)?;
    p.to_f64()
        .ok_or_else(|| domain("binomial tail not representable as f64"))
}

/// The ω matrix of one seed: `omega[row][col]` for `β₁ = axis[row]`,
/// `β₂ = axis[col]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaGrid {
    pub seed: u64,
    pub omega: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSelection {
    pub seed: u64,
    pub row: usize,
    /// Minimizing column; `None` for degenerate rows.
    pub argmin: Option<usize>,
    /// All entries tie (or are all NaN): the row carries no information and
    /// is excluded from `N`.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationGridReport {
    pub beta_axis: Vec<f64>,
    pub grids: Vec<OmegaGrid>,
    pub rows: Vec<RowSelection>,
    pub k: u64,
    pub n: u64,
    pub rate: f64,
    pub p_value: f64,
}

impl OscillationGridReport {
    pub fn degenerate_rows(&self) -> impl Iterator<Item = &RowSelection> {
        self.rows.iter().filter(|r| r.degenerate)
    }
}

fn nan_as_inf(x: f64) -> f64 {
    if x.is_nan() {
        f64::INFINITY
    } else {
        x
    }
}

/// Minimizing column with NaN treated as `+∞` and ties broken toward the
/// lowest index. `None` when every entry ties.
pub fn row_argmin(row: &[f64]) -> Option<usize> {
    let first = nan_as_inf(*row.first()?);
    if row.iter().all(|&x| nan_as_inf(x) == first) {
        return None;
    }
    let mut best = 0;
    for (j, &x) in row.iter().enumerate().skip(1) {
        if nan_as_inf(x) < nan_as_inf(row[best]) {
            best = j;
        }
    }
    Some(best)
}

/// p-value attached to `K` hits in `N` scored rows; `1` when nothing was scored.
pub fn tail_p_value(k: u64, n: u64) -> Result<f64> {
    if n == 0 {
        Ok(1.0)
    } else {
        binomial_diagonal_test(k, n)
    }
}

pub fn grid_report(grids: &[OmegaGrid], beta_axis: &[f64]) -> Result<OscillationGridReport> {
    if grids.is_empty() || beta_axis.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let size = beta_axis.len();
    let mut rows = Vec::new();
    let (mut k, mut n) = (0u64, 0u64);
    for g in grids {
        if g.omega.len() != size || g.omega.iter().any(|r| r.len() != size) {
            return Err(domain(format!(
                "omega grid for seed {} is not {size}x{size}",
                g.seed
            )));
        }
        for (i, row) in g.omega.iter().enumerate() {
            let argmin = row_argmin(row);
            let degenerate = argmin.is_none();
            if !degenerate {
                n += 1;
                if argmin == Some(i) {
                    k += 1;
                }
            }
            rows.push(RowSelection {
                seed: g.seed,
                row: i,
                argmin,
                degenerate,
            });
        }
    }
    Ok(OscillationGridReport {
        beta_axis: beta_axis.to_vec(),
        grids: grids.to_vec(),
        rows,
        k,
        n,
        rate: if n == 0 { 0.0 } else { k as f64 / n as f64 },
        p_value: tail_p_value(k, n)?,
    })
}

/// Pool the diagonal hits of several reports into one test.
pub fn combine_reports<'a>(
    reports: impl IntoIterator<Item = &'a OscillationGridReport>,
) -> Result<(u64, u64, f64)> {
    let (k, n) = reports
        .into_iter()
        .fold((0, 0), |(k, n), r| (k + r.k, n + r.n));
    Ok((k, n, tail_p_value(k, n)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ema_examples() {
        let x = [0.3, -1.0, 7.5, f64::NAN, -0.0];
        let s = ema_smooth(&x, 1).unwrap();
        assert_eq!(s.alpha, 1.0);
        for (a, b) in s.values.iter().zip(&x) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let s = ema_smooth(&[2.5; 10], 7).unwrap();
        assert!(s.values.iter().all(|&v| v == 2.5));
        let s = ema_smooth(&[0.0, 1.0], 3).unwrap();
        assert_eq!(s.values, vec![0.0, 0.5]);
        assert!(ema_smooth(&[1.0], 0).is_err());
        assert!(ema_smooth(&[], 3).is_err());
    }

    #[test]
    fn omega1_examples() {
        assert_eq!(oscillation_omega1(&[4.0; 6]).unwrap(), 0.0);
        assert_eq!(oscillation_omega1(&[0.0, 1.0, 0.0, 1.0, 0.0]).unwrap(), 1.0);
        let ramp: Vec<f64> = (0..9).map(|i| 0.25 * i as f64).collect();
        assert_eq!(oscillation_omega1(&ramp).unwrap(), 0.25);
        assert!(oscillation_omega1(&[1.0]).is_err());
    }

    #[test]
    fn omega2_examples() {
        let ramp: Vec<f64> = (0..9).map(|i| 0.25 * i as f64).collect();
        assert_eq!(oscillation_omega2(&ramp).unwrap(), 0.0);
        // one interior term of 2 plus its one-sided replica, over T - 1 = 2
        assert_eq!(oscillation_omega2(&[0.0, 1.0, 0.0]).unwrap(), 2.0);
        assert_eq!(oscillation_omega2(&[1.5; 4]).unwrap(), 0.0);
        // interior |1-0+0|=1? x = (0,0,1,1): interior |1-0+0| = 1, |1-2+0| = 1; boundary replica 1
        assert_eq!(oscillation_omega2(&[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert!(oscillation_omega2(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn binomial_published_values() {
        let cases = [
            (3, 3, 0.037037),
            (9, 9, 5.08e-5),
            (7, 9, 0.008281),
            (6, 9, 0.042422),
            (2, 3, 0.259259),
            (5, 9, 0.144846),
            (4, 9, 0.349693),
            (8, 9, 0.000965),
        ];
        for (k, n, want) in cases {
            let p = binomial_diagonal_test(k, n).unwrap();
            assert!(((p - want) / want).abs() < 5e-4, "K={k} N={n}: {p}");
        }
        assert_eq!(binomial_diagonal_test(0, 5).unwrap(), 1.0);
        assert!(binomial_diagonal_test(0, 0).is_err());
        assert!(binomial_diagonal_test(4, 3).is_err());
    }

    #[test]
    fn all_hits_is_a_power_of_one_third() {
        for n in 1..=20u64 {
            let p = binomial_tail_exact(n, n).unwrap();
            let want = BigRational::new(BigInt::one(), BigInt::from(3u32).pow(n as u32));
            assert_eq!(p, want);
        }
    }

    #[test]
    fn tail_decreases_in_k() {
        for n in 1..=40u64 {
            let ps: Vec<f64> = (0..=n).map(|k| binomial_diagonal_test(k, n).unwrap()).collect();
            assert_eq!(ps[0], 1.0);
            assert!(ps.windows(2).all(|w| w[1] < w[0]));
            assert!(ps.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn argmin_rules() {
        assert_eq!(row_argmin(&[0.6329, 1.063, 1.147]), Some(0));
        assert_eq!(row_argmin(&[0.4227, 0.2413, 0.2644]), Some(1));
        assert_eq!(row_argmin(&[f64::NAN, 204.2, 0.0735]), Some(2));
        assert_eq!(row_argmin(&[1.0, 0.5, 0.5]), Some(1));
        assert_eq!(row_argmin(&[0.5, 0.5, 0.5]), None);
        assert_eq!(row_argmin(&[f64::NAN, f64::NAN, f64::NAN]), None);
    }

    #[test]
    fn nanogpt_wikitext_grid_is_all_diagonal() {
        let g = OmegaGrid {
            seed: 0,
            omega: vec![
                vec![0.6329, 1.063, 1.147],
                vec![0.4227, 0.2413, 0.2644],
                vec![0.5249, 0.2356, 0.05768],
            ],
        };
        let r = grid_report(&[g], &[0.9, 0.99, 0.999]).unwrap();
        assert_eq!((r.k, r.n), (3, 3));
        assert_eq!(r.rate, 1.0);
        assert!((r.p_value - 0.037037).abs() < 1e-6);
    }

    #[test]
    fn three_seeds_of_strict_diagonal() {
        let grids: Vec<OmegaGrid> = (0..3)
            .map(|seed| OmegaGrid {
                seed,
                omega: (0..3)
                    .map(|i| (0..3).map(|j| if i == j { 0.1 } else { 1.0 + j as f64 }).collect())
                    .collect(),
            })
            .collect();
        let r = grid_report(&grids, &[0.9, 0.99, 0.999]).unwrap();
        assert_eq!((r.k, r.n), (9, 9));
        assert!((r.p_value - 5.08e-5).abs() < 1e-7);
    }

    #[test]
    fn degenerate_rows_are_flagged_not_scored() {
        let g = OmegaGrid {
            seed: 4,
            omega: vec![vec![1.0; 3], vec![2.0, 1.0, 3.0], vec![f64::NAN; 3]],
        };
        let r = grid_report(&[g], &[0.9, 0.99, 0.999]).unwrap();
        assert_eq!(r.degenerate_rows().count(), 2);
        assert_eq!((r.k, r.n), (1, 1));
        assert!((r.p_value - 1.0 / 3.0).abs() < 1e-15);
        assert!(grid_report(&[], &[0.9]).is_err());
        let bad = OmegaGrid {
            seed: 0,
            omega: vec![vec![1.0, 2.0]],
        };
        assert!(grid_report(&[bad], &[0.9, 0.99]).is_err());
    }

    proptest! {
        #[test]
        fn omegas_are_shift_invariant_and_nonnegative(
            xs in prop::collection::vec(-1e3f64..1e3, 3..60),
            shift in -1e3f64..1e3,
            scale in 1e-3f64..1e3,
        ) {
            let w1 = oscillation_omega1(&xs).unwrap();
            let w2 = oscillation_omega2(&xs).unwrap();
            prop_assert!(w1 >= 0.0 && w2 >= 0.0);
            let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            prop_assert!((oscillation_omega1(&shifted).unwrap() - w1).abs() <= 1e-9 * (1.0 + w1 + shift.abs()));
            prop_assert!((oscillation_omega2(&shifted).unwrap() - w2).abs() <= 1e-8 * (1.0 + w2 + shift.abs()));
            let scaled: Vec<f64> = xs.iter().map(|x| x * scale).collect();
            prop_assert!((oscillation_omega1(&scaled).unwrap() - scale * w1).abs() <= 1e-9 * scale * (1.0 + w1));
        }

        #[test]
        fn window_one_is_identity(xs in prop::collection::vec(any::<f64>(), 1..50)) {
            let s = ema_smooth(&xs, 1).unwrap();
            for (a, b) in s.values.iter().zip(&xs) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
