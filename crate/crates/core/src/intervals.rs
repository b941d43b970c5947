//! Empirical distribution of pooled transfer errors, upper/lower quantiles,
//! and finite-sample forecast intervals with exact nominal levels.
//!
//! One-sided: (-inf, Qbar_tau] covers the next transfer error with
//! probability at least tau*(n-r)/(n+1); two-sided uses the (1-tau) lower
//! quantile as well at level 2*tau*(n-r)/(n+1) - 1. Levels are carried as
//! exact rationals so percent labels are reproducible.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meta::LossSpec;
use crate::transfer::TransferErrorTensor;

pub type Rational = BigRational;

#[derive(Debug, Error)]
pub enum IntervalError {
    #[error("empty distribution")]
    EmptyDistribution,
    #[error("tau must lie in (0, 1], got {0}")]
    BadTau(f64),
    #[error("two-sided nominal level {level} is not positive; increase tau or the domain count")]
    NonPositiveLevel { level: f64 },
    #[error("cannot parse `{0}` as a decimal")]
    BadDecimal(String),
}

/// Exact rational from a decimal string like "0.95" or "1".
pub fn rational_from_decimal(s: &str) -> Result<Rational, IntervalError> {
    let bad = || IntervalError::BadDecimal(s.to_string());
    let (sign, rest) = match s.strip_prefix('-') {
        Some(r) => (-1, r),
        None => (1, s),
    };
    let (int_part, frac_part) = match rest.split_once('.') {
        Some((i, f)) => (i, f),
        None => (rest, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(bad());
    }
    let digits = format!("{int_part}{frac_part}");
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let num: BigInt = digits.parse().map_err(|_| bad())?;
    let den = BigInt::from(10u8).pow(frac_part.len() as u32);
    Ok(Rational::new(num * BigInt::from(sign), den))
}

/// Exact rational for an f64 interpreted through its shortest decimal
/// representation (what a user typed as a literal).
pub fn rational_from_f64_decimal(x: f64) -> Rational {
    rational_from_decimal(&format!("{x}")).expect("f64 display is a valid decimal")
}

/// "p/q" display used in artifacts.
pub fn rational_string(q: &Rational) -> String {
    format!("{}/{}", q.numer(), q.denom())
}

/// Integer percent label for a coverage level. Rounds up only when the
/// fractional part of 100*level reaches 0.6 (reproducible caption labels).
pub fn percent_label(level: &Rational) -> i64 {
    let scaled = level * Rational::from_integer(BigInt::from(100))
        + Rational::new(BigInt::from(2), BigInt::from(5));
    scaled.floor().to_integer().to_i64().unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    OneSidedUpper,
    TwoSided,
}

impl Side {
    pub fn name(&self) -> &'static str {
        match self {
            Side::OneSidedUpper => "one_sided_upper",
            Side::TwoSided => "two_sided",
        }
    }

    pub fn parse(s: &str) -> Option<Side> {
        match s {
            "one" | "one_sided_upper" | "upper" => Some(Side::OneSidedUpper),
            "two" | "two_sided" => Some(Side::TwoSided),
            _ => None,
        }
    }
}

/// Nominal coverage level of the pooled-quantile forecast interval:
/// tau*(n-r)/(n+1) one-sided, 2*tau*(n-r)/(n+1) - 1 two-sided.
pub fn coverage_level(n: usize, r: usize, tau: &Rational, side: Side) -> Rational {
    assert!(r >= 1 && r < n, "need 1 <= r <= n-1");
    let frac = Rational::new(BigInt::from(n - r), BigInt::from(n + 1));
    let one_sided = tau * &frac;
    match side {
        Side::OneSidedUpper => one_sided,
        Side::TwoSided => Rational::from_integer(BigInt::from(2)) * one_sided - Rational::one(),
    }
}

/// Tightness bound on coverage when the pooled errors have no ties:
/// one-sided tau*(n-r)/(n+1) + (r+1)/(n+1) + (n-r)!/(n+1)!.
pub fn coverage_upper_bound(n: usize, r: usize, tau: &Rational, side: Side) -> Rational {
    assert!(r >= 1 && r < n, "need 1 <= r <= n-1");
    let np1 = BigInt::from(n + 1);
    // (n-r)!/(n+1)! = 1 / ((n-r+1) * ... * (n+1))
    let mut denom = BigInt::one();
    for k in (n - r + 1)..=(n + 1) {
        denom *= BigInt::from(k);
    }
    let slack = Rational::new(BigInt::from(r + 1), np1) + Rational::new(BigInt::one(), denom);
    match side {
        Side::OneSidedUpper => coverage_level(n, r, tau, Side::OneSidedUpper) + slack,
        Side::TwoSided => {
            coverage_level(n, r, tau, Side::TwoSided)
                + Rational::from_integer(BigInt::from(2)) * slack
        }
    }
}

/// Values with nonnegative weights; supports exact upper/lower quantiles.
///
/// Uniform-weight distributions compare cumulative masses in exact rational
/// arithmetic; weighted ones use the stored cumulative sums, so producers
/// that know exact cumulative masses (the worst-case curve) can inject them
/// directly and downstream quantiles reproduce their comparisons bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedEmpirical {
    values: Vec<f64>,
    cum: Vec<f64>,
    total: f64,
    uniform: bool,
}

impl WeightedEmpirical {
    /// Uniform weights (multiset semantics: ties stay distinct atoms).
    pub fn from_values(mut values: Vec<f64>) -> Result<Self, IntervalError> {
        if values.is_empty() {
            return Err(IntervalError::EmptyDistribution);
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let n = values.len();
        let cum = (1..=n).map(|i| i as f64).collect();
        Ok(WeightedEmpirical {
            values,
            cum,
            total: n as f64,
            uniform: true,
        })
    }

    /// Positive weights per value.
    pub fn from_weighted(mut atoms: Vec<(f64, f64)>) -> Result<Self, IntervalError> {
        if atoms.is_empty() {
            return Err(IntervalError::EmptyDistribution);
        }
        assert!(
            atoms.iter().all(|&(_, w)| w > 0.0),
            "weights must be positive"
        );
        atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        let first = atoms[0].1;
        let uniform = atoms.iter().all(|&(_, w)| w == first);
        let values: Vec<f64> = atoms.iter().map(|&(v, _)| v).collect();
        let mut cum = Vec::with_capacity(atoms.len());
        let mut running = 0.0;
        for &(_, w) in &atoms {
            running += w;
            cum.push(running);
        }
        let total = running;
        Ok(WeightedEmpirical {
            values,
            cum,
            total,
            uniform,
        })
    }

    /// Already-sorted values with exact cumulative masses (last = total).
    pub fn from_sorted_cumulative(values: Vec<f64>, cum: Vec<f64>) -> Result<Self, IntervalError> {
        if values.is_empty() || values.len() != cum.len() {
            return Err(IntervalError::EmptyDistribution);
        }
        let total = *cum.last().unwrap();
        Ok(WeightedEmpirical {
            values,
            cum,
            total,
            uniform: false,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.total
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cum
            .iter()
            .map(|&c| {
                let w = c - prev;
                prev = c;
                w
            })
            .collect()
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Upper tau-quantile: inf{b : P((-inf, b]) >= tau}.
    pub fn upper_quantile_rat(&self, tau: &Rational) -> Result<f64, IntervalError> {
        let tf = tau.to_f64().unwrap_or(f64::NAN);
        if !(tau > &Rational::zero() && tau <= &Rational::one()) {
            return Err(IntervalError::BadTau(tf));
        }
        if self.uniform {
            let n = BigInt::from(self.len());
            for i in 1..=self.len() {
                if Rational::new(BigInt::from(i), n.clone()) >= *tau {
                    return Ok(self.values[i - 1]);
                }
            }
            Ok(self.max())
        } else {
            self.upper_quantile_f64(tf)
        }
    }

    pub fn upper_quantile(&self, tau: f64) -> Result<f64, IntervalError> {
        if self.uniform {
            self.upper_quantile_rat(&Rational::from_f64(tau).ok_or(IntervalError::BadTau(tau))?)
        } else {
            self.upper_quantile_f64(tau)
        }
    }

    fn upper_quantile_f64(&self, tau: f64) -> Result<f64, IntervalError> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(IntervalError::BadTau(tau));
        }
        let threshold = tau * self.total;
        for (i, &c) in self.cum.iter().enumerate() {
            if c >= threshold {
                return Ok(self.values[i]);
            }
        }
        Ok(self.max())
    }

    /// Lower tau-quantile: sup{b : P([b, inf)) >= 1 - tau}, evaluated over
    /// the atoms.
    pub fn lower_quantile_rat(&self, tau: &Rational) -> Result<f64, IntervalError> {
        let tf = tau.to_f64().unwrap_or(f64::NAN);
        if !(tau >= &Rational::zero() && tau < &Rational::one()) {
            return Err(IntervalError::BadTau(tf));
        }
        let want = Rational::one() - tau;
        if self.uniform {
            let n = BigInt::from(self.len());
            // tail mass from atom i (0-based) is (len - i)/len
            for i in (0..self.len()).rev() {
                if Rational::new(BigInt::from(self.len() - i), n.clone()) >= want {
                    return Ok(self.values[i]);
                }
            }
            Ok(self.min())
        } else {
            self.lower_quantile_f64(tf)
        }
    }

    pub fn lower_quantile(&self, tau: f64) -> Result<f64, IntervalError> {
        if self.uniform {
            self.lower_quantile_rat(&Rational::from_f64(tau).ok_or(IntervalError::BadTau(tau))?)
        } else {
            self.lower_quantile_f64(tau)
        }
    }

    fn lower_quantile_f64(&self, tau: f64) -> Result<f64, IntervalError> {
        if !(0.0..1.0).contains(&tau) {
            return Err(IntervalError::BadTau(tau));
        }
        let want = (1.0 - tau) * self.total;
        for i in (0..self.len()).rev() {
            let prev = if i == 0 { 0.0 } else { self.cum[i - 1] };
            let tail = self.total - prev;
            if tail >= want {
                return Ok(self.values[i]);
            }
        }
        Ok(self.min())
    }
}

/// A forecast interval with its exact nominal coverage level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastInterval {
    /// -inf for one-sided intervals.
    pub lower: f64,
    pub upper: f64,
    pub tau: f64,
    pub side: Side,
    pub n: usize,
    pub r: usize,
    /// Exact level as "p/q"; None when not identified (general weights).
    pub level_exact: Option<String>,
    /// Decimal level (None when not identified).
    pub level: Option<f64>,
    /// Percent label derived from the exact level.
    pub label: Option<String>,
    /// Entries excluded from the pooled distribution (flagged).
    pub excluded_entries: usize,
}

/// Builds the empirical distribution F of pooled values from a tensor
/// (unflagged entries, untransformed scale).
pub fn tensor_distribution(
    tensor: &TransferErrorTensor,
) -> Result<WeightedEmpirical, IntervalError> {
    WeightedEmpirical::from_values(tensor.ok_values())
}

/// Forecast interval from the pooled quantiles, endpoints reported on the
/// transform scale of `spec`.
pub fn forecast_interval(
    tensor: &TransferErrorTensor,
    tau: &Rational,
    side: Side,
    spec: &LossSpec,
) -> Result<ForecastInterval, IntervalError> {
    let dist = tensor_distribution(tensor)?;
    let level = coverage_level(tensor.n, tensor.r, tau, side);
    if side == Side::TwoSided && level <= Rational::zero() {
        return Err(IntervalError::NonPositiveLevel {
            level: level.to_f64().unwrap_or(0.0),
        });
    }
    let upper = dist.upper_quantile_rat(tau)?;
    let lower = match side {
        Side::OneSidedUpper => f64::NEG_INFINITY,
        Side::TwoSided => dist.lower_quantile_rat(&(Rational::one() - tau))?,
    };
    Ok(ForecastInterval {
        lower: if lower.is_finite() {
            spec.apply_transform(lower)
        } else {
            lower
        },
        upper: spec.apply_transform(upper),
        tau: tau.to_f64().unwrap_or(f64::NAN),
        side,
        n: tensor.n,
        r: tensor.r,
        level_exact: Some(rational_string(&level)),
        level: level.to_f64(),
        label: Some(format!("{}%", percent_label(&level))),
        excluded_entries: tensor.flagged_count(),
    })
}
