//! Concentration bounds for U-statistics with bounded kernels, and the
//! confidence intervals they induce for quantiles and the mean of the
//! transfer-error distribution.
//!
//! B_{n,k}(x; y) bounds P(U <= x) for any degree-k U-statistic with kernel
//! in `[0,1]` and mean y, as the minimum of three terms:
//!   b1: Hoeffding, exp(-m h1(x ^ y; y)) with m = floor(n/k) blocks,
//!   b2: Bentkus, e * P(Binom(m; y) <= ceil(m x)),
//!   b3: Maurer self-bounding, exp(inf_l (n l / k)(x - l/(l + k G(l)) y))
//!       on x in (0, y) with G(l) = (e^l - l - 1)/l, else 1.
//!
//! The pooled transfer error and the indicator fraction phi(q) are both
//! degree-(r+1) U-statistics of the domain samples, which yields
//! distribution-free confidence intervals for quantiles (any scale) and
//! for the mean (values in `[0,1]`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transfer::TransferErrorTensor;

#[derive(Debug, Error)]
pub enum ConcentrationError {
    #[error("tensor has {0} flagged entries; a complete tensor is required")]
    IncompleteTensor(usize),
    #[error("value {value} at entry {index} outside [0,1]; rescale or use an inverse measure")]
    ValueOutOfRange { index: usize, value: f64 },
    #[error("alpha must lie in (0, 1], got {0}")]
    BadAlpha(f64),
    #[error("beta must lie in (0, 1), got {0}")]
    BadBeta(f64),
    #[error("invalid bound inputs: {0}")]
    BadInputs(String),
}

/// The three bound terms at a point, as echoed into artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
}

impl BoundTerms {
    pub fn min(&self) -> f64 {
        self.b1.min(self.b2).min(self.b3)
    }
}

fn check_inputs(n: usize, k: usize, x: f64, y: f64) -> Result<(), ConcentrationError> {
    if k == 0 || n < k {
        return Err(ConcentrationError::BadInputs(format!(
            "need n >= k >= 1, got n={n}, k={k}"
        )));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(ConcentrationError::BadInputs(format!(
            "x must lie in [0,1], got {x}"
        )));
    }
    if !(y > 0.0 && y < 1.0) {
        return Err(ConcentrationError::BadInputs(format!(
            "y must lie in (0,1), got {y}"
        )));
    }
    Ok(())
}

/// Binary KL divergence h1(v; mu) = v ln(v/mu) + (1-v) ln((1-v)/(1-mu)).
fn h1(v: f64, mu: f64) -> f64 {
    let left = if v == 0.0 { 0.0 } else { v * (v / mu).ln() };
    let right = if v == 1.0 {
        0.0
    } else {
        (1.0 - v) * ((1.0 - v) / (1.0 - mu)).ln()
    };
    left + right
}

/// P(Binom(m; p) <= t), exact summation of point masses in log space.
fn binom_cdf(m: usize, p: f64, t: i64) -> f64 {
    if t < 0 {
        return 0.0;
    }
    if t >= m as i64 {
        return 1.0;
    }
    let lp = p.ln();
    let lq = (1.0 - p).ln();
    let mut ln_choose = 0.0; // ln C(m, 0)
    let mut total = 0.0;
    for i in 0..=(t as usize) {
        if i > 0 {
            ln_choose += ((m - i + 1) as f64 / i as f64).ln();
        }
        total += (ln_choose + i as f64 * lp + (m - i) as f64 * lq).exp();
    }
    total.min(1.0)
}

fn g_of_lambda(l: f64) -> f64 {
    (l.exp() - l - 1.0) / l
}

/// Maurer exponent inner objective at lambda.
fn maurer_objective(n: usize, k: usize, x: f64, y: f64, l: f64) -> f64 {
    let c = l / (l + k as f64 * g_of_lambda(l));
    (n as f64 * l / k as f64) * (x - c * y)
}

/// Golden-section refinement of a unimodal-ish 1-D function on `[lo, hi]`.
fn golden_section<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tol {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// All three bound terms at (x; y).
pub fn bound_terms(n: usize, k: usize, x: f64, y: f64) -> Result<BoundTerms, ConcentrationError> {
    check_inputs(n, k, x, y)?;
    let m = n / k;
    let v = x.min(y);
    let b1 = (-(m as f64) * h1(v, y)).exp();
    let b2 = std::f64::consts::E * binom_cdf(m, y, (m as f64 * x).ceil() as i64);
    let b3 = if x > 0.0 && x < y {
        // log-grid scan then golden-section refinement of the exponent
        let (lo, hi) = (1e-6f64, 50.0f64);
        let points = 200;
        let mut best_l = lo;
        let mut best = f64::INFINITY;
        for i in 0..points {
            let l = lo * (hi / lo).powf(i as f64 / (points - 1) as f64);
            let obj = maurer_objective(n, k, x, y, l);
            if obj < best {
                best = obj;
                best_l = l;
            }
        }
        let bracket_lo = (best_l / (hi / lo).powf(1.0 / (points - 1) as f64)).max(lo);
        let bracket_hi = (best_l * (hi / lo).powf(1.0 / (points - 1) as f64)).min(hi);
        let l_star = golden_section(
            |l| maurer_objective(n, k, x, y, l),
            bracket_lo,
            bracket_hi,
            1e-10,
        );
        let exponent = best.min(maurer_objective(n, k, x, y, l_star));
        exponent.exp()
    } else {
        1.0
    };
    Ok(BoundTerms { b1, b2, b3 })
}

/// B_{n,k}(x; y) = min(b1, b2, b3).
pub fn bound_b(n: usize, k: usize, x: f64, y: f64) -> Result<f64, ConcentrationError> {
    Ok(bound_terms(n, k, x, y)?.min())
}

fn complete_values(tensor: &TransferErrorTensor) -> Result<Vec<f64>, ConcentrationError> {
    let flagged = tensor.flagged_count();
    if flagged > 0 {
        return Err(ConcentrationError::IncompleteTensor(flagged));
    }
    Ok(tensor.entries.iter().map(|e| e.value).collect())
}

/// Unweighted mean of all tuple values (the degree-(r+1) U-statistic).
pub fn pooled_u_statistic(tensor: &TransferErrorTensor) -> Result<f64, ConcentrationError> {
    let values = complete_values(tensor)?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Fraction of tuple values <= q (right-continuous step function of q).
pub fn indicator_fraction(tensor: &TransferErrorTensor, q: f64) -> Result<f64, ConcentrationError> {
    let values = complete_values(tensor)?;
    let c = values.iter().filter(|&&v| v <= q).count();
    Ok(c as f64 / values.len() as f64)
}

/// inf{u in `[0,1]` : B_{n,k}(u; y) >= alpha}; B is nondecreasing in u.
pub fn u_threshold_lower(
    n: usize,
    k: usize,
    y: f64,
    alpha: f64,
) -> Result<f64, ConcentrationError> {
    if bound_b(n, k, 0.0, y)? >= alpha {
        return Ok(0.0);
    }
    let mut lo = 0.0; // B(lo) < alpha
    let mut hi = 1.0; // B(1) = 1 >= alpha
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if bound_b(n, k, mid, y)? >= alpha {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// sup{u in `[0,1]` : B_{n,k}(1-u; 1-y) >= alpha}; the argument is
/// nonincreasing in u.
pub fn u_threshold_upper(
    n: usize,
    k: usize,
    y: f64,
    alpha: f64,
) -> Result<f64, ConcentrationError> {
    if bound_b(n, k, 0.0, 1.0 - y)? >= alpha {
        // even u = 1 keeps the bound above alpha
        return Ok(1.0);
    }
    let mut lo = 0.0; // B(1-lo; 1-y) = B(1) = 1 >= alpha
    let mut hi = 1.0; // B(1-hi; 1-y) = B(0) < alpha
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if bound_b(n, k, 1.0 - mid, 1.0 - y)? >= alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiSide {
    UpperOnly,
    TwoSided,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileCi {
    pub beta: f64,
    pub alpha: f64,
    pub side: CiSide,
    /// -inf/+inf when the candidate set is empty on that side.
    pub lower: f64,
    pub upper: f64,
    /// Bound terms at the solution of the upper-endpoint threshold.
    pub bound_terms: BoundTerms,
}

/// Confidence interval for the beta-quantile of the transfer-error
/// distribution. Two-sided intervals spend alpha/2 per side.
pub fn quantile_ci(
    tensor: &TransferErrorTensor,
    beta: f64,
    alpha: f64,
    side: CiSide,
) -> Result<QuantileCi, ConcentrationError> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(ConcentrationError::BadBeta(beta));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(ConcentrationError::BadAlpha(alpha));
    }
    let mut values = complete_values(tensor)?;
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let j = values.len() as f64;
    let k = tensor.r + 1;
    let n = tensor.n;
    let per_side = match side {
        CiSide::UpperOnly => alpha,
        CiSide::TwoSided => alpha / 2.0,
    };

    let u_plus = u_threshold_lower(n, k, beta, per_side)?;
    let u_minus = u_threshold_upper(n, k, 1.0 - beta, per_side)?;

    // phi(values[i]) = (i+1)/J on the sorted values
    let lower = match side {
        CiSide::UpperOnly => f64::NEG_INFINITY,
        CiSide::TwoSided => {
            let mut out = f64::INFINITY; // empty candidate set
            for (i, v) in values.iter().enumerate() {
                if (i + 1) as f64 / j >= u_plus {
                    out = *v;
                    break;
                }
            }
            out
        }
    };
    // largest observed value whose step mass stays at or below u_minus;
    // -inf when even the smallest value overshoots (empty candidate set)
    let mut upper = f64::NEG_INFINITY;
    for (i, v) in values.iter().enumerate().rev() {
        if (i + 1) as f64 / j <= u_minus {
            upper = *v;
            break;
        }
    }
    let bound_terms = bound_terms(n, k, 1.0 - u_minus, 1.0 - (1.0 - beta))?;
    Ok(QuantileCi {
        beta,
        alpha,
        side,
        lower,
        upper,
        bound_terms,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanCi {
    pub alpha: f64,
    pub side: CiSide,
    pub u_statistic: f64,
    pub lower: f64,
    pub upper: f64,
    /// Bound terms at (U; upper endpoint).
    pub bound_terms: BoundTerms,
}

/// sup{mu in (0,1) : B(u; mu) >= alpha}, by bisection above u.
pub fn mean_upper_endpoint(
    n: usize,
    k: usize,
    u: f64,
    alpha: f64,
) -> Result<f64, ConcentrationError> {
    // B(u; mu) = 1 for mu <= u; it decreases in mu beyond u
    let eps = 1e-12;
    let hi_probe = 1.0 - eps;
    if bound_b(n, k, u.clamp(0.0, 1.0), hi_probe)? >= alpha {
        return Ok(1.0);
    }
    let mut lo = u.clamp(eps, 1.0 - eps); // B >= alpha here (B = 1)
    let mut hi = hi_probe; // B < alpha here
    while hi - lo > 1e-8 {
        let mid = 0.5 * (lo + hi);
        if bound_b(n, k, u.clamp(0.0, 1.0), mid)? >= alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// inf{mu in (0,1) : B(1-u; 1-mu) >= alpha}, by bisection below u.
pub fn mean_lower_endpoint(
    n: usize,
    k: usize,
    u: f64,
    alpha: f64,
) -> Result<f64, ConcentrationError> {
    let eps = 1e-12;
    if bound_b(n, k, (1.0 - u).clamp(0.0, 1.0), 1.0 - eps)? >= alpha {
        return Ok(0.0);
    }
    let mut hi = u.clamp(eps, 1.0 - eps); // B = 1 >= alpha here
    let mut lo = eps; // B < alpha here
    while hi - lo > 1e-8 {
        let mid = 0.5 * (lo + hi);
        if bound_b(n, k, (1.0 - u).clamp(0.0, 1.0), 1.0 - mid)? >= alpha {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Confidence interval for the expected transfer error; every tensor value
/// must lie in `[0,1]` (use the inverse measures, or rescale by an explicit
/// bound). Two-sided intervals spend alpha/2 per side.
pub fn mean_ci(
    tensor: &TransferErrorTensor,
    alpha: f64,
    side: CiSide,
) -> Result<MeanCi, ConcentrationError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(ConcentrationError::BadAlpha(alpha));
    }
    let values = complete_values(tensor)?;
    for (index, v) in values.iter().enumerate() {
        if !(0.0..=1.0).contains(v) {
            return Err(ConcentrationError::ValueOutOfRange { index, value: *v });
        }
    }
    let u = values.iter().sum::<f64>() / values.len() as f64;
    let k = tensor.r + 1;
    let n = tensor.n;
    let per_side = match side {
        CiSide::UpperOnly => alpha,
        CiSide::TwoSided => alpha / 2.0,
    };
    let upper = mean_upper_endpoint(n, k, u, per_side)?;
    let lower = match side {
        CiSide::UpperOnly => 0.0,
        CiSide::TwoSided => mean_lower_endpoint(n, k, u, per_side)?,
    };
    let bound_terms = bound_terms(n, k, u.clamp(1e-12, 1.0), upper.clamp(1e-12, 1.0 - 1e-12))?;
    Ok(MeanCi {
        alpha,
        side,
        u_statistic: u,
        lower,
        upper,
        bound_terms,
    })
}
