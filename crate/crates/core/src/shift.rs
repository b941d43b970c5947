//! Weighted-exchangeability forecast intervals and robustness to a shifted
//! target domain.
//!
//! When the target domain is drawn from a different meta-distribution, each
//! pooled error is reweighted by the likelihood ratio of its target sample.
//! With only a bound `omega in [1/Gamma, Gamma]`, the worst-case upper
//! quantile over the weight box is computable exactly: sort the pooled
//! values, track per-target cumulative counts Psi, and find the first index
//! whose adversarially reweighted cumulative mass cannot be pushed below
//! tau. Everywhere dominance between two rules reduces to a family of tiny
//! linear programs (one per candidate index) solved by vertex enumeration
//! after a Charnes-Cooper transformation.
//!
//! These operations require complete tensors: the counting identities
//! behind the algorithms assume every (training-set, target) pair is
//! present.

use num_bigint::BigInt;
use num_traits::One;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::intervals::{
    rational_string, ForecastInterval, IntervalError, Rational, Side, WeightedEmpirical,
};
use crate::meta::LossSpec;
use crate::transfer::TransferErrorTensor;

#[derive(Debug, Error)]
pub enum ShiftError {
    #[error("tensor has {0} flagged entries; shifted-domain operations need a complete tensor")]
    IncompleteTensor(usize),
    #[error("tensors disagree on (n, r, measure): ({0}, {1}, {2}) vs ({3}, {4}, {5})")]
    MismatchedTensors(usize, usize, String, usize, usize, String),
    #[error("Gamma must be >= 1, got {0}")]
    BadGamma(f64),
    #[error("weight for domain `{0}` missing")]
    MissingWeight(String),
    #[error("weight for domain `{0}` must be positive and finite, got {1}")]
    BadWeight(String, f64),
    #[error(transparent)]
    Interval(#[from] IntervalError),
}

/// Likelihood-ratio specification for the target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSpec {
    /// Known ratio per domain id.
    Explicit(BTreeMap<String, f64>),
    /// Only a bound: omega(S) in `[1/Gamma, Gamma]`.
    GammaBox(f64),
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let mut num = 1usize;
    for i in 0..k {
        num = num * (n - i) / (i + 1);
    }
    num
}

/// Per-ordered-tuple weight W_d for each domain:
/// W_d = ((n-r-1)!/(n-1)!) * omega_d / sum(omega). The induced weighted
/// empirical distribution has total mass exactly 1.
pub fn domain_weights(
    omegas: &[f64],
    ids: &[String],
    n: usize,
    r: usize,
) -> Result<Vec<f64>, ShiftError> {
    assert_eq!(omegas.len(), n);
    for (w, id) in omegas.iter().zip(ids) {
        if !(w.is_finite() && *w > 0.0) {
            return Err(ShiftError::BadWeight(id.clone(), *w));
        }
    }
    let total: f64 = omegas.iter().sum();
    // (n-r-1)!/(n-1)! = 1 / ((n-r) * ... * (n-1))
    let mut scale = 1.0;
    for k in (n - r)..n {
        scale /= k as f64;
    }
    Ok(omegas.iter().map(|w| scale * w / total).collect())
}

fn explicit_omegas(
    tensor: &TransferErrorTensor,
    weights: &BTreeMap<String, f64>,
) -> Result<Vec<f64>, ShiftError> {
    tensor
        .domain_ids
        .iter()
        .map(|id| {
            weights
                .get(id)
                .copied()
                .ok_or_else(|| ShiftError::MissingWeight(id.clone()))
        })
        .collect()
}

/// Coverage level under a Gamma-bounded likelihood ratio:
/// tau*(n-r)/(n+Gamma^2) one-sided, doubled minus one two-sided.
pub fn gamma_level(
    n: usize,
    r: usize,
    tau: &Rational,
    gamma: f64,
    side: Side,
) -> Result<Rational, ShiftError> {
    if gamma.is_nan() || gamma < 1.0 {
        return Err(ShiftError::BadGamma(gamma));
    }
    let g = Rational::from_float(gamma).ok_or(ShiftError::BadGamma(gamma))?;
    let denom = Rational::from_integer(BigInt::from(n)) + &g * &g;
    let one_sided = tau * Rational::from_integer(BigInt::from(n - r)) / denom;
    Ok(match side {
        Side::OneSidedUpper => one_sided,
        Side::TwoSided => Rational::from_integer(BigInt::from(2)) * one_sided - Rational::one(),
    })
}

fn require_complete(tensor: &TransferErrorTensor) -> Result<(), ShiftError> {
    let flagged = tensor.flagged_count();
    if flagged > 0 {
        return Err(ShiftError::IncompleteTensor(flagged));
    }
    Ok(())
}

/// Forecast interval under explicit likelihood-ratio weights.
///
/// With constant weights this reduces exactly to the unweighted interval
/// (including its exact level). For general weights the finite-sample level
/// involves an expectation over the unseen domain and is not identified
/// from the data; supplying `gamma_for_level` attaches the Gamma-box level
/// instead.
pub fn weighted_forecast_interval(
    tensor: &TransferErrorTensor,
    weights: &BTreeMap<String, f64>,
    tau: &Rational,
    side: Side,
    spec: &LossSpec,
    gamma_for_level: Option<f64>,
) -> Result<ForecastInterval, ShiftError> {
    require_complete(tensor)?;
    let omegas = explicit_omegas(tensor, weights)?;
    let first = omegas[0];
    if omegas.iter().all(|&w| w == first) {
        // scale invariance: constant omega is the unweighted case
        return Ok(crate::intervals::forecast_interval(
            tensor, tau, side, spec,
        )?);
    }
    let per_domain = domain_weights(&omegas, &tensor.domain_ids, tensor.n, tensor.r)?;
    let atoms: Vec<(f64, f64)> = tensor
        .ok_valued_targets()
        .into_iter()
        .map(|(v, d)| (v, per_domain[d]))
        .collect();
    let dist = WeightedEmpirical::from_weighted(atoms)?;
    use num_traits::ToPrimitive;
    let tf = tau.to_f64().unwrap_or(f64::NAN);
    let upper = dist.upper_quantile(tf)?;
    let lower = match side {
        Side::OneSidedUpper => f64::NEG_INFINITY,
        Side::TwoSided => dist.lower_quantile(1.0 - tf)?,
    };
    let (level_exact, level, label) = match gamma_for_level {
        Some(g) => {
            let lv = gamma_level(tensor.n, tensor.r, tau, g, side)?;
            (
                Some(rational_string(&lv)),
                lv.to_f64(),
                Some(format!("{}%", crate::intervals::percent_label(&lv))),
            )
        }
        None => (None, None, None),
    };
    Ok(ForecastInterval {
        lower: if lower.is_finite() {
            spec.apply_transform(lower)
        } else {
            lower
        },
        upper: spec.apply_transform(upper),
        tau: tf,
        side,
        n: tensor.n,
        r: tensor.r,
        level_exact,
        level,
        label,
        excluded_entries: tensor.flagged_count(),
    })
}

/// Pooled values sorted ascending with per-target cumulative counts.
///
/// Ties are broken by (target index, training indices) so downstream
/// index searches are deterministic.
pub struct SortedTensorView {
    pub values: Vec<f64>,
    pub targets: Vec<usize>,
    pub n: usize,
    pub r: usize,
    /// Entries per target: C(n-1, r).
    pub per_target: usize,
}

impl SortedTensorView {
    pub fn new(tensor: &TransferErrorTensor) -> Result<Self, ShiftError> {
        require_complete(tensor)?;
        let mut order: Vec<usize> = (0..tensor.entries.len()).collect();
        order.sort_by(|&a, &b| {
            let ea = &tensor.entries[a];
            let eb = &tensor.entries[b];
            ea.value
                .partial_cmp(&eb.value)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ea.target.cmp(&eb.target))
                .then(ea.train.cmp(&eb.train))
        });
        let values: Vec<f64> = order.iter().map(|&i| tensor.entries[i].value).collect();
        let targets: Vec<usize> = order.iter().map(|&i| tensor.entries[i].target).collect();
        let per_target = binomial(tensor.n - 1, tensor.r);
        debug_assert_eq!(values.len(), per_target * tensor.n);
        Ok(SortedTensorView {
            values,
            targets,
            n: tensor.n,
            r: tensor.r,
            per_target,
        })
    }

    /// Normalized worst-case cumulative masses: position j (1-based) holds
    /// min over the weight box of the reweighted mass of the j smallest
    /// values, divided by the per-target count so the final element is
    /// exactly 1. `gamma` may be infinite.
    ///
    /// For each j: Q_j = j/n + min_k (PsiBar_k - j/n) / (1 + n/(k (G^2-1)))
    /// with PsiBar_k the mean of the k smallest per-target counts; the
    /// Gamma -> inf limit replaces the damped term by min_k PsiBar_k.
    pub fn worst_case_cumulative(&self, gamma: f64) -> Result<Vec<f64>, ShiftError> {
        if gamma.is_nan() || gamma < 1.0 {
            return Err(ShiftError::BadGamma(gamma));
        }
        let n = self.n;
        let j_total = self.values.len();
        let cprime = self.per_target as f64;
        // damping per k; None marks the infinite-Gamma limit
        let damp: Option<Vec<f64>> = if gamma.is_infinite() {
            None
        } else {
            let g2m1 = gamma * gamma - 1.0;
            Some(
                (1..=n)
                    .map(|k| 1.0 / (1.0 + n as f64 / (k as f64 * g2m1)))
                    .collect(),
            )
        };

        let mut counts = vec![0usize; n];
        let mut sorted_counts = vec![0usize; n];
        let mut out = Vec::with_capacity(j_total);
        for j in 1..=j_total {
            let t = self.targets[j - 1];
            let old = counts[t];
            counts[t] += 1;
            // replace the rightmost occurrence of `old` with `old + 1`
            let pos = sorted_counts.partition_point(|&c| c <= old) - 1;
            debug_assert_eq!(sorted_counts[pos], old);
            sorted_counts[pos] = old + 1;

            let jn = j as f64 / n as f64;
            let q = match &damp {
                None => sorted_counts[0] as f64, // min_k PsiBar_k = smallest count
                Some(damp) => {
                    let mut best = f64::INFINITY;
                    let mut prefix = 0usize;
                    for k in 1..=n {
                        prefix += sorted_counts[k - 1];
                        let bar = prefix as f64 / k as f64;
                        let term = (bar - jn) * damp[k - 1];
                        if term < best {
                            best = term;
                        }
                    }
                    jn + best
                }
            };
            out.push(q / cprime);
        }
        Ok(out)
    }
}

/// Worst-case measure over the Gamma box: atoms at the sorted pooled
/// values, cumulative masses from the adversarial reweighting. Total mass
/// is exactly 1 and its quantiles realize the worst-case upper bounds.
pub fn worst_case_curve(
    tensor: &TransferErrorTensor,
    gamma: f64,
) -> Result<WeightedEmpirical, ShiftError> {
    if gamma == 1.0 {
        // analytic limit: the unweighted empirical distribution
        return Ok(WeightedEmpirical::from_values(tensor.ok_values())?);
    }
    let view = SortedTensorView::new(tensor)?;
    let cum = view.worst_case_cumulative(gamma)?;
    Ok(WeightedEmpirical::from_sorted_cumulative(view.values, cum)?)
}

/// sup over omega in the Gamma box of the weighted upper tau-quantile.
pub fn worst_case_upper_bound(
    tensor: &TransferErrorTensor,
    tau: f64,
    gamma: f64,
) -> Result<f64, ShiftError> {
    Ok(worst_case_curve(tensor, gamma)?.upper_quantile(tau)?)
}

/// Worst-case forecast interval over the Gamma weight box: the upper
/// endpoint maximizes the weighted upper quantile, the lower endpoint
/// minimizes the weighted lower quantile (computed by negating the values),
/// and the level is the Gamma-box guarantee.
pub fn gamma_box_interval(
    tensor: &TransferErrorTensor,
    gamma: f64,
    tau: &Rational,
    side: Side,
    spec: &LossSpec,
) -> Result<ForecastInterval, ShiftError> {
    use num_traits::ToPrimitive;
    let tf = tau.to_f64().unwrap_or(f64::NAN);
    let upper = worst_case_upper_bound(tensor, tf, gamma)?;
    let lower = match side {
        Side::OneSidedUpper => f64::NEG_INFINITY,
        Side::TwoSided => {
            let mut neg = tensor.clone();
            for e in &mut neg.entries {
                e.value = -e.value;
            }
            -worst_case_upper_bound(&neg, tf, gamma)?
        }
    };
    let level = gamma_level(tensor.n, tensor.r, tau, gamma, side)?;
    Ok(ForecastInterval {
        lower: if lower.is_finite() {
            spec.apply_transform(lower)
        } else {
            lower
        },
        upper: spec.apply_transform(upper),
        tau: tf,
        side,
        n: tensor.n,
        r: tensor.r,
        level_exact: Some(rational_string(&level)),
        level: level.to_f64(),
        label: Some(format!("{}%", crate::intervals::percent_label(&level))),
        excluded_entries: tensor.flagged_count(),
    })
}

/// Dispatches on the weight specification: explicit ratios use the
/// reweighted quantiles, a Gamma box uses the worst-case bounds.
pub fn interval_for_weight_spec(
    tensor: &TransferErrorTensor,
    weights: &WeightSpec,
    tau: &Rational,
    side: Side,
    spec: &LossSpec,
    gamma_for_level: Option<f64>,
) -> Result<ForecastInterval, ShiftError> {
    match weights {
        WeightSpec::Explicit(map) => {
            weighted_forecast_interval(tensor, map, tau, side, spec, gamma_for_level)
        }
        WeightSpec::GammaBox(g) => gamma_box_interval(tensor, *g, tau, side, spec),
    }
}

/// The Gamma grid used for dominance reports: infinity plus 100/i.
pub fn default_gamma_grid() -> Vec<f64> {
    let mut grid = vec![f64::INFINITY];
    grid.extend((1..=100).map(|i| 100.0 / i as f64));
    grid
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorstCaseDominance {
    pub tau: f64,
    pub dominates_on_grid: bool,
    /// Gamma values where the first rule's bound exceeds the second's.
    pub crossing_gammas: Vec<f64>,
    pub gamma_grid: Vec<f64>,
}

fn check_match(a: &TransferErrorTensor, b: &TransferErrorTensor) -> Result<(), ShiftError> {
    if a.n != b.n || a.r != b.r || a.measure != b.measure {
        return Err(ShiftError::MismatchedTensors(
            a.n,
            a.r,
            a.measure.clone(),
            b.n,
            b.r,
            b.measure.clone(),
        ));
    }
    Ok(())
}

/// Checks whether rule A's worst-case upper bound stays at or below rule
/// B's at every Gamma in the grid.
pub fn worst_case_dominates(
    tensor_a: &TransferErrorTensor,
    tensor_b: &TransferErrorTensor,
    tau: f64,
    gamma_grid: &[f64],
) -> Result<WorstCaseDominance, ShiftError> {
    check_match(tensor_a, tensor_b)?;
    let mut crossing = Vec::new();
    for &g in gamma_grid {
        let ea = worst_case_upper_bound(tensor_a, tau, g)?;
        let eb = worst_case_upper_bound(tensor_b, tau, g)?;
        if ea > eb {
            crossing.push(g);
        }
    }
    Ok(WorstCaseDominance {
        tau,
        dominates_on_grid: crossing.is_empty(),
        crossing_gammas: crossing,
        gamma_grid: gamma_grid.to_vec(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EverywhereDominance {
    pub tau: f64,
    pub dominates: bool,
    /// Sorted indices (1-based into rule B's sorted values) where a weight
    /// vector pushes A's upper bound above B's.
    pub violated_j: Vec<usize>,
    /// A violating likelihood ratio, normalized so the smallest positive
    /// coordinate is 1 (zeros mean arbitrarily down-weighted domains).
    pub witness_omega: Option<Vec<f64>>,
}

/// Minimum of v.a subject to v.b >= threshold, sum(v) = 1, v >= 0, by
/// enumerating vertices (at most two positive coordinates). Returns the
/// optimum and a minimizer, or None when infeasible.
fn simplex_halfspace_min(a: &[f64], b: &[f64], threshold: f64) -> Option<(f64, Vec<f64>)> {
    let n = a.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut consider = |obj: f64, v: Vec<f64>| match &best {
        Some((cur, _)) if obj >= *cur => {}
        _ => best = Some((obj, v)),
    };
    for i in 0..n {
        if b[i] >= threshold {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            consider(a[i], v);
        }
    }
    for i in 0..n {
        for l in (i + 1)..n {
            if b[i] == b[l] {
                continue;
            }
            // theta on coordinate i solving theta b_i + (1-theta) b_l = threshold
            let theta = (threshold - b[l]) / (b[i] - b[l]);
            if !(0.0..=1.0).contains(&theta) {
                continue;
            }
            let obj = theta * a[i] + (1.0 - theta) * a[l];
            let mut v = vec![0.0; n];
            v[i] = theta;
            v[l] = 1.0 - theta;
            consider(obj, v);
        }
    }
    best
}

/// Checks whether rule A's weighted upper bound stays at or below rule B's
/// for every nonnegative weight vector (pointwise dominance over all
/// likelihood ratios).
///
/// For each candidate index j of B's sorted values, the first A-index
/// strictly exceeding B's value is m(j); a violating weight vector must
/// give the first m(j)-1 A-values mass below tau while giving B's first j
/// values mass at least tau. Feasibility of that condition is one linear
/// program per j after the Charnes-Cooper substitution v = w / sum(w).
pub fn everywhere_dominates(
    tensor_a: &TransferErrorTensor,
    tensor_b: &TransferErrorTensor,
    tau: f64,
) -> Result<EverywhereDominance, ShiftError> {
    check_match(tensor_a, tensor_b)?;
    let va = SortedTensorView::new(tensor_a)?;
    let vb = SortedTensorView::new(tensor_b)?;
    let n = va.n;
    let j_total = vb.values.len();
    let threshold = tau * va.per_target as f64;

    let mut violated = Vec::new();
    let mut witness: Option<Vec<f64>> = None;

    // counts_b[i] = Psi_i^{(j), B}; counts_a tracks Psi^{(m(j)-1), A}
    let mut counts_b = vec![0usize; n];
    let mut counts_a = vec![0usize; n];
    let mut m = 0usize; // number of A-values <= current B value
    for j in 1..=j_total {
        counts_b[vb.targets[j - 1]] += 1;
        while m < va.values.len() && va.values[m] <= vb.values[j - 1] {
            counts_a[va.targets[m]] += 1;
            m += 1;
        }
        if m >= va.values.len() {
            // no A-value exceeds B's j-th: this j can never violate
            continue;
        }
        // prune: coordinatewise a >= b makes v.a >= v.b >= threshold
        if counts_a.iter().zip(&counts_b).all(|(x, y)| x >= y) {
            continue;
        }
        let a: Vec<f64> = counts_a.iter().map(|&c| c as f64).collect();
        let b: Vec<f64> = counts_b.iter().map(|&c| c as f64).collect();
        if let Some((opt, v)) = simplex_halfspace_min(&a, &b, threshold) {
            if opt < threshold {
                violated.push(j);
                if witness.is_none() {
                    let minpos = v
                        .iter()
                        .copied()
                        .filter(|&x| x > 0.0)
                        .fold(f64::INFINITY, f64::min);
                    witness = Some(v.iter().map(|&x| x / minpos).collect());
                }
            }
        }
    }

    Ok(EverywhereDominance {
        tau,
        dominates: violated.is_empty(),
        violated_j: violated,
        witness_omega: witness,
    })
}

/// Definitional check used as an oracle: evaluates both weighted upper
/// quantiles at every grid point of the probability simplex (given
/// points-per-coordinate resolution) and reports whether any grid weight
/// makes A's bound exceed B's. Exposed for audits; exponential in n.
pub fn everywhere_dominates_grid_oracle(
    tensor_a: &TransferErrorTensor,
    tensor_b: &TransferErrorTensor,
    tau: f64,
    points_per_coord: usize,
) -> Result<bool, ShiftError> {
    check_match(tensor_a, tensor_b)?;
    let va = SortedTensorView::new(tensor_a)?;
    let vb = SortedTensorView::new(tensor_b)?;
    let n = va.n;
    let steps = points_per_coord - 1;
    let threshold_scale = va.per_target as f64;

    let upper = |view: &SortedTensorView, v: &[f64]| -> f64 {
        let mut cum = 0.0;
        let threshold = tau * threshold_scale;
        for (val, &t) in view.values.iter().zip(&view.targets) {
            cum += v[t];
            if cum >= threshold {
                return *val;
            }
        }
        *view.values.last().unwrap()
    };

    // enumerate compositions of `steps` into n parts
    let mut comp = vec![0usize; n];
    comp[n - 1] = steps;
    loop {
        let v: Vec<f64> = comp.iter().map(|&c| c as f64 / steps as f64).collect();
        if upper(&va, &v) > upper(&vb, &v) {
            return Ok(false);
        }
        // next composition: standard lexicographic walk
        let mut i = n - 1;
        while i > 0 && comp[i] == 0 {
            i -= 1;
        }
        if i == 0 {
            return Ok(true);
        }
        let moved = comp[i];
        comp[i] = 0;
        comp[i - 1] += 1;
        comp[n - 1] = moved - 1;
    }
}

/// Exhaustive oracle over the corners of the Gamma weight box; equals the
/// worst-case upper bound exactly (the continuous minimum is attained at a
/// corner). Exponential in n.
pub fn worst_case_box_oracle(
    tensor: &TransferErrorTensor,
    tau: f64,
    gamma: f64,
) -> Result<f64, ShiftError> {
    let view = SortedTensorView::new(tensor)?;
    let n = view.n;
    let mut worst = f64::NEG_INFINITY;
    for mask in 0..(1usize << n) {
        let w: Vec<f64> = (0..n)
            .map(|i| {
                if mask & (1 << i) != 0 {
                    gamma
                } else {
                    1.0 / gamma
                }
            })
            .collect();
        let total: f64 = w.iter().sum();
        // per-entry mass = w[target] / (per_target * total); total mass = 1
        let mut cum = 0.0;
        let mut quantile = *view.values.last().unwrap();
        for (val, &t) in view.values.iter().zip(&view.targets) {
            cum += w[t] / (view.per_target as f64 * total);
            if cum >= tau {
                quantile = *val;
                break;
            }
        }
        if quantile > worst {
            worst = quantile;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intervals::{coverage_level, rational_from_decimal};
    use crate::transfer::{TensorEntry, TransferErrorTensor};
    use num_traits::ToPrimitive;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rat(s: &str) -> Rational {
        rational_from_decimal(s).unwrap()
    }

    /// r=1 tensor over n domains with the given values in (train, target)
    /// lexicographic entry order.
    fn tensor_from_values(n: usize, values: &[f64]) -> TransferErrorTensor {
        let mut entries = Vec::new();
        let mut k = 0;
        for train in 0..n {
            for target in 0..n {
                if train == target {
                    continue;
                }
                entries.push(TensorEntry {
                    train: vec![train],
                    target,
                    value: values[k],
                    flag: None,
                });
                k += 1;
            }
        }
        assert_eq!(k, values.len());
        TransferErrorTensor {
            n,
            r: 1,
            domain_ids: (0..n).map(|i| format!("d{i}")).collect(),
            entries,
            rule: "test".into(),
            measure: "transfer_error".into(),
            seed: 0,
        }
    }

    fn random_tensor(n: usize, rng: &mut ChaCha12Rng) -> TransferErrorTensor {
        let count = n * (n - 1);
        let values: Vec<f64> = (0..count).map(|_| rng.random::<f64>()).collect();
        tensor_from_values(n, &values)
    }

    /// A 3-domain worked example with known entries: e_{1,2}=1, e_{2,1}=2,
    /// e_{1,3}=3, e_{3,1}=4, e_{2,3}=5, e_{3,2}=6 (1-based domains).
    fn worked_tensor() -> TransferErrorTensor {
        // entry order: (0,1),(0,2),(1,0),(1,2),(2,0),(2,1)
        tensor_from_values(3, &[1.0, 3.0, 2.0, 5.0, 4.0, 6.0])
    }

    #[test]
    fn domain_weights_uniform() {
        let ids: Vec<String> = (0..3).map(|i| format!("d{i}")).collect();
        let w = domain_weights(&[1.0, 1.0, 1.0], &ids, 3, 1).unwrap();
        for v in &w {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
        // scale invariance
        let w2 = domain_weights(&[7.0, 7.0, 7.0], &ids, 3, 1).unwrap();
        assert_eq!(w, w2);
    }

    #[test]
    fn domain_weights_hand_example() {
        let ids: Vec<String> = (0..3).map(|i| format!("d{i}")).collect();
        let w = domain_weights(&[2.0, 1.0, 1.0], &ids, 3, 1).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15);
        assert!((w[1] - 0.125).abs() < 1e-15);
        assert!((w[2] - 0.125).abs() < 1e-15);
        // mass: each target appears in 2 tuples
        let mass: f64 = w.iter().map(|v| 2.0 * v).sum();
        assert!((mass - 1.0).abs() < 1e-15);
    }

    #[test]
    fn domain_weights_reject_nonpositive() {
        let ids: Vec<String> = (0..2).map(|i| format!("d{i}")).collect();
        assert!(domain_weights(&[1.0, 0.0], &ids, 2, 1).is_err());
        assert!(domain_weights(&[1.0, -3.0], &ids, 2, 1).is_err());
    }

    #[test]
    fn uniform_weights_reduce_to_unweighted_interval() {
        let tensor = worked_tensor();
        let spec = LossSpec::squared_identity();
        let tau = rat("0.95");
        let weights: BTreeMap<String, f64> = tensor
            .domain_ids
            .iter()
            .map(|id| (id.clone(), 3.5))
            .collect();
        let weighted =
            weighted_forecast_interval(&tensor, &weights, &tau, Side::OneSidedUpper, &spec, None)
                .unwrap();
        let plain =
            crate::intervals::forecast_interval(&tensor, &tau, Side::OneSidedUpper, &spec).unwrap();
        assert_eq!(weighted, plain);
    }

    #[test]
    fn spec_example_weighted_quantiles() {
        let tensor = worked_tensor();
        let spec = LossSpec::squared_identity();
        let tau = rat("0.95");
        // uniform: upper endpoint is the max of six equal atoms
        let weights: BTreeMap<String, f64> = tensor
            .domain_ids
            .iter()
            .map(|id| (id.clone(), 1.0))
            .collect();
        let iv =
            weighted_forecast_interval(&tensor, &weights, &tau, Side::OneSidedUpper, &spec, None)
                .unwrap();
        assert_eq!(iv.upper, 6.0);
        // heavy weight on domain 0: cumulative mass reaches tau at the
        // largest entry with target 0 (value 4); audited by hand:
        // masses: v=1 -> 1/204, v=2 -> 100/204, v=3 -> 1/204, v=4 -> 100/204
        let mut w = weights.clone();
        w.insert("d0".into(), 100.0);
        let iv2 = weighted_forecast_interval(&tensor, &w, &tau, Side::OneSidedUpper, &spec, None)
            .unwrap();
        assert_eq!(iv2.upper, 4.0);
        assert!(
            iv2.level_exact.is_none(),
            "level not identified for general weights"
        );
        // attaching a Gamma bound reports the Gamma level
        let iv3 =
            weighted_forecast_interval(&tensor, &w, &tau, Side::OneSidedUpper, &spec, Some(100.0))
                .unwrap();
        assert!(iv3.level_exact.is_some());
    }

    #[test]
    fn gamma_level_examples() {
        let tau = rat("0.95");
        let g1 = gamma_level(44, 1, &tau, 1.0, Side::OneSidedUpper).unwrap();
        let prop = coverage_level(44, 1, &tau, Side::OneSidedUpper);
        assert_eq!(g1, prop, "Gamma = 1 must agree with the iid level");
        let g2 = gamma_level(44, 1, &tau, 2.0, Side::OneSidedUpper).unwrap();
        assert!((g2.to_f64().unwrap() - 0.95 * 43.0 / 48.0).abs() < 1e-12);
        // monotone decreasing in Gamma
        let mut prev = f64::INFINITY;
        for g in [1.0, 1.5, 2.0, 5.0, 20.0] {
            let v = gamma_level(10, 1, &tau, g, Side::OneSidedUpper)
                .unwrap()
                .to_f64()
                .unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(gamma_level(10, 1, &tau, 0.5, Side::OneSidedUpper).is_err());
    }

    #[test]
    fn gamma_one_equals_unweighted_quantile_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..25 {
            let tensor = random_tensor(5, &mut rng);
            let dist = crate::intervals::tensor_distribution(&tensor).unwrap();
            for tau in [0.05, 0.31, 0.5, 0.77, 0.95, 1.0] {
                let a = worst_case_upper_bound(&tensor, tau, 1.0).unwrap();
                let b = dist.upper_quantile(tau).unwrap();
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn worst_case_matches_box_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for round in 0..10 {
            let n = 4 + (round % 3);
            let tensor = random_tensor(n, &mut rng);
            for gamma in [1.5, 3.0, 10.0] {
                for tau in [0.5, 0.8, 0.95] {
                    let fast = worst_case_upper_bound(&tensor, tau, gamma).unwrap();
                    let slow = worst_case_box_oracle(&tensor, tau, gamma).unwrap();
                    assert_eq!(
                        fast.to_bits(),
                        slow.to_bits(),
                        "n={n} gamma={gamma} tau={tau} fast={fast} slow={slow}"
                    );
                }
            }
        }
    }

    #[test]
    fn worst_case_bound_monotone_in_gamma() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let tensor = random_tensor(5, &mut rng);
        for tau in [0.5, 0.7, 0.9] {
            let mut prev = f64::NEG_INFINITY;
            for gamma in [1.0, 1.2, 1.5, 2.0, 4.0, 10.0, f64::INFINITY] {
                let v = worst_case_upper_bound(&tensor, tau, gamma).unwrap();
                assert!(v >= prev, "bound must not shrink as the box widens");
                prev = v;
            }
        }
    }

    #[test]
    fn infinite_gamma_hits_worst_target_tail() {
        // with unlimited reweighting the adversary concentrates on one
        // target; for tau below 1 the bound is the max within some target
        let tensor = worked_tensor();
        let v = worst_case_upper_bound(&tensor, 0.9, f64::INFINITY).unwrap();
        // every target's largest value is a candidate; the largest overall
        // value with a single target fully below it is 6
        assert_eq!(v, 6.0);
        let v2 = worst_case_upper_bound(&tensor, 0.4, f64::INFINITY).unwrap();
        // tau=0.4 <= 1/2 of a single target's mass: the adversary can stop
        // at the first value of the slowest target
        assert!(v2 >= 2.0);
    }

    #[test]
    fn curve_mass_is_one_and_quantiles_agree() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let tensor = random_tensor(5, &mut rng);
        for gamma in [1.0, 1.5, 2.0, 10.0, f64::INFINITY] {
            let curve = worst_case_curve(&tensor, gamma).unwrap();
            assert!(
                (curve.total_weight() - curve.len() as f64).abs() < 1e-9
                    || (curve.total_weight() - 1.0).abs() < 1e-12,
                "gamma={gamma} mass={}",
                curve.total_weight()
            );
            for i in 1..=99 {
                let tau = i as f64 / 100.0;
                let via_curve = curve.upper_quantile(tau).unwrap();
                let direct = worst_case_upper_bound(&tensor, tau, gamma).unwrap();
                assert_eq!(
                    via_curve.to_bits(),
                    direct.to_bits(),
                    "gamma={gamma} tau={tau}"
                );
            }
        }
    }

    #[test]
    fn dominance_trivial_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let a = random_tensor(4, &mut rng);
        let mut b = a.clone();
        for e in &mut b.entries {
            e.value += 1.0;
        }
        let grid = default_gamma_grid();
        let self_dom = worst_case_dominates(&a, &a, 0.8, &grid).unwrap();
        assert!(self_dom.dominates_on_grid);
        let ab = worst_case_dominates(&a, &b, 0.8, &grid).unwrap();
        assert!(ab.dominates_on_grid);
        let ba = worst_case_dominates(&b, &a, 0.8, &grid).unwrap();
        assert!(!ba.dominates_on_grid);
        assert!(!ba.crossing_gammas.is_empty());

        let ev_self = everywhere_dominates(&a, &a, 0.8).unwrap();
        assert!(ev_self.dominates);
        let ev_ab = everywhere_dominates(&a, &b, 0.8).unwrap();
        assert!(ev_ab.dominates);
        let ev_ba = everywhere_dominates(&b, &a, 0.8).unwrap();
        assert!(!ev_ba.dominates);
        assert!(ev_ba.witness_omega.is_some());
    }

    #[test]
    fn everywhere_dominance_matches_grid_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let mut disagreements = 0;
        for round in 0..12 {
            let n = 4 + (round % 2);
            let a = random_tensor(n, &mut rng);
            let b = random_tensor(n, &mut rng);
            for tau in [0.6, 0.8] {
                let lp = everywhere_dominates(&a, &b, tau).unwrap().dominates;
                let grid = everywhere_dominates_grid_oracle(&a, &b, tau, 41).unwrap();
                if lp != grid {
                    disagreements += 1;
                    eprintln!("disagreement: n={n} tau={tau} lp={lp} grid={grid}");
                }
            }
        }
        assert_eq!(disagreements, 0);
    }

    #[test]
    fn mismatched_tensors_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let a = random_tensor(4, &mut rng);
        let b = random_tensor(5, &mut rng);
        assert!(worst_case_dominates(&a, &b, 0.8, &[1.0]).is_err());
        assert!(everywhere_dominates(&a, &b, 0.8).is_err());
    }

    #[test]
    fn incomplete_tensor_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut t = random_tensor(4, &mut rng);
        t.entries[0].flag = Some("fit failed".into());
        assert!(matches!(
            worst_case_upper_bound(&t, 0.8, 2.0),
            Err(ShiftError::IncompleteTensor(1))
        ));
    }
}
