//! Observations, domain samples, meta-data, and loss evaluation.
//!
//! A domain is a population with its own joint distribution over lottery
//! features and reported certainty equivalents. Meta-data is an ordered
//! collection of per-domain samples; everything downstream (fitting,
//! transfer tensors, intervals) consumes these types.

use serde::{Deserialize, Serialize};

use crate::rules::{PredictionRule, RuleError};

/// A binary lottery: prize `z1` with probability `p`, prize `z2` otherwise.
///
/// Convention: `|z1| >= |z2|`. Raw data violating the convention is
/// reoriented at ingestion via `(z1, z2, p) -> (z2, z1, 1 - p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lottery {
    pub z1: f64,
    pub z2: f64,
    pub p: f64,
}

impl Lottery {
    pub fn new(z1: f64, z2: f64, p: f64) -> Self {
        Lottery { z1, z2, p }
    }

    /// True if the `|z1| >= |z2|` convention holds.
    pub fn is_oriented(&self) -> bool {
        self.z1.abs() >= self.z2.abs()
    }

    /// Returns the lottery with the orientation convention enforced,
    /// plus a flag telling whether a swap happened. Ties `|z1| == |z2|`
    /// keep the input order.
    pub fn oriented(self) -> (Self, bool) {
        if self.is_oriented() {
            (self, false)
        } else {
            (Lottery::new(self.z2, self.z1, 1.0 - self.p), true)
        }
    }

    /// Expected value `p*z1 + (1-p)*z2`.
    pub fn expected_value(&self) -> f64 {
        self.p * self.z1 + (1.0 - self.p) * self.z2
    }

    /// Covariate vector used by the black-box rules.
    pub fn features(&self) -> [f64; 3] {
        [self.z1, self.z2, self.p]
    }
}

/// One observation: a lottery and the reported certainty equivalent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub lottery: Lottery,
    pub outcome: f64,
}

impl Observation {
    pub fn new(lottery: Lottery, outcome: f64) -> Self {
        Observation { lottery, outcome }
    }
}

/// A sample of observations from one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSample {
    pub id: String,
    pub observations: Vec<Observation>,
}

impl DomainSample {
    pub fn new(id: impl Into<String>, observations: Vec<Observation>) -> Self {
        DomainSample {
            id: id.into(),
            observations,
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// A sample containing the observations of `self` excluding the rows
    /// at `indices` (used by k-fold splits).
    pub fn without_rows(&self, indices: &[usize]) -> DomainSample {
        let drop: std::collections::HashSet<usize> = indices.iter().copied().collect();
        let obs = self
            .observations
            .iter()
            .enumerate()
            .filter(|(i, _)| !drop.contains(i))
            .map(|(_, o)| *o)
            .collect();
        DomainSample::new(self.id.clone(), obs)
    }

    /// A sample restricted to the rows at `indices`, in the given order.
    pub fn rows(&self, indices: &[usize]) -> DomainSample {
        let obs = indices.iter().map(|&i| self.observations[i]).collect();
        DomainSample::new(self.id.clone(), obs)
    }
}

/// Meta-data: an ordered list of domain samples (n >= 2, distinct ids).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaData {
    pub samples: Vec<DomainSample>,
}

impl MetaData {
    pub fn new(samples: Vec<DomainSample>) -> Self {
        MetaData { samples }
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    /// Pools the observations of the samples at `indices` into a single
    /// sample (the training view used by decision rules).
    pub fn pooled(&self, indices: &[usize]) -> DomainSample {
        let id = indices
            .iter()
            .map(|&i| self.samples[i].id.as_str())
            .collect::<Vec<_>>()
            .join("+");
        let obs = indices
            .iter()
            .flat_map(|&i| self.samples[i].observations.iter().copied())
            .collect();
        DomainSample::new(id, obs)
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }
}

/// Loss function (squared error only) plus the reporting transform `g`.
///
/// `g` is strictly increasing on [0, inf), so rankings and quantile
/// endpoints commute with it; `Sqrt` turns mean squared error into RMSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LossSpec {
    pub loss: Loss,
    pub transform: Transform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    SquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    Identity,
    Sqrt,
}

impl LossSpec {
    pub fn squared_identity() -> Self {
        LossSpec {
            loss: Loss::SquaredError,
            transform: Transform::Identity,
        }
    }

    pub fn squared_sqrt() -> Self {
        LossSpec {
            loss: Loss::SquaredError,
            transform: Transform::Sqrt,
        }
    }

    pub fn loss(&self, predicted: f64, observed: f64) -> f64 {
        match self.loss {
            Loss::SquaredError => {
                let d = predicted - observed;
                d * d
            }
        }
    }

    pub fn apply_transform(&self, raw: f64) -> f64 {
        match self.transform {
            Transform::Identity => raw,
            Transform::Sqrt => raw.sqrt(),
        }
    }
}

/// Errors from loss evaluation.
#[derive(Debug, thiserror::Error)]
pub enum MetaError {
    #[error("rule evaluation failed at observation {index} of sample `{sample}`: {source}")]
    Evaluation {
        sample: String,
        index: usize,
        #[source]
        source: RuleError,
    },
    #[error("sample `{0}` is empty")]
    EmptySample(String),
}

/// Average loss of `rule` on `sample`, with the reporting transform applied:
/// `g( (1/|S|) sum l(rule(x), y) )`.
pub fn sample_error(
    rule: &PredictionRule,
    sample: &DomainSample,
    spec: &LossSpec,
) -> Result<f64, MetaError> {
    if sample.is_empty() {
        return Err(MetaError::EmptySample(sample.id.clone()));
    }
    let mut total = 0.0;
    for (index, obs) in sample.observations.iter().enumerate() {
        let pred = rule
            .predict(&obs.lottery)
            .map_err(|source| MetaError::Evaluation {
                sample: sample.id.clone(),
                index,
                source,
            })?;
        total += spec.loss(pred, obs.outcome);
    }
    Ok(spec.apply_transform(total / sample.len() as f64))
}

/// One invariant violation found in a [`MetaData`]. Violations are data,
/// not failures: validation never errors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Domain id, empty for meta-level violations.
    pub domain: String,
    /// Row index within the domain, if applicable.
    pub row: Option<usize>,
    /// Short description of the violated rule.
    pub rule: String,
}

impl Violation {
    fn meta(rule: impl Into<String>) -> Self {
        Violation {
            domain: String::new(),
            row: None,
            rule: rule.into(),
        }
    }

    fn row(domain: &str, row: usize, rule: impl Into<String>) -> Self {
        Violation {
            domain: domain.to_string(),
            row: Some(row),
            rule: rule.into(),
        }
    }
}

/// Checks every type invariant and returns the list of violations
/// (empty iff the meta-data is well formed).
pub fn validate_metadata(meta: &MetaData) -> Vec<Violation> {
    let mut out = Vec::new();
    if meta.n() < 2 {
        out.push(Violation::meta(format!(
            "need at least 2 domains, got {}",
            meta.n()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for sample in &meta.samples {
        if !seen.insert(sample.id.as_str()) {
            out.push(Violation {
                domain: sample.id.clone(),
                row: None,
                rule: "duplicate id".into(),
            });
        }
        if sample.is_empty() {
            out.push(Violation {
                domain: sample.id.clone(),
                row: None,
                rule: "empty sample".into(),
            });
        }
        for (i, obs) in sample.observations.iter().enumerate() {
            let lot = &obs.lottery;
            if !lot.z1.is_finite() || !lot.z2.is_finite() {
                out.push(Violation::row(&sample.id, i, "non-finite prize"));
            }
            if !(0.0..=1.0).contains(&lot.p) {
                out.push(Violation::row(&sample.id, i, "p out of [0,1]"));
            }
            if lot.z1.is_finite() && lot.z2.is_finite() && !lot.is_oriented() {
                out.push(Violation::row(&sample.id, i, "|z1| < |z2|"));
            }
            if !obs.outcome.is_finite() {
                out.push(Violation::row(&sample.id, i, "non-finite outcome"));
            }
        }
    }
    out
}
