//! Transfer evaluation: enumerate every ordered (training-set, target)
//! tuple, fit on the training samples, and evaluate a measure on the target.
//!
//! All shipped rules are invariant to the order of their training samples,
//! so tuples sharing an unordered training set share one value; the tensor
//! stores one entry per (sorted training combination, target) and the
//! logical ordered-tuple multiset carries multiplicity r!. Multiplicities
//! are uniform and cancel in every downstream statistic.
//!
//! Measure values are computed on the untransformed (mean-loss) scale;
//! reporting transforms are applied to interval endpoints, which commutes
//! because the transform is strictly increasing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meta::{sample_error, DomainSample, LossSpec, MetaData, Transform};
use crate::rules::{
    cpt::CptVariant, erm_objective, optim, FitConfig, PredictionRule, RuleConfig, RuleError,
};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("need n >= r+1 domains, got n={n}, r={r}")]
    TooFewDomains { n: usize, r: usize },
    #[error("measure `{kind}` requires {field}")]
    MissingMeasureField { kind: String, field: &'static str },
    #[error("invalid partial-transfer split: {0}")]
    BadSplit(String),
    #[error("k-fold: {0}")]
    KFold(String),
    #[error("fold {fold} fit failed: {source}")]
    FoldFitFailure {
        fold: usize,
        #[source]
        source: RuleError,
    },
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Meta(#[from] crate::meta::MetaError),
}

/// Which scalar is recorded for each (training-set, target) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureKind {
    TransferError,
    Normalized,
    Deterioration,
    Ratio,
    PartialTransfer,
    InverseNormalized,
    InverseDeterioration,
}

impl MeasureKind {
    pub fn name(&self) -> &'static str {
        match self {
            MeasureKind::TransferError => "transfer_error",
            MeasureKind::Normalized => "normalized",
            MeasureKind::Deterioration => "deterioration",
            MeasureKind::Ratio => "ratio",
            MeasureKind::PartialTransfer => "partial_transfer",
            MeasureKind::InverseNormalized => "inverse_normalized",
            MeasureKind::InverseDeterioration => "inverse_deterioration",
        }
    }

    pub fn parse(s: &str) -> Option<MeasureKind> {
        Some(match s {
            "transfer_error" => MeasureKind::TransferError,
            "normalized" => MeasureKind::Normalized,
            "deterioration" => MeasureKind::Deterioration,
            "ratio" => MeasureKind::Ratio,
            "partial_transfer" => MeasureKind::PartialTransfer,
            "inverse_normalized" => MeasureKind::InverseNormalized,
            "inverse_deterioration" => MeasureKind::InverseDeterioration,
            _ => return None,
        })
    }
}

/// Partition of a CPT variant's free parameters into transferred and
/// target-refit sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialSplit {
    pub transferred: Vec<String>,
    pub refit: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSpec {
    pub kind: MeasureKind,
    /// Reference set R for normalized measures.
    #[serde(default)]
    pub reference_rules: Vec<RuleConfig>,
    /// (numerator, denominator) rules for the ratio measure.
    #[serde(default)]
    pub ratio_pair: Option<(RuleConfig, RuleConfig)>,
    /// Parameter split for partial transfer.
    #[serde(default)]
    pub partial_split: Option<PartialSplit>,
}

impl MeasureSpec {
    pub fn plain(kind: MeasureKind) -> Self {
        MeasureSpec {
            kind,
            reference_rules: Vec::new(),
            ratio_pair: None,
            partial_split: None,
        }
    }

    pub fn normalized(reference_rules: Vec<RuleConfig>) -> Self {
        MeasureSpec {
            kind: MeasureKind::Normalized,
            reference_rules,
            ratio_pair: None,
            partial_split: None,
        }
    }

    pub fn inverse_normalized(reference_rules: Vec<RuleConfig>) -> Self {
        MeasureSpec {
            kind: MeasureKind::InverseNormalized,
            reference_rules,
            ratio_pair: None,
            partial_split: None,
        }
    }

    pub fn ratio(a: RuleConfig, b: RuleConfig) -> Self {
        MeasureSpec {
            kind: MeasureKind::Ratio,
            reference_rules: Vec::new(),
            ratio_pair: Some((a, b)),
            partial_split: None,
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            MeasureKind::Ratio => {
                let (a, b) = self.ratio_pair.as_ref().expect("validated");
                format!("ratio({},{})", a.label(), b.label())
            }
            MeasureKind::PartialTransfer => {
                let split = self.partial_split.as_ref().expect("validated");
                format!(
                    "partial_transfer(theta={};lambda={})",
                    split.transferred.join("+"),
                    split.refit.join("+")
                )
            }
            kind => kind.name().to_string(),
        }
    }

    fn validate(&self) -> Result<(), TransferError> {
        let missing = |field| TransferError::MissingMeasureField {
            kind: self.kind.name().to_string(),
            field,
        };
        match self.kind {
            MeasureKind::Normalized | MeasureKind::InverseNormalized => {
                if self.reference_rules.is_empty() {
                    return Err(missing("reference_rules"));
                }
            }
            MeasureKind::Ratio => {
                if self.ratio_pair.is_none() {
                    return Err(missing("ratio_pair"));
                }
            }
            MeasureKind::PartialTransfer if self.partial_split.is_none() => {
                return Err(missing("partial_split"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// One per (sorted training combination, target); `flag` marks entries
/// excluded from downstream statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub train: Vec<usize>,
    pub target: usize,
    pub value: f64,
    pub flag: Option<String>,
}

/// Pooled measure values over every (training-set, target) tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferErrorTensor {
    pub n: usize,
    pub r: usize,
    pub domain_ids: Vec<String>,
    pub entries: Vec<TensorEntry>,
    pub rule: String,
    pub measure: String,
    pub seed: u64,
}

impl TransferErrorTensor {
    /// Number of stored (unordered-training, target) entries: C(n,r)*(n-r).
    pub fn unordered_len(&self) -> usize {
        self.entries.len()
    }

    /// Size of the logical ordered-tuple multiset: n!/(n-r-1)!.
    pub fn logical_len(&self) -> usize {
        self.entries.len() * factorial(self.r)
    }

    pub fn flagged_count(&self) -> usize {
        self.entries.iter().filter(|e| e.flag.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.flagged_count() == 0
    }

    /// Values of unflagged entries, in entry order.
    pub fn ok_values(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.flag.is_none())
            .map(|e| e.value)
            .collect()
    }

    /// (value, target) pairs of unflagged entries.
    pub fn ok_valued_targets(&self) -> Vec<(f64, usize)> {
        self.entries
            .iter()
            .filter(|e| e.flag.is_none())
            .map(|e| (e.value, e.target))
            .collect()
    }
}

pub(crate) fn factorial(k: usize) -> usize {
    (1..=k).product::<usize>().max(1)
}

/// All r-subsets of 0..n as sorted index vectors, lexicographic order.
pub fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if r == 0 {
        return vec![Vec::new()];
    }
    if r > n {
        return out;
    }
    let mut combo: Vec<usize> = (0..r).collect();
    loop {
        out.push(combo.clone());
        let mut i = r;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if combo[i] < n - (r - i) {
                combo[i] += 1;
                for j in i + 1..r {
                    combo[j] = combo[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// FNV-1a over the training-set ids; makes bootstrap streams depend only on
/// the identity of the training set (plus the run seed), so byte-identical
/// training sets always produce byte-identical fits.
fn seed_mix(ids: &[&str], run_seed: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for id in ids {
        for b in id.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h ^= 0x1f;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ run_seed
}

fn identity_spec(spec: &LossSpec) -> LossSpec {
    LossSpec {
        loss: spec.loss,
        transform: Transform::Identity,
    }
}

struct FitTable {
    fits: Vec<Result<PredictionRule, RuleError>>,
}

fn fit_all_combos(
    meta: &MetaData,
    combos: &[Vec<usize>],
    rule: &RuleConfig,
    spec: &LossSpec,
    fit_cfg: &FitConfig,
    run_seed: u64,
) -> FitTable {
    let fits = combos
        .par_iter()
        .map(|combo| {
            let samples: Vec<&DomainSample> = combo.iter().map(|&i| &meta.samples[i]).collect();
            let ids: Vec<&str> = combo.iter().map(|&i| meta.samples[i].id.as_str()).collect();
            rule.fit(&samples, spec, fit_cfg, seed_mix(&ids, run_seed))
        })
        .collect();
    FitTable { fits }
}

/// In-sample fit+error of `rule` on each single domain (denominators of the
/// normalized and deterioration measures).
fn in_sample_errors(
    meta: &MetaData,
    rule: &RuleConfig,
    spec: &LossSpec,
    fit_cfg: &FitConfig,
    run_seed: u64,
) -> Vec<Result<f64, RuleError>> {
    (0..meta.n())
        .into_par_iter()
        .map(|d| {
            let s = &meta.samples[d];
            let mix = seed_mix(&[s.id.as_str()], run_seed);
            let rule = rule.fit(&[s], spec, fit_cfg, mix)?;
            sample_error(&rule, s, &identity_spec(spec))
                .map_err(|e| RuleError::FitFailure(e.to_string()))
        })
        .collect()
}

/// Computes the pooled tensor of measure values for every (training-set,
/// target) tuple. Failed fits and zero denominators flag the affected
/// entries; flagged entries are excluded downstream and surface as a
/// warning count in artifacts.
pub fn pooled_transfer_errors(
    meta: &MetaData,
    rule: &RuleConfig,
    r: usize,
    measure: &MeasureSpec,
    spec: &LossSpec,
    fit_cfg: &FitConfig,
    seed: u64,
) -> Result<TransferErrorTensor, TransferError> {
    let n = meta.n();
    if r == 0 || n < r + 1 {
        return Err(TransferError::TooFewDomains { n, r });
    }
    measure.validate()?;
    let eval_spec = identity_spec(spec);
    let combos = combinations(n, r);

    // numerator fits (partial transfer refits inline instead)
    let fit_table = if measure.kind == MeasureKind::PartialTransfer {
        None
    } else {
        Some(fit_all_combos(meta, &combos, rule, spec, fit_cfg, seed))
    };
    let ratio_table = match (&measure.kind, &measure.ratio_pair) {
        (MeasureKind::Ratio, Some((a, b))) => Some((
            fit_all_combos(meta, &combos, a, spec, fit_cfg, seed),
            fit_all_combos(meta, &combos, b, spec, fit_cfg, seed),
        )),
        _ => None,
    };

    let own_in_sample = match measure.kind {
        MeasureKind::Deterioration | MeasureKind::InverseDeterioration => {
            Some(in_sample_errors(meta, rule, spec, fit_cfg, seed))
        }
        _ => None,
    };
    let best_reference = match measure.kind {
        MeasureKind::Normalized | MeasureKind::InverseNormalized => {
            let per_rule: Vec<Vec<Result<f64, RuleError>>> = measure
                .reference_rules
                .iter()
                .map(|rc| in_sample_errors(meta, rc, spec, fit_cfg, seed))
                .collect();
            let best: Vec<Option<f64>> = (0..n)
                .map(|d| {
                    per_rule
                        .iter()
                        .filter_map(|v| v[d].as_ref().ok().copied())
                        .min_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal))
                })
                .collect();
            Some(best)
        }
        _ => None,
    };

    let mut entries = Vec::with_capacity(combos.len() * (n - r));
    for (ci, combo) in combos.iter().enumerate() {
        for target in 0..n {
            if combo.contains(&target) {
                continue;
            }
            let target_sample = &meta.samples[target];

            let raw: Result<f64, String> = match measure.kind {
                MeasureKind::PartialTransfer => {
                    let split = measure.partial_split.as_ref().expect("validated");
                    match rule {
                        RuleConfig::Cpt { variant, .. } => {
                            let train: Vec<&DomainSample> =
                                combo.iter().map(|&i| &meta.samples[i]).collect();
                            partial_transfer_error(
                                *variant,
                                split,
                                &train,
                                target_sample,
                                &eval_spec,
                                fit_cfg,
                            )
                        }
                        _ => Err("partial transfer requires a cpt rule".into()),
                    }
                }
                MeasureKind::Ratio => {
                    let (ta, tb) = ratio_table.as_ref().expect("validated");
                    match (&ta.fits[ci], &tb.fits[ci]) {
                        (Ok(fa), Ok(fb)) => {
                            match (
                                sample_error(fa, target_sample, &eval_spec),
                                sample_error(fb, target_sample, &eval_spec),
                            ) {
                                (Ok(ea), Ok(eb)) if eb > 0.0 => Ok(ea / eb),
                                (Ok(_), Ok(_)) => Err("zero denominator".into()),
                                (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
                            }
                        }
                        (Err(e), _) | (_, Err(e)) => Err(format!("fit failed: {e}")),
                    }
                }
                _ => {
                    let table = fit_table.as_ref().expect("fit table");
                    match &table.fits[ci] {
                        Ok(fitted) => match sample_error(fitted, target_sample, &eval_spec) {
                            Ok(num) => match measure.kind {
                                MeasureKind::TransferError => Ok(num),
                                MeasureKind::Normalized | MeasureKind::InverseNormalized => {
                                    match best_reference.as_ref().expect("validated")[target] {
                                        Some(den) if den > 0.0 => {
                                            if measure.kind == MeasureKind::Normalized {
                                                Ok(num / den)
                                            } else if num > 0.0 {
                                                Ok(den / num)
                                            } else {
                                                Err("zero denominator".into())
                                            }
                                        }
                                        Some(_) => Err("zero denominator".into()),
                                        None => Err("all reference fits failed".into()),
                                    }
                                }
                                MeasureKind::Deterioration | MeasureKind::InverseDeterioration => {
                                    match &own_in_sample.as_ref().expect("validated")[target] {
                                        Ok(den) if *den > 0.0 => {
                                            if measure.kind == MeasureKind::Deterioration {
                                                Ok(num / den)
                                            } else if num > 0.0 {
                                                Ok(*den / num)
                                            } else {
                                                Err("zero denominator".into())
                                            }
                                        }
                                        Ok(_) => Err("zero denominator".into()),
                                        Err(e) => Err(e.to_string()),
                                    }
                                }
                                _ => unreachable!(),
                            },
                            Err(e) => Err(e.to_string()),
                        },
                        Err(e) => Err(format!("fit failed: {e}")),
                    }
                }
            };
            entries.push(match raw {
                Ok(v) if v.is_finite() => TensorEntry {
                    train: combo.clone(),
                    target,
                    value: v,
                    flag: None,
                },
                Ok(_) => TensorEntry {
                    train: combo.clone(),
                    target,
                    value: f64::NAN,
                    flag: Some("non-finite value".into()),
                },
                Err(reason) => TensorEntry {
                    train: combo.clone(),
                    target,
                    value: f64::NAN,
                    flag: Some(reason),
                },
            });
        }
    }

    Ok(TransferErrorTensor {
        n,
        r,
        domain_ids: meta.ids(),
        entries,
        rule: rule.label(),
        measure: measure.label(),
        seed,
    })
}

/// Partial transfer: the `transferred` parameters are fitted on the
/// training samples under the best per-sample choice of the `refit`
/// parameters, then the refit parameters are re-estimated on the target
/// with the transferred ones frozen. Returns the target error at the
/// combined parameter vector.
pub fn partial_transfer_error(
    variant: CptVariant,
    split: &PartialSplit,
    train: &[&DomainSample],
    target: &DomainSample,
    spec: &LossSpec,
    fit_cfg: &FitConfig,
) -> Result<f64, String> {
    let free = variant.free_params();
    let mut seen = std::collections::BTreeSet::new();
    for name in split.transferred.iter().chain(&split.refit) {
        if !free.contains(&name.as_str()) {
            return Err(format!(
                "parameter `{name}` is not free in variant {}",
                variant.name()
            ));
        }
        if !seen.insert(name.clone()) {
            return Err(format!("parameter `{name}` assigned twice"));
        }
    }
    if seen.len() != free.len() {
        return Err("split must cover every free parameter".into());
    }

    let (lo, hi) = variant.bounds(crate::rules::DEFAULT_DELTA_MAX);
    let theta_idx: Vec<usize> = free
        .iter()
        .enumerate()
        .filter(|(_, n)| split.transferred.iter().any(|t| t == *n))
        .map(|(i, _)| i)
        .collect();
    let lambda_idx: Vec<usize> = free
        .iter()
        .enumerate()
        .filter(|(_, n)| split.refit.iter().any(|t| t == *n))
        .map(|(i, _)| i)
        .collect();

    let assemble = |theta: &[f64], lambda: &[f64]| -> Vec<f64> {
        let mut full = vec![1.0; free.len()];
        for (k, &i) in theta_idx.iter().enumerate() {
            full[i] = theta[k];
        }
        for (k, &i) in lambda_idx.iter().enumerate() {
            full[i] = lambda[k];
        }
        full
    };
    let sub = |idx: &[usize], v: &[f64]| -> Vec<f64> { idx.iter().map(|&i| v[i]).collect() };
    let family = crate::rules::ErmFamily::Cpt {
        variant,
        delta_max: crate::rules::DEFAULT_DELTA_MAX,
    };

    // min over lambda of the error on one sample, theta fixed
    let inner = |theta: &[f64], s: &DomainSample| -> optim::Minimum {
        optim::minimize_on_box(
            |lambda| erm_objective(&family, &assemble(theta, lambda), &[s], spec),
            &sub(&lambda_idx, &lo),
            &sub(&lambda_idx, &hi),
            fit_cfg,
        )
    };

    let outer = optim::minimize_on_box(
        |theta| train.iter().map(|s| inner(theta, s).objective).sum::<f64>() / train.len() as f64,
        &sub(&theta_idx, &lo),
        &sub(&theta_idx, &hi),
        fit_cfg,
    );
    if !outer.objective.is_finite() {
        return Err("partial-transfer fit undefined everywhere".into());
    }
    let refit = inner(&outer.params, target);
    if !refit.objective.is_finite() {
        return Err("target refit undefined everywhere".into());
    }
    Ok(refit.objective)
}

/// Seeded k-fold cross-validation error within one sample: shuffle rows,
/// deal them round-robin into k folds, average the k held-out errors.
pub fn kfold_cv_error(
    sample: &DomainSample,
    rule: &RuleConfig,
    k: usize,
    spec: &LossSpec,
    fit_cfg: &FitConfig,
    seed: u64,
) -> Result<f64, TransferError> {
    if k < 2 {
        return Err(TransferError::KFold(format!("k must be >= 2, got {k}")));
    }
    if sample.len() < k {
        return Err(TransferError::KFold(format!(
            "sample `{}` has {} rows, fewer than k={k}",
            sample.id,
            sample.len()
        )));
    }
    let mut indices: Vec<usize> = (0..sample.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let mut total = 0.0;
    for fold in 0..k {
        let held: Vec<usize> = indices.iter().copied().skip(fold).step_by(k).collect();
        let train = sample.without_rows(&held);
        let test = sample.rows(&held);
        let fitted = rule
            .fit(
                &[&train],
                spec,
                fit_cfg,
                seed_mix(&[sample.id.as_str()], seed ^ fold as u64),
            )
            .map_err(|source| TransferError::FoldFitFailure { fold, source })?;
        total += sample_error(&fitted, &test, spec).map_err(|e| TransferError::FoldFitFailure {
            fold,
            source: RuleError::FitFailure(e.to_string()),
        })?;
    }
    Ok(total / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::{Lottery, Observation};

    fn sample(id: &str, rows: &[(f64, f64, f64, f64)]) -> DomainSample {
        DomainSample::new(
            id,
            rows.iter()
                .map(|&(z1, z2, p, y)| Observation::new(Lottery::new(z1, z2, p), y))
                .collect(),
        )
    }

    fn meta2() -> MetaData {
        MetaData::new(vec![
            sample("a", &[(10.0, 0.0, 0.5, 3.0), (8.0, 2.0, 0.3, 3.5)]),
            sample("b", &[(20.0, 10.0, 0.1, 11.0)]),
        ])
    }

    #[test]
    fn tensor_counts() {
        let t = pooled_transfer_errors(
            &meta2(),
            &RuleConfig::Constant { value: 3.0 },
            1,
            &MeasureSpec::plain(MeasureKind::TransferError),
            &LossSpec::squared_identity(),
            &FitConfig::default(),
            0,
        )
        .unwrap();
        assert_eq!(t.unordered_len(), 2);
        assert_eq!(t.logical_len(), 2);
        // n=44, r=1 tuple count, without fitting anything
        assert_eq!(combinations(44, 1).len() * 43, 1892);
        assert_eq!(factorial(2), 2);
    }

    #[test]
    fn too_few_domains_rejected() {
        assert!(pooled_transfer_errors(
            &meta2(),
            &RuleConfig::Constant { value: 3.0 },
            2,
            &MeasureSpec::plain(MeasureKind::TransferError),
            &LossSpec::squared_identity(),
            &FitConfig::default(),
            0,
        )
        .is_err());
    }

    #[test]
    fn deterioration_on_identical_domains_is_one() {
        let rows = [
            (10.0, 0.0, 0.5, 3.0),
            (8.0, 2.0, 0.3, 4.5),
            (6.0, 1.0, 0.7, 4.0),
        ];
        let meta = MetaData::new(vec![sample("a", &rows), sample("b", &rows)]);
        let t = pooled_transfer_errors(
            &meta,
            &RuleConfig::eu(),
            1,
            &MeasureSpec::plain(MeasureKind::Deterioration),
            &LossSpec::squared_identity(),
            &FitConfig::default(),
            0,
        )
        .unwrap();
        assert!(t.is_complete());
        for e in &t.entries {
            assert_eq!(e.value, 1.0);
        }
    }

    #[test]
    fn ratio_of_rule_to_itself_is_one() {
        let meta = MetaData::new(vec![
            sample("a", &[(10.0, 0.0, 0.5, 3.0), (8.0, 2.0, 0.3, 4.5)]),
            sample("b", &[(20.0, 10.0, 0.1, 9.0), (6.0, 1.0, 0.7, 4.0)]),
            sample("c", &[(12.0, 3.0, 0.4, 6.0)]),
        ]);
        let t = pooled_transfer_errors(
            &meta,
            &RuleConfig::eu(),
            1,
            &MeasureSpec::ratio(RuleConfig::eu(), RuleConfig::eu()),
            &LossSpec::squared_identity(),
            &FitConfig::default(),
            0,
        )
        .unwrap();
        assert!(t.is_complete());
        for e in &t.entries {
            assert_eq!(e.value, 1.0);
        }
    }

    #[test]
    fn normalized_is_quotient_of_transfer_and_best_reference() {
        let meta = MetaData::new(vec![
            sample("a", &[(10.0, 0.0, 0.5, 3.0), (8.0, 2.0, 0.3, 4.5)]),
            sample("b", &[(20.0, 10.0, 0.1, 9.0), (6.0, 1.0, 0.7, 4.0)]),
        ]);
        let spec = LossSpec::squared_identity();
        let cfg = FitConfig::default();
        let refs = vec![
            RuleConfig::Constant { value: 5.0 },
            RuleConfig::Constant { value: 6.0 },
        ];
        let t = pooled_transfer_errors(
            &meta,
            &RuleConfig::Constant { value: 3.0 },
            1,
            &MeasureSpec::normalized(refs.clone()),
            &spec,
            &cfg,
            0,
        )
        .unwrap();
        let plain = pooled_transfer_errors(
            &meta,
            &RuleConfig::Constant { value: 3.0 },
            1,
            &MeasureSpec::plain(MeasureKind::TransferError),
            &spec,
            &cfg,
            0,
        )
        .unwrap();
        for (e, p) in t.entries.iter().zip(&plain.entries) {
            let best = refs
                .iter()
                .map(|rc| {
                    let rule = rc.fit(&[&meta.samples[e.target]], &spec, &cfg, 0).unwrap();
                    sample_error(&rule, &meta.samples[e.target], &spec).unwrap()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((e.value - p.value / best).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_and_transfer_rank_rules_identically_per_pair() {
        let meta = MetaData::new(vec![
            sample("a", &[(10.0, 0.0, 0.5, 3.0), (8.0, 2.0, 0.3, 4.5)]),
            sample("b", &[(20.0, 10.0, 0.1, 9.0), (6.0, 1.0, 0.7, 4.0)]),
        ]);
        let spec = LossSpec::squared_identity();
        let cfg = FitConfig::default();
        let refs = vec![RuleConfig::eu()];
        let rules = [
            RuleConfig::Constant { value: 3.0 },
            RuleConfig::Constant { value: 7.0 },
        ];
        let mut raws = Vec::new();
        let mut norms = Vec::new();
        for rc in &rules {
            raws.push(
                pooled_transfer_errors(
                    &meta,
                    rc,
                    1,
                    &MeasureSpec::plain(MeasureKind::TransferError),
                    &spec,
                    &cfg,
                    0,
                )
                .unwrap(),
            );
            norms.push(
                pooled_transfer_errors(
                    &meta,
                    rc,
                    1,
                    &MeasureSpec::normalized(refs.clone()),
                    &spec,
                    &cfg,
                    0,
                )
                .unwrap(),
            );
        }
        for i in 0..raws[0].entries.len() {
            if norms[0].entries[i].flag.is_some() || norms[1].entries[i].flag.is_some() {
                continue;
            }
            let raw_order = raws[0].entries[i].value < raws[1].entries[i].value;
            let norm_order = norms[0].entries[i].value < norms[1].entries[i].value;
            assert_eq!(raw_order, norm_order, "denominator is rule-independent");
        }
    }

    #[test]
    fn erm_deterioration_at_least_one() {
        let meta = MetaData::new(vec![
            sample(
                "a",
                &[
                    (10.0, 0.0, 0.5, 3.0),
                    (8.0, 2.0, 0.3, 4.5),
                    (9.0, 1.0, 0.6, 5.0),
                ],
            ),
            sample(
                "b",
                &[
                    (20.0, 10.0, 0.1, 9.0),
                    (6.0, 1.0, 0.7, 4.0),
                    (7.0, 2.0, 0.2, 3.0),
                ],
            ),
        ]);
        let t = pooled_transfer_errors(
            &meta,
            &RuleConfig::eu(),
            1,
            &MeasureSpec::plain(MeasureKind::Deterioration),
            &LossSpec::squared_identity(),
            &FitConfig::default(),
            0,
        )
        .unwrap();
        for e in &t.entries {
            assert!(
                e.value >= 1.0 - 1e-6,
                "deterioration {} below ERM floor",
                e.value
            );
        }
    }

    #[test]
    fn partial_transfer_degenerate_splits() {
        let train = sample("a", &[(10.0, 0.0, 0.5, 3.0), (8.0, 2.0, 0.3, 4.5)]);
        let target = sample("b", &[(20.0, 10.0, 0.1, 9.0), (6.0, 1.0, 0.7, 4.0)]);
        let spec = LossSpec::squared_identity();
        let cfg = FitConfig {
            grid_resolution: 13,
            ..Default::default()
        };
        let variant = CptVariant::Dg;

        // everything transferred: ordinary transfer error
        let all_theta = PartialSplit {
            transferred: vec!["delta".into(), "gamma".into()],
            refit: vec![],
        };
        let v1 =
            partial_transfer_error(variant, &all_theta, &[&train], &target, &spec, &cfg).unwrap();
        let fitted = RuleConfig::cpt(variant)
            .fit(&[&train], &spec, &cfg, 0)
            .unwrap();
        let direct = sample_error(&fitted, &target, &spec).unwrap();
        assert!((v1 - direct).abs() < 1e-7, "{v1} vs {direct}");

        // everything refit: target in-sample error
        let all_lambda = PartialSplit {
            transferred: vec![],
            refit: vec!["delta".into(), "gamma".into()],
        };
        let v2 =
            partial_transfer_error(variant, &all_lambda, &[&train], &target, &spec, &cfg).unwrap();
        let target_fit = RuleConfig::cpt(variant)
            .fit(&[&target], &spec, &cfg, 0)
            .unwrap();
        let in_sample = sample_error(&target_fit, &target, &spec).unwrap();
        assert!((v2 - in_sample).abs() < 1e-7, "{v2} vs {in_sample}");

        // a proper split lands between in-sample and full-transfer error
        let mixed = PartialSplit {
            transferred: vec!["gamma".into()],
            refit: vec!["delta".into()],
        };
        let v3 = partial_transfer_error(variant, &mixed, &[&train], &target, &spec, &cfg).unwrap();
        assert!(
            v3 >= in_sample - 1e-7 && v3 <= direct + 1e-7,
            "{in_sample} <= {v3} <= {direct}"
        );
    }

    #[test]
    fn kfold_constant_outcomes_zero_error() {
        let rows: Vec<(f64, f64, f64, f64)> =
            (0..12).map(|i| (10.0 + i as f64, 0.0, 0.5, 4.0)).collect();
        let s = sample("a", &rows);
        let e = kfold_cv_error(
            &s,
            &RuleConfig::Forest(Default::default()),
            4,
            &LossSpec::squared_identity(),
            &FitConfig::default(),
            7,
        )
        .unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn kfold_equals_explicit_loo() {
        let rows = [
            (10.0, 0.0, 0.5, 3.0),
            (8.0, 2.0, 0.3, 4.5),
            (9.0, 1.0, 0.6, 5.0),
            (20.0, 10.0, 0.1, 9.0),
            (6.0, 1.0, 0.7, 4.0),
        ];
        let s = sample("a", &rows);
        let spec = LossSpec::squared_identity();
        let cfg = FitConfig::default();
        let k = s.len();
        let got = kfold_cv_error(&s, &RuleConfig::eu(), k, &spec, &cfg, 3).unwrap();
        // brute-force leave-one-out; singleton folds, the shuffle only
        // permutes the order of the averaged terms
        let mut total = 0.0;
        for i in 0..s.len() {
            let train = s.without_rows(&[i]);
            let test = s.rows(&[i]);
            let fitted = RuleConfig::eu().fit(&[&train], &spec, &cfg, 0).unwrap();
            total += sample_error(&fitted, &test, &spec).unwrap();
        }
        let want = total / s.len() as f64;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn kfold_partition_sizes() {
        let rows: Vec<(f64, f64, f64, f64)> = (0..20)
            .map(|i| (10.0 + i as f64, 0.0, 0.5, 4.0 + i as f64))
            .collect();
        let s = sample("a", &rows);
        let mut indices: Vec<usize> = (0..20).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        indices.shuffle(&mut rng);
        for fold in 0..10 {
            let held: Vec<usize> = indices.iter().copied().skip(fold).step_by(10).collect();
            assert_eq!(held.len(), 2);
        }
        assert!(kfold_cv_error(
            &s,
            &RuleConfig::Constant { value: 1.0 },
            10,
            &LossSpec::squared_identity(),
            &FitConfig::default(),
            9
        )
        .is_ok());
    }

    #[test]
    fn missing_measure_fields_rejected() {
        let bad = MeasureSpec::plain(MeasureKind::Normalized);
        assert!(matches!(
            pooled_transfer_errors(
                &meta2(),
                &RuleConfig::Constant { value: 3.0 },
                1,
                &bad,
                &LossSpec::squared_identity(),
                &FitConfig::default(),
                0
            ),
            Err(TransferError::MissingMeasureField { .. })
        ));
    }

    #[test]
    fn zero_denominator_flags_entry() {
        // EU fits each single-lottery domain exactly, so the normalized
        // denominator collapses to ~0; entries must not pass through
        let meta = MetaData::new(vec![
            sample("a", &[(10.0, 0.0, 0.5, 3.0)]),
            sample("b", &[(20.0, 10.0, 0.1, 5.0)]),
        ]);
        let t = pooled_transfer_errors(
            &meta,
            &RuleConfig::Constant { value: 3.0 },
            1,
            &MeasureSpec::normalized(vec![RuleConfig::Constant { value: 3.0 }]),
            &LossSpec::squared_identity(),
            &FitConfig::default(),
            0,
        )
        .unwrap();
        // reference constant 3 fits domain a exactly -> entry flagged
        assert!(t.flagged_count() >= 1);
    }

    #[test]
    fn run_determinism() {
        let meta = meta2();
        let spec = LossSpec::squared_identity();
        let cfg = FitConfig::default();
        let rc = RuleConfig::Forest(Default::default());
        let make = |seed| {
            pooled_transfer_errors(
                &meta,
                &rc,
                1,
                &MeasureSpec::plain(MeasureKind::TransferError),
                &spec,
                &cfg,
                seed,
            )
            .unwrap()
        };
        assert_eq!(make(42), make(42));
        assert_eq!(make(43).seed, 43);
    }
}
