//! Predicting relative transfer performance (error ratios) from lottery-set
//! features of the training and test samples.
//!
//! Each sample is summarized by 22 numbers: mean/sd/max/min for each of
//! z1, z2, p, 1-p, and the expected value, plus the sample size and a
//! gains-only indicator. Predictors: best constant, OLS with intercept,
//! exhaustive 1-split stump, and the random forest from the rules module.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meta::DomainSample;
use crate::rules::tree::{fit_forest, fit_tree, Forest, ForestConfig, RegressionTree};

#[derive(Debug, Error)]
pub enum MetaRegError {
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("ratios must be positive and finite; row {0} has {1}")]
    BadRatio(usize, f64),
    #[error("k-fold: {0}")]
    KFold(String),
}

pub const FEATURE_GROUPS: [&str; 5] = ["z1", "z2", "p", "q", "ev"];
pub const FEATURE_STATS: [&str; 4] = ["mean", "sd", "max", "min"];

/// 22 numeric features of one sample's lottery set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFeatures(pub Vec<f64>);

/// Column names in feature order, with the given prefix (`tr_` / `te_`).
pub fn feature_names(prefix: &str) -> Vec<String> {
    let mut names = Vec::with_capacity(22);
    for group in FEATURE_GROUPS {
        for stat in FEATURE_STATS {
            names.push(format!("{prefix}{group}_{stat}"));
        }
    }
    names.push(format!("{prefix}size"));
    names.push(format!("{prefix}gains_only"));
    names
}

fn group_stats(values: &[f64]) -> [f64; 4] {
    if values.iter().all(|v| *v == values[0]) {
        return [values[0], 0.0, values[0], values[0]];
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    // population convention (divide by m)
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    [mean, var.sqrt(), max, min]
}

/// Summarizes a sample's lottery set; order-invariant over observations.
pub fn sample_features(sample: &DomainSample) -> SampleFeatures {
    assert!(!sample.is_empty(), "sample_features needs observations");
    let lots: Vec<_> = sample.observations.iter().map(|o| o.lottery).collect();
    let columns: [Vec<f64>; 5] = [
        lots.iter().map(|l| l.z1).collect(),
        lots.iter().map(|l| l.z2).collect(),
        lots.iter().map(|l| l.p).collect(),
        lots.iter().map(|l| 1.0 - l.p).collect(),
        lots.iter().map(|l| l.expected_value()).collect(),
    ];
    let mut out = Vec::with_capacity(22);
    for col in &columns {
        out.extend(group_stats(col));
    }
    out.push(sample.len() as f64);
    let gains_only = lots.iter().all(|l| l.z1 >= 0.0 && l.z2 >= 0.0);
    out.push(if gains_only { 1.0 } else { 0.0 });
    SampleFeatures(out)
}

/// Which features enter the regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    TrainOnly,
    TestOnly,
    Both,
}

impl FeatureSet {
    pub fn parse(s: &str) -> Option<FeatureSet> {
        match s {
            "train_only" | "train" => Some(FeatureSet::TrainOnly),
            "test_only" | "test" => Some(FeatureSet::TestOnly),
            "both" => Some(FeatureSet::Both),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeatureSet::TrainOnly => "train_only",
            FeatureSet::TestOnly => "test_only",
            FeatureSet::Both => "both",
        }
    }
}

/// One transfer task: training-sample features, test-sample features, and
/// the realized error ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub train: SampleFeatures,
    pub test: SampleFeatures,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioDataset {
    pub rows: Vec<RatioRow>,
    pub feature_set: FeatureSet,
}

impl RatioDataset {
    pub fn validate(&self) -> Result<(), MetaRegError> {
        if self.rows.len() < 2 {
            return Err(MetaRegError::TooFewRows(self.rows.len()));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if !(row.ratio.is_finite() && row.ratio > 0.0) {
                return Err(MetaRegError::BadRatio(i, row.ratio));
            }
        }
        Ok(())
    }

    /// Design rows under the configured feature set.
    pub fn design(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|row| match self.feature_set {
                FeatureSet::TrainOnly => row.train.0.clone(),
                FeatureSet::TestOnly => row.test.0.clone(),
                FeatureSet::Both => {
                    let mut v = row.train.0.clone();
                    v.extend(row.test.0.iter());
                    v
                }
            })
            .collect()
    }

    pub fn design_names(&self) -> Vec<String> {
        match self.feature_set {
            FeatureSet::TrainOnly => feature_names("tr_"),
            FeatureSet::TestOnly => feature_names("te_"),
            FeatureSet::Both => {
                let mut v = feature_names("tr_");
                v.extend(feature_names("te_"));
                v
            }
        }
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.ratio).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMethod {
    Constant,
    LeastSquares,
    Stump,
    Forest,
}

impl RatioMethod {
    pub fn parse(s: &str) -> Option<RatioMethod> {
        match s {
            "constant" => Some(RatioMethod::Constant),
            "least_squares" | "ols" => Some(RatioMethod::LeastSquares),
            "stump" => Some(RatioMethod::Stump),
            "forest" | "rf" => Some(RatioMethod::Forest),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RatioMethod::Constant => "constant",
            RatioMethod::LeastSquares => "least_squares",
            RatioMethod::Stump => "stump",
            RatioMethod::Forest => "forest",
        }
    }
}

/// A fitted ratio predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RatioPredictor {
    Constant(f64),
    /// Intercept plus one coefficient per kept column; dropped columns are
    /// recorded by index.
    LeastSquares {
        intercept: f64,
        coefficients: Vec<f64>,
        kept: Vec<usize>,
        dropped: Vec<usize>,
    },
    Stump(RegressionTree),
    Forest(Forest),
}

impl RatioPredictor {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            RatioPredictor::Constant(c) => *c,
            RatioPredictor::LeastSquares {
                intercept,
                coefficients,
                kept,
                ..
            } => {
                intercept
                    + kept
                        .iter()
                        .zip(coefficients)
                        .map(|(&col, &w)| w * x[col])
                        .sum::<f64>()
            }
            RatioPredictor::Stump(tree) => tree.predict(x),
            RatioPredictor::Forest(f) => f.predict(x),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioFit {
    pub method: RatioMethod,
    pub predictor: RatioPredictor,
    pub training_mse: f64,
    pub cv_mse: f64,
    /// OLS columns dropped for rank deficiency (empty otherwise).
    pub dropped_columns: Vec<String>,
}

fn mse(pred: &RatioPredictor, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    let s: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let d = pred.predict(x) - y;
            d * d
        })
        .sum();
    s / ys.len() as f64
}

/// OLS with intercept via modified Gram-Schmidt; nearly dependent columns
/// (including constants, already absorbed by the intercept) are dropped and
/// reported rather than failing.
fn fit_least_squares(xs: &[Vec<f64>], ys: &[f64]) -> RatioPredictor {
    let n = xs.len();
    let d = xs[0].len();
    // center the design; the intercept absorbs the means
    let mean_y = ys.iter().sum::<f64>() / n as f64;
    let mut col_means = vec![0.0; d];
    for x in xs {
        for (m, v) in col_means.iter_mut().zip(x) {
            *m += v;
        }
    }
    for m in col_means.iter_mut() {
        *m /= n as f64;
    }

    // Gram-Schmidt over centered columns, tracking kept indices
    let mut basis: Vec<Vec<f64>> = Vec::new(); // orthonormal columns, length n
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped: Vec<usize> = Vec::new();
    let mut r_rows: Vec<Vec<f64>> = Vec::new(); // R entries for kept columns
    for col in 0..d {
        let mut v: Vec<f64> = xs.iter().map(|x| x[col] - col_means[col]).collect();
        let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut coeffs = Vec::with_capacity(basis.len());
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            coeffs.push(dot);
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm <= 1e-10 * norm0.max(1.0) {
            dropped.push(col);
            continue;
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        coeffs.push(norm);
        basis.push(v);
        kept.push(col);
        r_rows.push(coeffs);
    }

    // beta solves R beta = Q^T y (back substitution)
    let yc: Vec<f64> = ys.iter().map(|y| y - mean_y).collect();
    let qty: Vec<f64> = basis
        .iter()
        .map(|b| b.iter().zip(&yc).map(|(a, c)| a * c).sum())
        .collect();
    let k = kept.len();
    let mut beta = vec![0.0; k];
    for i in (0..k).rev() {
        let mut v = qty[i];
        for j in (i + 1)..k {
            v -= r_rows[j][i] * beta[j];
        }
        beta[i] = v / r_rows[i][i];
    }
    let intercept = mean_y
        - kept
            .iter()
            .zip(&beta)
            .map(|(&c, &b)| b * col_means[c])
            .sum::<f64>();
    RatioPredictor::LeastSquares {
        intercept,
        coefficients: beta,
        kept,
        dropped,
    }
}

/// Exhaustive best single split: every feature, thresholds at midpoints of
/// consecutive distinct sorted values, ties to the left, constant leaves.
fn fit_stump(xs: &[Vec<f64>], ys: &[f64]) -> RegressionTree {
    fit_tree(xs, ys, Some(1), 1)
}

fn fit_method(method: RatioMethod, xs: &[Vec<f64>], ys: &[f64], seed: u64) -> RatioPredictor {
    match method {
        RatioMethod::Constant => RatioPredictor::Constant(ys.iter().sum::<f64>() / ys.len() as f64),
        RatioMethod::LeastSquares => fit_least_squares(xs, ys),
        RatioMethod::Stump => RatioPredictor::Stump(fit_stump(xs, ys)),
        RatioMethod::Forest => {
            let cfg = ForestConfig {
                seed,
                ..Default::default()
            };
            RatioPredictor::Forest(fit_forest(xs, ys, &cfg))
        }
    }
}

/// Fits a ratio predictor and reports its seeded k-fold cross-validated MSE.
pub fn fit_ratio_predictor(
    data: &RatioDataset,
    method: RatioMethod,
    k_folds: usize,
    seed: u64,
) -> Result<RatioFit, MetaRegError> {
    data.validate()?;
    let xs = data.design();
    let ys = data.ratios();
    let n = ys.len();
    let k = k_folds.min(n).max(2);
    if k_folds < 2 {
        return Err(MetaRegError::KFold(format!(
            "k must be >= 2, got {k_folds}"
        )));
    }

    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let mut cv_total = 0.0;
    for fold in 0..k {
        let held: Vec<usize> = indices.iter().copied().skip(fold).step_by(k).collect();
        let holdout: std::collections::HashSet<usize> = held.iter().copied().collect();
        let (mut txs, mut tys) = (Vec::new(), Vec::new());
        for i in 0..n {
            if !holdout.contains(&i) {
                txs.push(xs[i].clone());
                tys.push(ys[i]);
            }
        }
        let pred = fit_method(method, &txs, &tys, seed ^ fold as u64);
        let (hxs, hys): (Vec<Vec<f64>>, Vec<f64>) =
            held.iter().map(|&i| (xs[i].clone(), ys[i])).unzip();
        cv_total += mse(&pred, &hxs, &hys);
    }
    let cv_mse = cv_total / k as f64;

    let predictor = fit_method(method, &xs, &ys, seed);
    let training_mse = mse(&predictor, &xs, &ys);
    let dropped_columns = match &predictor {
        RatioPredictor::LeastSquares { dropped, .. } => {
            let names = data.design_names();
            dropped.iter().map(|&i| names[i].clone()).collect()
        }
        _ => Vec::new(),
    };
    Ok(RatioFit {
        method,
        predictor,
        training_mse,
        cv_mse,
        dropped_columns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::{Lottery, Observation};

    fn sample(rows: &[(f64, f64, f64, f64)]) -> DomainSample {
        DomainSample::new(
            "s",
            rows.iter()
                .map(|&(z1, z2, p, y)| Observation::new(Lottery::new(z1, z2, p), y))
                .collect(),
        )
    }

    #[test]
    fn features_hand_example() {
        let s = sample(&[(10.0, 0.0, 0.5, 3.0), (20.0, 0.0, 0.5, 7.0)]);
        let f = sample_features(&s).0;
        let names = feature_names("");
        assert_eq!(f.len(), 22);
        let get = |name: &str| f[names.iter().position(|n| n == name).unwrap()];
        assert_eq!(get("ev_mean"), 7.5);
        assert_eq!(get("ev_max"), 10.0);
        assert_eq!(get("ev_min"), 5.0);
        assert_eq!(get("ev_sd"), 2.5);
        assert_eq!(get("size"), 2.0);
        assert_eq!(get("gains_only"), 1.0);
        assert_eq!(get("z1_sd"), 5.0);
    }

    #[test]
    fn single_lottery_sds_are_zero() {
        let f = sample_features(&sample(&[(10.0, 0.0, 0.5, 3.0)])).0;
        let names = feature_names("");
        for (name, v) in names.iter().zip(&f) {
            if name.ends_with("_sd") {
                assert_eq!(*v, 0.0, "{name}");
            }
        }
    }

    #[test]
    fn negative_prize_clears_gains_only() {
        let f = sample_features(&sample(&[(10.0, -5.0, 0.5, 3.0)])).0;
        assert_eq!(*f.last().unwrap(), 0.0);
    }

    #[test]
    fn order_invariance() {
        let a = sample(&[
            (10.0, 0.0, 0.5, 3.0),
            (20.0, 5.0, 0.2, 7.0),
            (8.0, 1.0, 0.9, 6.0),
        ]);
        let mut obs = a.observations.clone();
        obs.reverse();
        let b = DomainSample::new("s", obs);
        assert_eq!(sample_features(&a), sample_features(&b));
    }

    fn toy_dataset(n: usize, f: impl Fn(usize) -> (Vec<f64>, f64)) -> RatioDataset {
        let rows = (0..n)
            .map(|i| {
                let (feat, ratio) = f(i);
                RatioRow {
                    train: SampleFeatures(feat.clone()),
                    test: SampleFeatures(feat),
                    ratio,
                }
            })
            .collect();
        RatioDataset {
            rows,
            feature_set: FeatureSet::TrainOnly,
        }
    }

    #[test]
    fn constant_predictor_is_training_mean() {
        let data = toy_dataset(2, |i| (vec![0.0; 22], if i == 0 { 1.0 } else { 3.0 }));
        let fit = fit_ratio_predictor(&data, RatioMethod::Constant, 2, 0).unwrap();
        match fit.predictor {
            RatioPredictor::Constant(c) => assert_eq!(c, 2.0),
            other => panic!("{other:?}"),
        }
        assert_eq!(fit.training_mse, 1.0);
    }

    #[test]
    fn stump_recovers_planted_split() {
        // ratio determined by feature 3 crossing 0.5
        let data = toy_dataset(40, |i| {
            let mut f = vec![0.25; 22];
            f[3] = if i % 2 == 0 { 0.1 } else { 0.9 };
            f[7] = (i as f64) * 0.01; // noise column
            (f, if i % 2 == 0 { 1.0 } else { 5.0 })
        });
        let fit = fit_ratio_predictor(&data, RatioMethod::Stump, 10, 3).unwrap();
        assert!(fit.cv_mse < 1e-20, "cv_mse = {}", fit.cv_mse);
        match &fit.predictor {
            RatioPredictor::Stump(tree) => match &tree.nodes[0] {
                crate::rules::tree::Node::Split {
                    feature, threshold, ..
                } => {
                    assert_eq!(*feature, 3);
                    assert!((threshold - 0.5).abs() < 1e-12);
                }
                other => panic!("expected root split, got {other:?}"),
            },
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stump_search_is_exhaustive() {
        // compare against a brute-force scan of every (feature, midpoint)
        let data = toy_dataset(12, |i| {
            let mut f = vec![0.0; 22];
            f[0] = (i * 7 % 12) as f64;
            f[1] = (i * 5 % 12) as f64;
            f[2] = (i % 4) as f64;
            (f, (i as f64 - 4.0) * (i as f64 - 7.0) + 20.0)
        });
        let xs = data.design();
        let ys = data.ratios();
        let fit = fit_ratio_predictor(&data, RatioMethod::Stump, 3, 1).unwrap();
        let fitted_sse = match &fit.predictor {
            RatioPredictor::Stump(t) => xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| (t.predict(x) - y).powi(2))
                .sum::<f64>(),
            _ => unreachable!(),
        };
        // brute force
        let mut best = f64::INFINITY;
        for feat in 0..22 {
            let mut vals: Vec<f64> = xs.iter().map(|x| x[feat]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup();
            for w in vals.windows(2) {
                let thr = 0.5 * (w[0] + w[1]);
                let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
                for (x, y) in xs.iter().zip(&ys) {
                    if x[feat] <= thr {
                        ls += y;
                        ln += 1;
                    } else {
                        rs += y;
                        rn += 1;
                    }
                }
                let (lm, rm) = (ls / ln as f64, rs / rn as f64);
                let sse: f64 = xs
                    .iter()
                    .zip(&ys)
                    .map(|(x, y)| {
                        let p = if x[feat] <= thr { lm } else { rm };
                        (p - y) * (p - y)
                    })
                    .sum();
                best = best.min(sse);
            }
        }
        assert!(
            fitted_sse <= best + 1e-9,
            "stump SSE {fitted_sse} vs best {best}"
        );
    }

    #[test]
    fn least_squares_residuals_orthogonal_and_drops_constants() {
        let data = toy_dataset(30, |i| {
            let mut f = vec![0.0; 22];
            f[0] = i as f64;
            f[1] = (i * i % 17) as f64;
            f[2] = 4.2; // constant column, absorbed by the intercept
            f[3] = 2.0 * i as f64; // collinear with f[0]
            (f, 1.5 + 0.25 * i as f64 + 0.1 * ((i * i % 17) as f64))
        });
        let fit = fit_ratio_predictor(&data, RatioMethod::LeastSquares, 5, 2).unwrap();
        assert!(
            !fit.dropped_columns.is_empty(),
            "constant and collinear columns dropped"
        );
        let xs = data.design();
        let ys = data.ratios();
        // residuals orthogonal to every kept feature
        if let RatioPredictor::LeastSquares { kept, .. } = &fit.predictor {
            let resid: Vec<f64> = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| y - fit.predictor.predict(x))
                .collect();
            let scale: f64 = ys.iter().map(|y| y * y).sum::<f64>().sqrt();
            for &col in kept {
                let dot: f64 = xs.iter().zip(&resid).map(|(x, r)| x[col] * r).sum();
                assert!(dot.abs() <= 1e-8 * scale.max(1.0), "column {col}: {dot}");
            }
            // the noiseless linear model is recovered
            assert!(
                fit.training_mse < 1e-16,
                "training_mse = {}",
                fit.training_mse
            );
        } else {
            unreachable!()
        }
    }

    #[test]
    fn forest_beats_constant_on_nonlinear_signal() {
        let data = toy_dataset(60, |i| {
            let mut f = vec![0.0; 22];
            f[0] = (i % 10) as f64;
            f[1] = (i / 10) as f64;
            (
                f.clone(),
                1.0 + ((i % 10) as f64 - 4.5).abs() + (i / 10) as f64,
            )
        });
        let c = fit_ratio_predictor(&data, RatioMethod::Constant, 10, 5).unwrap();
        let f = fit_ratio_predictor(&data, RatioMethod::Forest, 10, 5).unwrap();
        assert!(
            f.cv_mse < c.cv_mse,
            "forest {} vs constant {}",
            f.cv_mse,
            c.cv_mse
        );
    }

    #[test]
    fn bad_ratio_rejected() {
        let mut data = toy_dataset(3, |_| (vec![0.0; 22], 1.0));
        data.rows[1].ratio = -2.0;
        assert!(matches!(
            fit_ratio_predictor(&data, RatioMethod::Constant, 2, 0),
            Err(MetaRegError::BadRatio(1, _))
        ));
    }
}
