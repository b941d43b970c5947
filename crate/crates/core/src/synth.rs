//! Synthetic meta-distributions: iid domains with CPT-generated outcomes.
//!
//! Supports the coverage simulations (the interval guarantees are proved,
//! not checkable on confidential data, so they are validated on synthetic
//! draws) and the covariate-shift versus model-shift demonstrations.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::intervals::{coverage_level, coverage_upper_bound, Side};
use crate::meta::{DomainSample, LossSpec, Lottery, MetaData, Observation};
use crate::rules::cpt::{predict_cpt, CptParams, CptVariant};
use crate::rules::{FitConfig, RuleConfig};
use crate::transfer::{combinations, pooled_transfer_errors, MeasureKind, MeasureSpec};
use num_traits::ToPrimitive;

/// How lottery features are drawn within each domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LotteryMode {
    /// One lottery grid drawn from the seed and shared by all domains.
    SharedGrid,
    /// Every domain draws its own lotteries independently.
    PerDomainRandom,
    /// Each domain fixes one (z1, z2) pair and varies only p.
    FixedPrizes,
}

impl LotteryMode {
    pub fn parse(s: &str) -> Option<LotteryMode> {
        match s {
            "shared_grid" => Some(LotteryMode::SharedGrid),
            "per_domain_random" => Some(LotteryMode::PerDomainRandom),
            "fixed_prizes" => Some(LotteryMode::FixedPrizes),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LotteryMode::SharedGrid => "shared_grid",
            LotteryMode::PerDomainRandom => "per_domain_random",
            LotteryMode::FixedPrizes => "fixed_prizes",
        }
    }
}

/// Specification of a synthetic meta-distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMetaSpec {
    pub n_domains: usize,
    /// Observations per domain, uniform on `[obs_min, obs_max]`.
    pub obs_min: usize,
    pub obs_max: usize,
    /// Means of the domain-level CPT parameters (alpha, beta, delta, gamma).
    pub param_means: [f64; 4],
    /// Spreads of the truncated normal around each mean.
    pub param_spreads: [f64; 4],
    pub lottery_mode: LotteryMode,
    /// Number of distinct lotteries in the shared grid; domains with more
    /// observations than this repeat lotteries.
    pub grid_size: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SyntheticMetaSpec {
    fn default() -> Self {
        SyntheticMetaSpec {
            n_domains: 10,
            obs_min: 20,
            obs_max: 30,
            param_means: [0.85, 0.9, 1.0, 0.7],
            param_spreads: [0.05, 0.05, 0.2, 0.1],
            lottery_mode: LotteryMode::SharedGrid,
            grid_size: 12,
            noise_sd: 1.0,
            seed: 0,
        }
    }
}

/// Truncated normal on `[lo, hi]`: rejection sampling with a clamp fallback.
fn truncated_normal(rng: &mut ChaCha12Rng, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    if sd == 0.0 {
        return mean.clamp(lo, hi);
    }
    let dist = Normal::new(mean, sd).expect("finite parameters");
    for _ in 0..1000 {
        let v = dist.sample(rng);
        if v >= lo && v <= hi {
            return v;
        }
    }
    mean.clamp(lo, hi)
}

fn draw_lottery(rng: &mut ChaCha12Rng) -> Lottery {
    let z1 = rng.random_range(5.0..50.0);
    let z2 = rng.random_range(0.0..z1);
    let p = rng.random_range(0.05..0.95);
    Lottery::new(z1, z2, p)
}

/// Draws a meta-data set: per-domain CPT parameters from truncated normals
/// around the configured means, lotteries per the marginal mode, outcomes
/// CPT predictions plus centered normal noise. Deterministic given the seed.
pub fn simulate_metadata(spec: &SyntheticMetaSpec) -> MetaData {
    assert!(spec.obs_min >= 1 && spec.obs_min <= spec.obs_max);
    // the shared grid lives on its own stream so domain draws are
    // independent of the mode
    let grid: Vec<Lottery> = {
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        rng.set_stream(u64::MAX);
        (0..spec.grid_size.max(1))
            .map(|_| draw_lottery(&mut rng))
            .collect()
    };
    let boxes = [
        (0.0, 1.0),
        (0.0, 1.0),
        (0.0, crate::rules::DEFAULT_DELTA_MAX),
        (0.0, 1.0),
    ];

    let samples = (0..spec.n_domains)
        .map(|d| {
            let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
            rng.set_stream(d as u64);
            let mut drawn = [0.0; 4];
            for i in 0..4 {
                drawn[i] = truncated_normal(
                    &mut rng,
                    spec.param_means[i],
                    spec.param_spreads[i],
                    boxes[i].0,
                    boxes[i].1,
                );
            }
            let params = CptParams {
                alpha: drawn[0],
                beta: drawn[1],
                delta: drawn[2],
                gamma: drawn[3],
                variant: CptVariant::Abdg,
            };
            let m = rng.random_range(spec.obs_min..=spec.obs_max);
            let noise = Normal::new(0.0, spec.noise_sd.max(0.0)).expect("finite sd");
            let fixed = (draw_lottery(&mut rng).z1, rng.random_range(0.0..5.0));
            let observations = (0..m)
                .map(|i| {
                    let lot = match spec.lottery_mode {
                        LotteryMode::SharedGrid => grid[i % grid.len()],
                        LotteryMode::PerDomainRandom => draw_lottery(&mut rng),
                        LotteryMode::FixedPrizes => {
                            Lottery::new(fixed.0, fixed.1, rng.random_range(0.05..0.95))
                        }
                    };
                    let ce = predict_cpt(&params, &lot)
                        .expect("interior CPT parameters are always evaluable");
                    let y = if spec.noise_sd > 0.0 {
                        ce + noise.sample(&mut rng)
                    } else {
                        ce
                    };
                    Observation::new(lot, y)
                })
                .collect();
            DomainSample::new(format!("syn{d:03}"), observations)
        })
        .collect();
    MetaData::new(samples)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub replications: usize,
    pub n: usize,
    pub r: usize,
    pub tau: f64,
    pub empirical_coverage: f64,
    /// Exact guarantee tau*(n-r)/(n+1).
    pub guarantee: f64,
    /// No-ties tightness bound (capped at 1).
    pub tightness_bound: f64,
    pub mc_se: f64,
}

fn mix_seed(seed: u64, rep: u64) -> u64 {
    // splitmix-style scramble
    let mut z = seed ^ rep.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Monte Carlo check of the one-sided guarantee: each replication draws
/// n+1 domains, computes the upper tau-quantile of the pooled tensor from
/// the first n, and tests the held-out transfer error against it.
pub fn simulate_coverage(
    spec: &SyntheticMetaSpec,
    rule: &RuleConfig,
    r: usize,
    tau: &crate::intervals::Rational,
    replications: usize,
    fit_cfg: &FitConfig,
    seed: u64,
) -> CoverageReport {
    assert!(replications >= 100, "need at least 100 replications");
    let n = spec.n_domains;
    assert!(n > r, "need n > r");
    let loss = LossSpec::squared_identity();
    let measure = MeasureSpec::plain(MeasureKind::TransferError);
    let tau_f = tau.to_f64().unwrap();

    let mut covered = 0usize;
    for rep in 0..replications {
        let rep_seed = mix_seed(seed, rep as u64);
        let full = simulate_metadata(&SyntheticMetaSpec {
            n_domains: n + 1,
            seed: rep_seed,
            ..spec.clone()
        });
        let observed = MetaData::new(full.samples[..n].to_vec());
        let target = &full.samples[n];
        let tensor = pooled_transfer_errors(&observed, rule, r, &measure, &loss, fit_cfg, rep_seed)
            .expect("synthetic tensor");
        let dist = crate::intervals::tensor_distribution(&tensor).expect("nonempty");
        let bound = dist.upper_quantile(tau_f).expect("valid tau");

        // uniform random training set of size r
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(rep_seed, 0xABCD));
        let combos = combinations(n, r);
        let t = &combos[rng.random_range(0..combos.len())];
        let train: Vec<&DomainSample> = t.iter().map(|&i| &observed.samples[i]).collect();
        let ids: Vec<&str> = t.iter().map(|&i| observed.samples[i].id.as_str()).collect();
        let _ = ids;
        let fitted = rule
            .fit(&train, &loss, fit_cfg, rep_seed)
            .expect("synthetic fit");
        let err = crate::meta::sample_error(&fitted, target, &loss).expect("evaluable");
        if err <= bound {
            covered += 1;
        }
    }
    let p = covered as f64 / replications as f64;
    let guarantee = coverage_level(n, r, tau, Side::OneSidedUpper)
        .to_f64()
        .unwrap();
    let tightness = coverage_upper_bound(n, r, tau, Side::OneSidedUpper)
        .to_f64()
        .unwrap()
        .min(1.0);
    CoverageReport {
        replications,
        n,
        r,
        tau: tau_f,
        empirical_coverage: p,
        guarantee,
        tightness_bound: tightness,
        mc_se: (p * (1.0 - p) / replications as f64).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intervals::rational_from_decimal;

    #[test]
    fn deterministic_given_seed() {
        let spec = SyntheticMetaSpec::default();
        let a = simulate_metadata(&spec);
        let b = simulate_metadata(&spec);
        assert_eq!(a, b);
        let c = simulate_metadata(&SyntheticMetaSpec { seed: 1, ..spec });
        assert_ne!(a, c);
    }

    #[test]
    fn zero_noise_shared_grid_is_cpt_generated() {
        let spec = SyntheticMetaSpec {
            noise_sd: 0.0,
            lottery_mode: LotteryMode::SharedGrid,
            n_domains: 3,
            ..Default::default()
        };
        let meta = simulate_metadata(&spec);
        // a full CPT fit recovers near-zero in-sample error
        let fit_cfg = FitConfig {
            grid_resolution: 7,
            ..Default::default()
        };
        let rule = RuleConfig::cpt(CptVariant::Abdg)
            .fit(
                &[&meta.samples[0]],
                &LossSpec::squared_identity(),
                &fit_cfg,
                0,
            )
            .unwrap();
        let e = crate::meta::sample_error(&rule, &meta.samples[0], &LossSpec::squared_identity())
            .unwrap();
        assert!(e < 1e-4, "in-sample error {e}");
        // shared grid: first domain's lotteries appear in the second domain
        let lots0: Vec<_> = meta.samples[0]
            .observations
            .iter()
            .map(|o| o.lottery)
            .collect();
        let lots1: Vec<_> = meta.samples[1]
            .observations
            .iter()
            .map(|o| o.lottery)
            .collect();
        assert_eq!(lots0[0], lots1[0]);
    }

    #[test]
    fn fixed_prizes_mode_freezes_prizes_within_domain() {
        let spec = SyntheticMetaSpec {
            lottery_mode: LotteryMode::FixedPrizes,
            n_domains: 4,
            ..Default::default()
        };
        let meta = simulate_metadata(&spec);
        for s in &meta.samples {
            let first = s.observations[0].lottery;
            for o in &s.observations {
                assert_eq!(o.lottery.z1, first.z1);
                assert_eq!(o.lottery.z2, first.z2);
            }
            // sd of z1 within the domain is exactly zero
            let f = crate::metareg::sample_features(s);
            assert_eq!(f.0[1], 0.0, "z1 sd");
        }
        // prizes differ across domains
        assert_ne!(
            meta.samples[0].observations[0].lottery.z1,
            meta.samples[1].observations[0].lottery.z1
        );
    }

    #[test]
    fn degenerate_coverage_is_total() {
        // identical domains, zero noise, exact-fit rule: bound always holds
        let spec = SyntheticMetaSpec {
            noise_sd: 0.0,
            param_spreads: [0.0; 4],
            lottery_mode: LotteryMode::SharedGrid,
            n_domains: 4,
            obs_min: 8,
            obs_max: 8,
            ..Default::default()
        };
        let report = simulate_coverage(
            &spec,
            &RuleConfig::Constant { value: 0.0 },
            1,
            &rational_from_decimal("0.9").unwrap(),
            100,
            &FitConfig::default(),
            5,
        );
        assert_eq!(report.empirical_coverage, 1.0);
    }
}
