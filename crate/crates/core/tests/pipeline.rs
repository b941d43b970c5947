//! Cross-module checks that exercise the r > 1 paths and the
//! leave-one-domain-out selection end to end.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use transferlab_core::intervals::{
    forecast_interval, rational_from_decimal, rational_string, tensor_distribution, Side,
};
use transferlab_core::meta::{
    sample_error, DomainSample, LossSpec, Lottery, MetaData, Observation,
};
use transferlab_core::rules::{
    fit_domain_cv, FitConfig, ForestConfig, KernelRidgeConfig, RuleConfig,
};
use transferlab_core::shift::{worst_case_box_oracle, worst_case_upper_bound};
use transferlab_core::synth::{simulate_metadata, LotteryMode, SyntheticMetaSpec};
use transferlab_core::transfer::{pooled_transfer_errors, MeasureKind, MeasureSpec};

fn synthetic_meta(n: usize, seed: u64) -> MetaData {
    simulate_metadata(&SyntheticMetaSpec {
        n_domains: n,
        obs_min: 10,
        obs_max: 14,
        lottery_mode: LotteryMode::PerDomainRandom,
        noise_sd: 0.8,
        seed,
        ..Default::default()
    })
}

#[test]
fn r2_tensor_counts_and_interval() {
    let meta = synthetic_meta(6, 31);
    let loss = LossSpec::squared_identity();
    let tensor = pooled_transfer_errors(
        &meta,
        &RuleConfig::eu(),
        2,
        &MeasureSpec::plain(MeasureKind::TransferError),
        &loss,
        &FitConfig::default(),
        5,
    )
    .unwrap();
    // C(6,2) * 4 stored entries; ordered multiset twice that
    assert_eq!(tensor.unordered_len(), 60);
    assert_eq!(tensor.logical_len(), 120);
    assert!(tensor.is_complete());

    let tau = rational_from_decimal("0.95").unwrap();
    let iv = forecast_interval(&tensor, &tau, Side::TwoSided, &loss).unwrap();
    // 2 * 0.95 * (4/7) - 1 = 3/35
    assert_eq!(iv.level_exact.as_deref(), Some("3/35"));
    assert_eq!(
        rational_string(&transferlab_core::intervals::coverage_level(
            6,
            2,
            &tau,
            Side::TwoSided
        )),
        "3/35"
    );
    assert!(iv.lower <= iv.upper);
}

#[test]
fn r2_worst_case_matches_box_oracle_and_gamma_one() {
    let meta = synthetic_meta(5, 77);
    let loss = LossSpec::squared_identity();
    let tensor = pooled_transfer_errors(
        &meta,
        &RuleConfig::Constant { value: 4.0 },
        2,
        &MeasureSpec::plain(MeasureKind::TransferError),
        &loss,
        &FitConfig::default(),
        5,
    )
    .unwrap();
    let dist = tensor_distribution(&tensor).unwrap();
    for tau in [0.4, 0.7, 0.9] {
        let one = worst_case_upper_bound(&tensor, tau, 1.0).unwrap();
        assert_eq!(one.to_bits(), dist.upper_quantile(tau).unwrap().to_bits());
        for gamma in [1.8, 6.0] {
            let fast = worst_case_upper_bound(&tensor, tau, gamma).unwrap();
            let slow = worst_case_box_oracle(&tensor, tau, gamma).unwrap();
            assert_eq!(fast.to_bits(), slow.to_bits(), "tau={tau} gamma={gamma}");
        }
    }
}

#[test]
fn r2_entries_invariant_to_training_order_by_construction() {
    // the tensor stores sorted training combinations, so any ordered tuple
    // lookup resolves to the same entry; spot-check the canonical form
    let meta = synthetic_meta(5, 12);
    let tensor = pooled_transfer_errors(
        &meta,
        &RuleConfig::eu(),
        2,
        &MeasureSpec::plain(MeasureKind::TransferError),
        &LossSpec::squared_identity(),
        &FitConfig::default(),
        1,
    )
    .unwrap();
    for e in &tensor.entries {
        assert!(
            e.train.windows(2).all(|w| w[0] < w[1]),
            "sorted distinct training indices"
        );
        assert!(!e.train.contains(&e.target));
    }
}

#[test]
fn domain_cv_matches_bruteforce_fold_audit() {
    // 3 synthetic CPT-generated domains; candidates forest and kernel ridge
    let meta = synthetic_meta(3, 9);
    let spec = LossSpec::squared_identity();
    let cfg = FitConfig::default();
    let candidates = vec![
        RuleConfig::Forest(ForestConfig::default()),
        RuleConfig::KernelRidge(KernelRidgeConfig::default()),
    ];
    let train: Vec<&DomainSample> = meta.samples.iter().collect();
    let cv = fit_domain_cv(&candidates, &train, &spec, &cfg).unwrap();

    // exhaustive fold-by-fold recomputation
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, cand) in candidates.iter().enumerate() {
        let mut total = 0.0;
        for hold in 0..train.len() {
            let fold: Vec<&DomainSample> = train
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != hold)
                .map(|(_, s)| *s)
                .collect();
            let rule = cand.fit(&fold, &spec, &cfg, 0).unwrap();
            total += sample_error(&rule, train[hold], &spec).unwrap();
        }
        let avg = total / train.len() as f64;
        if avg < best.1 {
            best = (i, avg);
        }
    }
    assert_eq!(cv.winner, best.0, "selection matches the brute-force audit");
    assert!((cv.cv_errors[best.0].unwrap() - best.1).abs() < 1e-12);
}

#[test]
fn within_domain_cv_prefers_structure_on_structured_data() {
    // EU-generated noiseless observations: the EU rule should dominate a
    // constant baseline in leave-one-domain-out selection
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let mut samples = Vec::new();
    for d in 0..3 {
        let obs: Vec<Observation> = (0..12)
            .map(|_| {
                let z1 = rng.random_range(5.0..40.0);
                let z2 = rng.random_range(0.0..z1);
                let p = rng.random_range(0.1..0.9);
                let lot = Lottery::new(z1, z2, p);
                let ce = transferlab_core::rules::predict_eu(
                    &transferlab_core::rules::EuParams::new(0.5),
                    &lot,
                )
                .unwrap();
                Observation::new(lot, ce)
            })
            .collect();
        samples.push(DomainSample::new(format!("d{d}"), obs));
    }
    let train: Vec<&DomainSample> = samples.iter().collect();
    let cv = fit_domain_cv(
        &[RuleConfig::Constant { value: 10.0 }, RuleConfig::eu()],
        &train,
        &LossSpec::squared_identity(),
        &FitConfig::default(),
    )
    .unwrap();
    assert_eq!(cv.winner, 1);
}
