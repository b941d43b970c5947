//! Decision rules: fitting procedures mapping training samples to
//! prediction rules, plus the fitted rules themselves.
//!
//! Shipped families: CRRA expected utility, CPT variants (empirical risk
//! minimization via grid + Nelder-Mead), random forest, kernel ridge
//! regression, and constant rules. `fit_domain_cv` selects among candidate
//! configurations by leave-one-domain-out error.

pub mod cpt;
pub mod eu;
pub mod kridge;
pub mod optim;
pub mod tree;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meta::{sample_error, DomainSample, LossSpec, Lottery};
pub use cpt::{predict_cpt, CptParams, CptVariant};
pub use eu::{predict_eu, EuParams};
pub use kridge::{fit_kernel_ridge, KernelRidge, KernelRidgeConfig};
pub use optim::FitConfig;
pub use tree::{fit_forest, fit_tree, Forest, ForestConfig, RegressionTree};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RuleError {
    #[error("CRRA utility undefined at eta={eta} for prize {prize}")]
    UndefinedUtility { eta: f64, prize: f64 },
    #[error("degenerate CPT power: {param}=0 touches a sign-relevant prize")]
    DegeneratePower { param: &'static str },
    #[error("degenerate probability weighting at delta={delta}, gamma={gamma}, p={p}")]
    DegenerateWeighting { delta: f64, gamma: f64, p: f64 },
    #[error("singular linear system of size {size}")]
    LinearSolve { size: usize },
    #[error("fit failed: {0}")]
    FitFailure(String),
    #[error("cannot parse rule text: {0}")]
    Parse(String),
}

/// Default box upper bounds for the ERM searches.
pub const DEFAULT_ETA_MAX: f64 = 2.0;
pub const DEFAULT_DELTA_MAX: f64 = 5.0;

/// A fitted prediction rule: a map from lotteries to predicted outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictionRule {
    Eu(EuParams),
    Cpt(CptParams),
    Forest(Forest),
    KernelRidge(KernelRidge),
    Constant(f64),
}

impl PredictionRule {
    pub fn predict(&self, lot: &Lottery) -> Result<f64, RuleError> {
        match self {
            PredictionRule::Eu(p) => predict_eu(p, lot),
            PredictionRule::Cpt(p) => predict_cpt(p, lot),
            PredictionRule::Forest(f) => Ok(f.predict(&lot.features())),
            PredictionRule::KernelRidge(k) => Ok(k.predict(&lot.features())),
            PredictionRule::Constant(c) => Ok(*c),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PredictionRule::Eu(_) => "eu",
            PredictionRule::Cpt(_) => "cpt",
            PredictionRule::Forest(_) => "forest",
            PredictionRule::KernelRidge(_) => "kernel_ridge",
            PredictionRule::Constant(_) => "constant",
        }
    }
}

/// A decision-rule configuration: everything needed to fit a rule on
/// training samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleConfig {
    Eu { eta_max: f64 },
    Cpt { variant: CptVariant, delta_max: f64 },
    Forest(ForestConfig),
    KernelRidge(KernelRidgeConfig),
    Constant { value: f64 },
}

impl RuleConfig {
    pub fn eu() -> Self {
        RuleConfig::Eu {
            eta_max: DEFAULT_ETA_MAX,
        }
    }

    pub fn cpt(variant: CptVariant) -> Self {
        RuleConfig::Cpt {
            variant,
            delta_max: DEFAULT_DELTA_MAX,
        }
    }

    /// True if fitting draws random numbers (bootstrap resampling).
    pub fn is_stochastic(&self) -> bool {
        matches!(self, RuleConfig::Forest(cfg) if cfg.bootstrap)
    }

    /// Compact label echoed into artifacts, parseable by [`RuleConfig::parse`].
    pub fn label(&self) -> String {
        match self {
            RuleConfig::Eu { eta_max } => {
                if *eta_max == DEFAULT_ETA_MAX {
                    "eu".into()
                } else {
                    format!("eu:eta_max={eta_max}")
                }
            }
            RuleConfig::Cpt { variant, delta_max } => {
                if *delta_max == DEFAULT_DELTA_MAX {
                    format!("cpt:{}", variant.name())
                } else {
                    format!("cpt:{}:delta_max={delta_max}", variant.name())
                }
            }
            RuleConfig::Forest(cfg) => {
                let mut s = format!("forest:trees={}", cfg.n_trees);
                if !cfg.bootstrap {
                    s.push_str(":bootstrap=off");
                }
                if let Some(d) = cfg.max_depth {
                    s.push_str(&format!(":max_depth={d}"));
                }
                if cfg.min_leaf != 1 {
                    s.push_str(&format!(":min_leaf={}", cfg.min_leaf));
                }
                if cfg.seed != 0 {
                    s.push_str(&format!(":seed={}", cfg.seed));
                }
                s
            }
            RuleConfig::KernelRidge(cfg) => {
                format!("kridge:ridge={}:bandwidth={}", cfg.ridge, cfg.bandwidth)
            }
            RuleConfig::Constant { value } => format!("constant:{value}"),
        }
    }

    /// Parses labels like `eu`, `cpt:abdg`, `forest:trees=50`,
    /// `kridge:ridge=1:bandwidth=0.5`, `constant:3`.
    pub fn parse(s: &str) -> Result<RuleConfig, RuleError> {
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or("");
        let err = |msg: &str| RuleError::Parse(format!("{msg} in `{s}`"));
        let kv = |part: &str| -> Result<(String, String), RuleError> {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| err("expected key=value"))?;
            Ok((k.to_string(), v.to_string()))
        };
        match kind {
            "eu" => {
                let mut eta_max = DEFAULT_ETA_MAX;
                for part in parts {
                    let (k, v) = kv(part)?;
                    match k.as_str() {
                        "eta_max" => eta_max = v.parse().map_err(|_| err("bad eta_max"))?,
                        _ => return Err(err("unknown eu option")),
                    }
                }
                Ok(RuleConfig::Eu { eta_max })
            }
            "cpt" => {
                let variant = parts
                    .next()
                    .and_then(CptVariant::parse)
                    .ok_or_else(|| err("expected cpt variant g|ab|dg|abg|abdg"))?;
                let mut delta_max = DEFAULT_DELTA_MAX;
                for part in parts {
                    let (k, v) = kv(part)?;
                    match k.as_str() {
                        "delta_max" => delta_max = v.parse().map_err(|_| err("bad delta_max"))?,
                        _ => return Err(err("unknown cpt option")),
                    }
                }
                Ok(RuleConfig::Cpt { variant, delta_max })
            }
            "forest" | "rf" => {
                let mut cfg = ForestConfig::default();
                for part in parts {
                    let (k, v) = kv(part)?;
                    match k.as_str() {
                        "trees" => cfg.n_trees = v.parse().map_err(|_| err("bad trees"))?,
                        "bootstrap" => cfg.bootstrap = v != "off" && v != "false" && v != "0",
                        "max_depth" => {
                            cfg.max_depth = Some(v.parse().map_err(|_| err("bad max_depth"))?)
                        }
                        "min_leaf" => cfg.min_leaf = v.parse().map_err(|_| err("bad min_leaf"))?,
                        "seed" => cfg.seed = v.parse().map_err(|_| err("bad seed"))?,
                        _ => return Err(err("unknown forest option")),
                    }
                }
                Ok(RuleConfig::Forest(cfg))
            }
            "kridge" | "kernel_ridge" => {
                let mut cfg = KernelRidgeConfig::default();
                for part in parts {
                    let (k, v) = kv(part)?;
                    match k.as_str() {
                        "ridge" => cfg.ridge = v.parse().map_err(|_| err("bad ridge"))?,
                        "bandwidth" => {
                            cfg.bandwidth = v.parse().map_err(|_| err("bad bandwidth"))?
                        }
                        _ => return Err(err("unknown kridge option")),
                    }
                }
                Ok(RuleConfig::KernelRidge(cfg))
            }
            "constant" => {
                let value: f64 = parts
                    .next()
                    .ok_or_else(|| err("expected constant value"))?
                    .parse()
                    .map_err(|_| err("bad constant value"))?;
                Ok(RuleConfig::Constant { value })
            }
            _ => Err(err("unknown rule kind")),
        }
    }

    /// Fits the configured rule on `train`. `seed_mix` perturbs the
    /// bootstrap stream deterministically (the transfer tensor derives it
    /// from the training-domain ids so identical content gives identical
    /// fits); pass 0 for standalone fits.
    pub fn fit(
        &self,
        train: &[&DomainSample],
        spec: &LossSpec,
        fit_cfg: &FitConfig,
        seed_mix: u64,
    ) -> Result<PredictionRule, RuleError> {
        if train.iter().all(|s| s.is_empty()) {
            return Err(RuleError::FitFailure("no training observations".into()));
        }
        match self {
            RuleConfig::Eu { eta_max } => {
                let fit = fit_erm(&ErmFamily::Eu { eta_max: *eta_max }, train, spec, fit_cfg)?;
                Ok(fit.rule)
            }
            RuleConfig::Cpt { variant, delta_max } => {
                let family = ErmFamily::Cpt {
                    variant: *variant,
                    delta_max: *delta_max,
                };
                Ok(fit_erm(&family, train, spec, fit_cfg)?.rule)
            }
            RuleConfig::Forest(cfg) => {
                let (xs, ys) = pooled_rows(train);
                let effective = ForestConfig {
                    seed: cfg.seed ^ seed_mix,
                    ..cfg.clone()
                };
                Ok(PredictionRule::Forest(fit_forest(&xs, &ys, &effective)))
            }
            RuleConfig::KernelRidge(cfg) => {
                let (xs, ys) = pooled_rows(train);
                Ok(PredictionRule::KernelRidge(fit_kernel_ridge(
                    &xs, &ys, cfg,
                )?))
            }
            RuleConfig::Constant { value } => Ok(PredictionRule::Constant(*value)),
        }
    }
}

fn pooled_rows(train: &[&DomainSample]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in train {
        for obs in &s.observations {
            xs.push(obs.lottery.features().to_vec());
            ys.push(obs.outcome);
        }
    }
    (xs, ys)
}

/// Parametric families handled by the ERM optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErmFamily {
    Eu { eta_max: f64 },
    Cpt { variant: CptVariant, delta_max: f64 },
}

impl ErmFamily {
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            ErmFamily::Eu { eta_max } => (vec![0.0], vec![*eta_max]),
            ErmFamily::Cpt { variant, delta_max } => variant.bounds(*delta_max),
        }
    }

    fn rule_at(&self, free: &[f64]) -> PredictionRule {
        match self {
            ErmFamily::Eu { .. } => PredictionRule::Eu(EuParams::new(free[0])),
            ErmFamily::Cpt { variant, .. } => PredictionRule::Cpt(variant.params_from_free(free)),
        }
    }
}

/// The ERM objective: unweighted average of per-sample errors across the
/// training samples (each domain counts equally regardless of size).
/// Undefined rule evaluations yield infinity.
pub fn erm_objective(
    family: &ErmFamily,
    free: &[f64],
    train: &[&DomainSample],
    spec: &LossSpec,
) -> f64 {
    let rule = family.rule_at(free);
    let mut total = 0.0;
    for s in train {
        match sample_error(&rule, s, spec) {
            Ok(e) if e.is_finite() => total += e,
            _ => return f64::INFINITY,
        }
    }
    total / train.len() as f64
}

/// A rule returned by empirical risk minimization, with its objective.
#[derive(Debug, Clone)]
pub struct ErmFit {
    pub rule: PredictionRule,
    pub objective: f64,
}

/// Empirical risk minimization over a parametric family: coarse grid scan
/// plus Nelder-Mead refinement, ties broken by the lexicographically
/// smallest parameter vector.
pub fn fit_erm(
    family: &ErmFamily,
    train: &[&DomainSample],
    spec: &LossSpec,
    cfg: &FitConfig,
) -> Result<ErmFit, RuleError> {
    if train.is_empty() || train.iter().all(|s| s.is_empty()) {
        return Err(RuleError::FitFailure("no training observations".into()));
    }
    let (lo, hi) = family.bounds();
    let m = optim::minimize_on_box(|x| erm_objective(family, x, train, spec), &lo, &hi, cfg);
    if !m.objective.is_finite() {
        return Err(RuleError::FitFailure(
            "objective undefined at every searched parameter value".into(),
        ));
    }
    Ok(ErmFit {
        rule: family.rule_at(&m.params),
        objective: m.objective,
    })
}

/// Leave-one-domain-out selection: picks the candidate with the best
/// average held-out error across training domains, then refits it on all
/// of them. Ties go to the earlier candidate. A candidate that fails on
/// every fold is excluded.
pub fn fit_domain_cv(
    candidates: &[RuleConfig],
    train: &[&DomainSample],
    spec: &LossSpec,
    fit_cfg: &FitConfig,
) -> Result<DomainCvFit, RuleError> {
    if train.len() < 2 {
        return Err(RuleError::FitFailure(
            "domain cross-validation needs at least 2 samples".into(),
        ));
    }
    if candidates.is_empty() {
        return Err(RuleError::FitFailure("no candidate rules".into()));
    }
    let mut scores: Vec<Option<f64>> = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let mut errors = Vec::new();
        for hold in 0..train.len() {
            let fold: Vec<&DomainSample> = train
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != hold)
                .map(|(_, s)| *s)
                .collect();
            let Ok(rule) = cand.fit(&fold, spec, fit_cfg, 0) else {
                continue;
            };
            if let Ok(e) = sample_error(&rule, train[hold], spec) {
                errors.push(e);
            }
        }
        scores.push(if errors.is_empty() {
            None
        } else {
            Some(errors.iter().sum::<f64>() / errors.len() as f64)
        });
    }
    let winner = scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|v| (i, v)))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .ok_or_else(|| RuleError::FitFailure("every candidate failed on every fold".into()))?;
    let rule = candidates[winner].fit(train, spec, fit_cfg, 0)?;
    Ok(DomainCvFit {
        rule,
        winner,
        cv_errors: scores,
    })
}

#[derive(Debug, Clone)]
pub struct DomainCvFit {
    pub rule: PredictionRule,
    /// Index of the selected candidate.
    pub winner: usize,
    /// Average leave-one-domain-out error per candidate (None = excluded).
    pub cv_errors: Vec<Option<f64>>,
}

// ---------------------------------------------------------------------------
// Canonical single-line text form (used by the CLI to cache fits)
// ---------------------------------------------------------------------------

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn tree_text(tree: &RegressionTree) -> String {
    tree.nodes
        .iter()
        .map(|n| match n {
            tree::Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                format!("S:{feature}:{}:{left}:{right}", fmt17(*threshold))
            }
            tree::Node::Leaf { value } => format!("L:{}", fmt17(*value)),
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn tree_from_text(s: &str) -> Result<RegressionTree, RuleError> {
    let err = |m: &str| RuleError::Parse(format!("tree: {m}"));
    let mut nodes = Vec::new();
    for part in s.split(';') {
        let fields: Vec<&str> = part.split(':').collect();
        match fields.as_slice() {
            ["S", f, t, l, r] => nodes.push(tree::Node::Split {
                feature: f.parse().map_err(|_| err("feature"))?,
                threshold: t.parse().map_err(|_| err("threshold"))?,
                left: l.parse().map_err(|_| err("left"))?,
                right: r.parse().map_err(|_| err("right"))?,
            }),
            ["L", v] => nodes.push(tree::Node::Leaf {
                value: v.parse().map_err(|_| err("leaf"))?,
            }),
            _ => return Err(err("bad node")),
        }
    }
    Ok(RegressionTree { nodes })
}

impl PredictionRule {
    /// Single-line `kind|param=value|...` record with 17 significant digits.
    pub fn canonical_text(&self) -> String {
        match self {
            PredictionRule::Eu(p) => format!("eu|eta={}", fmt17(p.eta)),
            PredictionRule::Cpt(p) => format!(
                "cpt|variant={}|alpha={}|beta={}|delta={}|gamma={}",
                p.variant.name(),
                fmt17(p.alpha),
                fmt17(p.beta),
                fmt17(p.delta),
                fmt17(p.gamma)
            ),
            PredictionRule::Constant(c) => format!("constant|value={}", fmt17(*c)),
            PredictionRule::KernelRidge(k) => {
                let xs = k
                    .train_x
                    .iter()
                    .map(|row| row.iter().map(|v| fmt17(*v)).collect::<Vec<_>>().join(";"))
                    .collect::<Vec<_>>()
                    .join(",");
                let ws = k
                    .weights
                    .iter()
                    .map(|v| fmt17(*v))
                    .collect::<Vec<_>>()
                    .join(",");
                format!(
                    "kernel_ridge|ridge={}|bandwidth={}|x={}|w={}",
                    fmt17(k.config.ridge),
                    fmt17(k.config.bandwidth),
                    xs,
                    ws
                )
            }
            PredictionRule::Forest(f) => {
                let mut s = format!(
                    "forest|trees={}|bootstrap={}|max_depth={}|min_leaf={}|seed={}",
                    f.config.n_trees,
                    if f.config.bootstrap { 1 } else { 0 },
                    f.config
                        .max_depth
                        .map_or("none".to_string(), |d| d.to_string()),
                    f.config.min_leaf,
                    f.config.seed,
                );
                for (i, t) in f.trees.iter().enumerate() {
                    s.push_str(&format!("|t{i}={}", tree_text(t)));
                }
                s
            }
        }
    }

    pub fn from_canonical_text(s: &str) -> Result<PredictionRule, RuleError> {
        let err = |m: &str| RuleError::Parse(m.to_string());
        let mut parts = s.split('|');
        let kind = parts.next().ok_or_else(|| err("empty record"))?;
        let mut fields = std::collections::BTreeMap::new();
        let mut trees_text: Vec<(usize, String)> = Vec::new();
        for part in parts {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| err("expected key=value"))?;
            if let Some(idx) = k.strip_prefix('t').and_then(|t| t.parse::<usize>().ok()) {
                trees_text.push((idx, v.to_string()));
            } else {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<f64, RuleError> {
            fields
                .get(k)
                .ok_or_else(|| err(&format!("missing field {k}")))?
                .parse()
                .map_err(|_| err(&format!("bad float in {k}")))
        };
        match kind {
            "eu" => Ok(PredictionRule::Eu(EuParams::new(get("eta")?))),
            "cpt" => {
                let variant = fields
                    .get("variant")
                    .and_then(|v| CptVariant::parse(v))
                    .ok_or_else(|| err("bad cpt variant"))?;
                Ok(PredictionRule::Cpt(CptParams {
                    alpha: get("alpha")?,
                    beta: get("beta")?,
                    delta: get("delta")?,
                    gamma: get("gamma")?,
                    variant,
                }))
            }
            "constant" => Ok(PredictionRule::Constant(get("value")?)),
            "kernel_ridge" => {
                let xs_text = fields.get("x").ok_or_else(|| err("missing x"))?;
                let train_x: Vec<Vec<f64>> = xs_text
                    .split(',')
                    .map(|row| {
                        row.split(';')
                            .map(|v| v.parse::<f64>().map_err(|_| err("bad x value")))
                            .collect()
                    })
                    .collect::<Result<_, _>>()?;
                let weights: Vec<f64> = fields
                    .get("w")
                    .ok_or_else(|| err("missing w"))?
                    .split(',')
                    .map(|v| v.parse::<f64>().map_err(|_| err("bad weight")))
                    .collect::<Result<_, _>>()?;
                Ok(PredictionRule::KernelRidge(KernelRidge {
                    config: KernelRidgeConfig {
                        ridge: get("ridge")?,
                        bandwidth: get("bandwidth")?,
                    },
                    train_x,
                    weights,
                }))
            }
            "forest" => {
                trees_text.sort_by_key(|(i, _)| *i);
                let trees: Vec<RegressionTree> = trees_text
                    .iter()
                    .map(|(_, t)| tree_from_text(t))
                    .collect::<Result<_, _>>()?;
                if trees.is_empty() {
                    return Err(err("forest without trees"));
                }
                let max_depth = match fields.get("max_depth").map(String::as_str) {
                    Some("none") | None => None,
                    Some(v) => Some(v.parse().map_err(|_| err("bad max_depth"))?),
                };
                Ok(PredictionRule::Forest(Forest {
                    config: ForestConfig {
                        n_trees: get("trees")? as usize,
                        bootstrap: get("bootstrap")? != 0.0,
                        max_depth,
                        min_leaf: get("min_leaf")? as usize,
                        seed: fields
                            .get("seed")
                            .ok_or_else(|| err("missing seed"))?
                            .parse()
                            .map_err(|_| err("bad seed"))?,
                    },
                    trees,
                }))
            }
            other => Err(err(&format!("unknown rule kind `{other}`"))),
        }
    }
}
