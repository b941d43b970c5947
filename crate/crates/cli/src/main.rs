//! Command-line interface for out-of-domain transfer evaluation.
//!
//! Subcommands: validate, within-domain, transfer, intervals, dominance,
//! ci, meta-regress, simulate, coverage. Every artifact embeds the library
//! version, the resolved configuration, and the seed. Exit codes: 0 ok,
//! 1 computation error (JSON error object on stdout), 2 usage error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use transferlab_core::intervals::{forecast_interval, rational_from_decimal, Rational, Side};
use transferlab_core::meta::LossSpec;
use transferlab_core::rules::{FitConfig, RuleConfig};
use transferlab_core::shift::{
    default_gamma_grid, everywhere_dominates, interval_for_weight_spec, WeightSpec,
};
use transferlab_core::synth::{
    simulate_coverage, simulate_metadata, LotteryMode, SyntheticMetaSpec,
};
use transferlab_core::transfer::{
    kfold_cv_error, pooled_transfer_errors, MeasureKind, MeasureSpec, PartialSplit,
    TransferErrorTensor,
};
use transferlab_core::{io as tio, VERSION};

#[derive(Parser)]
#[command(
    name = "transferlab",
    version,
    about = "Forecast intervals and dominance comparisons for out-of-domain transfer performance"
)]
struct Cli {
    /// Flat key=value config file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: TRANSFERLAB_WORKERS or all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Write the primary artifact here as well as stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a metadata CSV against the type invariants.
    Validate(ValidateArgs),
    /// Tenfold cross-validated error per rule per domain.
    #[command(name = "within-domain")]
    WithinDomain(WithinDomainArgs),
    /// Compute the pooled transfer tensor (CSV).
    Transfer(TransferArgs),
    /// Forecast intervals: pooled quantiles, weighted, or Gamma worst-case.
    Intervals(IntervalsArgs),
    /// Worst-case or everywhere dominance between two rules.
    Dominance(DominanceArgs),
    /// Confidence intervals for quantiles or the mean of transfer errors.
    Ci(CiArgs),
    /// Predict transfer-error ratios from sample features.
    #[command(name = "meta-regress")]
    MetaRegress(MetaRegressArgs),
    /// Generate a synthetic metadata CSV.
    Simulate(SimulateArgs),
    /// Monte Carlo check of the coverage guarantee on synthetic domains.
    Coverage(CoverageArgs),
}

#[derive(Args, Clone)]
struct ValidateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct WithinDomainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Rule configs (repeatable), e.g. eu, cpt:abdg, forest, kridge.
    #[arg(long = "rule")]
    rules: Vec<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    transform: Option<String>,
}

#[derive(Args, Clone)]
struct TransferArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    rule: Option<String>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    measure: Option<String>,
    /// Reference rules for normalized measures (repeatable).
    #[arg(long = "reference")]
    references: Vec<String>,
    /// Denominator rule for the ratio measure.
    #[arg(long)]
    rule_b: Option<String>,
    /// Comma-separated CPT parameters transferred across domains.
    #[arg(long)]
    transfer_params: Option<String>,
    /// Comma-separated CPT parameters refit on the target.
    #[arg(long)]
    refit_params: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct IntervalsArgs {
    #[command(flatten)]
    tensor: TransferArgs,
    #[arg(long)]
    tau: Option<String>,
    /// one | two
    #[arg(long)]
    side: Option<String>,
    /// Flat id=omega file of explicit likelihood ratios.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Gamma bound: worst-case interval over the weight box.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    transform: Option<String>,
}

#[derive(Args, Clone)]
struct DominanceArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    rule_a: Option<String>,
    #[arg(long)]
    rule_b: Option<String>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    measure: Option<String>,
    #[arg(long = "reference")]
    references: Vec<String>,
    #[arg(long)]
    tau: Option<String>,
    /// worst_case | everywhere
    #[arg(long)]
    mode: Option<String>,
    /// Comma-separated Gamma values; `inf` allowed. Default: inf plus 100/i.
    #[arg(long)]
    gamma_grid: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct CiArgs {
    #[command(flatten)]
    tensor: TransferArgs,
    /// quantile | mean
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// one | two
    #[arg(long)]
    side: Option<String>,
    /// Rescaling bound for unbounded measures fed to the mean target.
    #[arg(long)]
    bound: Option<f64>,
    #[arg(long)]
    transform: Option<String>,
}

#[derive(Args, Clone)]
struct MetaRegressArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Numerator rule of the ratio (default forest).
    #[arg(long)]
    rule_a: Option<String>,
    /// Denominator rule of the ratio (default cpt:abdg).
    #[arg(long)]
    rule_b: Option<String>,
    /// train_only | test_only | both
    #[arg(long)]
    features: Option<String>,
    /// constant | least_squares | stump | forest
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the feature/ratio dataset CSV here.
    #[arg(long)]
    export_csv: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SynthArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    obs_min: Option<usize>,
    #[arg(long)]
    obs_max: Option<usize>,
    /// shared_grid | per_domain_random | fixed_prizes
    #[arg(long)]
    mode: Option<String>,
    /// Distinct lotteries in the shared grid.
    #[arg(long)]
    grid_size: Option<usize>,
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Comma-separated alpha,beta,delta,gamma means.
    #[arg(long)]
    param_means: Option<String>,
    #[arg(long)]
    param_spreads: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct SimulateArgs {
    #[command(flatten)]
    synth: SynthArgs,
}

#[derive(Args, Clone)]
struct CoverageArgs {
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    rule: Option<String>,
}

/// Effective settings: config-file values overridden by CLI flags. Every
/// resolved value is echoed into the artifact.
struct Settings {
    file: BTreeMap<String, String>,
    echo: std::cell::RefCell<BTreeMap<String, String>>,
}

#[derive(Debug)]
struct CliError {
    message: String,
    usage: bool,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            message: message.into(),
            usage: true,
        }
    }

    fn run(message: impl Into<String>) -> Self {
        CliError {
            message: message.into(),
            usage: false,
        }
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::run(e.to_string())
    }
}

impl Settings {
    fn load(path: &Option<PathBuf>) -> Result<Settings, CliError> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read config {path:?}: {e}")))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::usage(format!("config line {}: expected key = value", i + 1))
                })?;
                file.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Settings {
            file,
            echo: Default::default(),
        })
    }

    /// CLI value if set, else config-file value, else default; echoes the
    /// resolved value into the artifact config map.
    fn get<T: Clone + std::fmt::Display + std::str::FromStr>(
        &self,
        key: &str,
        cli: Option<T>,
        default: Option<T>,
    ) -> Result<T, CliError> {
        let value = if let Some(v) = cli {
            v
        } else if let Some(raw) = self.file.get(key) {
            raw.parse::<T>()
                .map_err(|_| CliError::usage(format!("config key `{key}`: cannot parse `{raw}`")))?
        } else if let Some(d) = default {
            d
        } else {
            return Err(CliError::usage(format!(
                "missing required parameter `{key}`"
            )));
        };
        self.echo
            .borrow_mut()
            .insert(key.to_string(), value.to_string());
        Ok(value)
    }

    fn get_path(&self, key: &str, cli: &Option<PathBuf>) -> Result<PathBuf, CliError> {
        let value = if let Some(v) = cli {
            v.clone()
        } else if let Some(raw) = self.file.get(key) {
            PathBuf::from(raw)
        } else {
            return Err(CliError::usage(format!(
                "missing required parameter `{key}`"
            )));
        };
        self.echo
            .borrow_mut()
            .insert(key.to_string(), value.display().to_string());
        Ok(value)
    }

    fn get_list(&self, key: &str, cli: &[String]) -> Vec<String> {
        let values: Vec<String> = if !cli.is_empty() {
            cli.to_vec()
        } else if let Some(raw) = self.file.get(key) {
            raw.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        } else {
            Vec::new()
        };
        self.echo
            .borrow_mut()
            .insert(key.to_string(), values.join(","));
        values
    }

    /// Optional f64: CLI flag, else config key, else None.
    fn get_opt_f64(&self, key: &str, cli: Option<f64>) -> Result<Option<f64>, CliError> {
        let value = if let Some(v) = cli {
            Some(v)
        } else if let Some(raw) = self.file.get(key) {
            Some(raw.parse::<f64>().map_err(|_| {
                CliError::usage(format!("config key `{key}`: cannot parse `{raw}`"))
            })?)
        } else {
            None
        };
        if let Some(v) = value {
            self.echo
                .borrow_mut()
                .insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    fn echo_map(&self) -> BTreeMap<String, String> {
        self.echo.borrow().clone()
    }
}

#[derive(Serialize)]
struct Artifact<T: Serialize> {
    version: &'static str,
    command: &'static str,
    config: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(flatten)]
    payload: T,
}

fn emit<T: Serialize>(
    command: &'static str,
    settings: &Settings,
    seed: Option<u64>,
    output: &Option<PathBuf>,
    payload: T,
) -> Result<(), CliError> {
    let artifact = Artifact {
        version: VERSION,
        command,
        config: settings.echo_map(),
        seed,
        payload,
    };
    let json = serde_json::to_string_pretty(&artifact).expect("serializable artifact");
    println!("{json}");
    if let Some(path) = output {
        std::fs::write(path, json.as_bytes())
            .map_err(|e| CliError::run(format!("cannot write {path:?}: {e}")))?;
    }
    Ok(())
}

/// Writes a text artifact (CSV) to --output (or stdout) plus an envelope
/// JSON with the run metadata.
fn emit_text<T: Serialize>(
    command: &'static str,
    settings: &Settings,
    seed: Option<u64>,
    output: &Option<PathBuf>,
    text: &str,
    summary: T,
) -> Result<(), CliError> {
    if let Some(path) = output {
        std::fs::write(path, text.as_bytes())
            .map_err(|e| CliError::run(format!("cannot write {path:?}: {e}")))?;
    }
    let artifact = Artifact {
        version: VERSION,
        command,
        config: settings.echo_map(),
        seed,
        payload: summary,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&artifact).expect("serializable artifact")
    );
    if output.is_none() {
        print!("{text}");
        std::io::stdout().flush().ok();
    }
    Ok(())
}

fn read_data(settings: &Settings, cli: &Option<PathBuf>) -> Result<tio::IngestReport, CliError> {
    let path = settings.get_path("data", cli)?;
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::run(format!("cannot read {path:?}: {e}")))?;
    Ok(tio::parse_metadata_csv(&text)?)
}

fn parse_rule(label: &str) -> Result<RuleConfig, CliError> {
    RuleConfig::parse(label).map_err(|e| CliError::usage(e.to_string()))
}

fn parse_transform(settings: &Settings, cli: Option<String>) -> Result<LossSpec, CliError> {
    let name: String = settings.get("transform", cli, Some("sqrt".to_string()))?;
    match name.as_str() {
        "identity" => Ok(LossSpec::squared_identity()),
        "sqrt" => Ok(LossSpec::squared_sqrt()),
        other => Err(CliError::usage(format!(
            "unknown transform `{other}` (identity|sqrt)"
        ))),
    }
}

fn parse_tau(settings: &Settings, cli: Option<String>) -> Result<Rational, CliError> {
    let raw: String = settings.get("tau", cli, Some("0.95".to_string()))?;
    rational_from_decimal(&raw).map_err(|e| CliError::usage(e.to_string()))
}

fn parse_side(settings: &Settings, cli: Option<String>) -> Result<Side, CliError> {
    let raw: String = settings.get("side", cli, Some("two".to_string()))?;
    Side::parse(&raw).ok_or_else(|| CliError::usage(format!("unknown side `{raw}` (one|two)")))
}

fn build_measure(settings: &Settings, args: &TransferArgs) -> Result<MeasureSpec, CliError> {
    let kind_raw: String = settings.get(
        "measure",
        args.measure.clone(),
        Some("transfer_error".to_string()),
    )?;
    let kind = MeasureKind::parse(&kind_raw)
        .ok_or_else(|| CliError::usage(format!("unknown measure `{kind_raw}`")))?;
    let mut spec = MeasureSpec::plain(kind);
    match kind {
        MeasureKind::Normalized | MeasureKind::InverseNormalized => {
            let refs = settings.get_list("reference", &args.references);
            if refs.is_empty() {
                return Err(CliError::usage(
                    "normalized measures need --reference rules",
                ));
            }
            spec.reference_rules = refs
                .iter()
                .map(|s| parse_rule(s))
                .collect::<Result<_, _>>()?;
        }
        MeasureKind::Ratio => {
            let a: String = settings.get("rule", args.rule.clone(), None)?;
            let b: String = settings.get("rule_b", args.rule_b.clone(), None)?;
            spec.ratio_pair = Some((parse_rule(&a)?, parse_rule(&b)?));
        }
        MeasureKind::PartialTransfer => {
            let t: String = settings.get("transfer_params", args.transfer_params.clone(), None)?;
            let l: String = settings.get(
                "refit_params",
                args.refit_params.clone(),
                Some(String::new()),
            )?;
            let split = |s: &str| -> Vec<String> {
                s.split(',')
                    .map(|x| x.trim().to_string())
                    .filter(|x| !x.is_empty())
                    .collect()
            };
            spec.partial_split = Some(PartialSplit {
                transferred: split(&t),
                refit: split(&l),
            });
        }
        _ => {}
    }
    Ok(spec)
}

fn compute_tensor(
    settings: &Settings,
    args: &TransferArgs,
) -> Result<(TransferErrorTensor, u64), CliError> {
    let report = read_data(settings, &args.data)?;
    if !report.violations.is_empty() {
        return Err(CliError::run(format!(
            "metadata has {} validation violations; run `validate` for details",
            report.violations.len()
        )));
    }
    let rule_label: String = settings.get("rule", args.rule.clone(), None)?;
    let rule = parse_rule(&rule_label)?;
    let r: usize = settings.get("r", args.r, Some(1))?;
    let seed: u64 = settings.get("seed", args.seed, None)?;
    let measure = build_measure(settings, args)?;
    let spec = LossSpec::squared_identity();
    let tensor = pooled_transfer_errors(
        &report.meta,
        &rule,
        r,
        &measure,
        &spec,
        &FitConfig::default(),
        seed,
    )?;
    Ok((tensor, seed))
}

#[derive(Serialize)]
struct ValidationPayload {
    domains: usize,
    observations: usize,
    swaps: Vec<tio::SwapNote>,
    violations: Vec<transferlab_core::meta::Violation>,
    valid: bool,
}

fn cmd_validate(
    settings: &Settings,
    args: &ValidateArgs,
    output: &Option<PathBuf>,
) -> Result<(), CliError> {
    let report = read_data(settings, &args.data)?;
    let payload = ValidationPayload {
        domains: report.meta.n(),
        observations: report.meta.samples.iter().map(|s| s.len()).sum(),
        swaps: report.swaps,
        valid: report.violations.is_empty(),
        violations: report.violations,
    };
    emit("validate", settings, None, output, payload)
}

#[derive(Serialize)]
struct WithinDomainPayload {
    per_domain: Vec<WithinDomainRow>,
    /// Mean over domains of rule error / base-rule error.
    average_ratio_vs_base: BTreeMap<String, f64>,
    base_rule: String,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct WithinDomainRow {
    domain: String,
    rule: String,
    cv_error: Option<f64>,
}

fn cmd_within_domain(
    settings: &Settings,
    args: &WithinDomainArgs,
    output: &Option<PathBuf>,
) -> Result<(), CliError> {
    let report = read_data(settings, &args.data)?;
    let rule_labels = settings.get_list("rule", &args.rules);
    if rule_labels.is_empty() {
        return Err(CliError::usage("within-domain needs at least one --rule"));
    }
    let rules: Vec<RuleConfig> = rule_labels
        .iter()
        .map(|s| parse_rule(s))
        .collect::<Result<_, _>>()?;
    let folds: usize = settings.get("folds", args.folds, Some(10))?;
    let seed: u64 = settings.get("seed", args.seed, None)?;
    let spec = parse_transform(settings, args.transform.clone())?;
    let fit_cfg = FitConfig::default();

    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut table: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for sample in &report.meta.samples {
        for (label, rule) in rule_labels.iter().zip(&rules) {
            let out = kfold_cv_error(sample, rule, folds, &spec, &fit_cfg, seed);
            let cv = match out {
                Ok(v) => Some(v),
                Err(e) => {
                    warnings.push(format!("{}: {label}: {e}", sample.id));
                    None
                }
            };
            rows.push(WithinDomainRow {
                domain: sample.id.clone(),
                rule: label.clone(),
                cv_error: cv,
            });
            table.entry(label.clone()).or_default().push(cv);
        }
    }
    let base_label = rule_labels
        .iter()
        .find(|l| l.starts_with("forest") || l.starts_with("rf"))
        .unwrap_or(&rule_labels[0])
        .clone();
    let base = table.get(&base_label).cloned().unwrap_or_default();
    let mut ratios = BTreeMap::new();
    for (label, errors) in &table {
        let terms: Vec<f64> = errors
            .iter()
            .zip(&base)
            .filter_map(|(e, b)| match (e, b) {
                (Some(e), Some(b)) if *b > 0.0 => Some(e / b),
                _ => None,
            })
            .collect();
        if !terms.is_empty() {
            ratios.insert(
                label.clone(),
                terms.iter().sum::<f64>() / terms.len() as f64,
            );
        }
    }
    emit(
        "within-domain",
        settings,
        Some(seed),
        output,
        WithinDomainPayload {
            per_domain: rows,
            average_ratio_vs_base: ratios,
            base_rule: base_label,
            warnings,
        },
    )
}

#[derive(Serialize)]
struct TransferSummary {
    n: usize,
    r: usize,
    rule: String,
    measure: String,
    entries: usize,
    flagged_entries: usize,
}

fn cmd_transfer(
    settings: &Settings,
    args: &TransferArgs,
    output: &Option<PathBuf>,
) -> Result<(), CliError> {
    let (tensor, seed) = compute_tensor(settings, args)?;
    let csv = tio::tensor_to_csv(&tensor);
    let summary = TransferSummary {
        n: tensor.n,
        r: tensor.r,
        rule: tensor.rule.clone(),
        measure: tensor.measure.clone(),
        entries: tensor.unordered_len(),
        flagged_entries: tensor.flagged_count(),
    };
    emit_text("transfer", settings, Some(seed), output, &csv, summary)
}

#[derive(Serialize)]
struct IntervalPayload {
    measure: String,
    rule: String,
    n: usize,
    r: usize,
    tau: f64,
    side: &'static str,
    level_exact: Option<String>,
    level: Option<f64>,
    label: Option<String>,
    lower: f64,
    upper: f64,
    excluded_entries: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    mode: &'static str,
}

fn cmd_intervals(
    settings: &Settings,
    args: &IntervalsArgs,
    output: &Option<PathBuf>,
) -> Result<(), CliError> {
    let (tensor, seed) = compute_tensor(settings, &args.tensor)?;
    let spec = parse_transform(settings, args.transform.clone())?;
    let tau = parse_tau(settings, args.tau.clone())?;
    let side = parse_side(settings, args.side.clone())?;
    let gamma = settings.get_opt_f64("gamma", args.gamma)?;

    let (iv, mode) = if let Some(wpath) = &args.weights {
        let text = std::fs::read_to_string(wpath)
            .map_err(|e| CliError::run(format!("cannot read weights {wpath:?}: {e}")))?;
        let mut weights = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::usage(format!("weights line {}: expected id = omega", i + 1))
            })?;
            let omega: f64 = v
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("weights line {}: bad omega", i + 1)))?;
            weights.insert(k.trim().to_string(), omega);
        }
        settings
            .echo
            .borrow_mut()
            .insert("weights".into(), wpath.display().to_string());
        let ws = WeightSpec::Explicit(weights);
        (
            interval_for_weight_spec(&tensor, &ws, &tau, side, &spec, gamma)?,
            "weighted",
        )
    } else if let Some(g) = gamma {
        let ws = WeightSpec::GammaBox(g);
        (
            interval_for_weight_spec(&tensor, &ws, &tau, side, &spec, None)?,
            "gamma_worst_case",
        )
    } else {
        (forecast_interval(&tensor, &tau, side, &spec)?, "pooled")
    };

    emit(
        "intervals",
        settings,
        Some(seed),
        output,
        IntervalPayload {
            measure: tensor.measure.clone(),
            rule: tensor.rule.clone(),
            n: iv.n,
            r: iv.r,
            tau: iv.tau,
            side: side.name(),
            level_exact: iv.level_exact,
            level: iv.level,
            label: iv.label,
            lower: iv.lower,
            upper: iv.upper,
            excluded_entries: iv.excluded_entries,
            gamma,
            mode,
        },
    )
}

#[derive(Serialize)]
struct DominancePayload {
    tau: f64,
    mode: String,
    dominates: bool,
    rule_a: String,
    rule_b: String,
    measure: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    crossing_gammas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    violated_j: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    witness_omega: Option<Vec<f64>>,
}

fn cmd_dominance(
    settings: &Settings,
    args: &DominanceArgs,
    output: &Option<PathBuf>,
) -> Result<(), CliError> {
    let report = read_data(settings, &args.data)?;
    if !report.violations.is_empty() {
        return Err(CliError::run(
            "metadata has validation violations".to_string(),
        ));
    }
    let a_label: String = settings.get("rule_a", args.rule_a.clone(), None)?;
    let b_label: String = settings.get("rule_b", args.rule_b.clone(), None)?;
    let r: usize = settings.get("r", args.r, Some(1))?;
    let seed: u64 = settings.get("seed", args.seed, None)?;
    let tau_rat = parse_tau(settings, args.tau.clone())?;
    use num_traits::ToPrimitive;
    let tau = tau_rat.to_f64().unwrap();
    let mode: String = settings.get("mode", args.mode.clone(), Some("worst_case".to_string()))?;

    let kind_raw: String = settings.get(
        "measure",
        args.measure.clone(),
        Some("transfer_error".to_string()),
    )?;
    let kind = MeasureKind::parse(&kind_raw)
        .ok_or_else(|| CliError::usage(format!("unknown measure `{kind_raw}`")))?;
    let mut measure = MeasureSpec::plain(kind);
    if matches!(
        kind,
        MeasureKind::Normalized | MeasureKind::InverseNormalized
    ) {
        let refs = settings.get_list("reference", &args.references);
        if refs.is_empty() {
            return Err(CliError::usage(
                "normalized measures need --reference rules",
            ));
        }
        measure.reference_rules = refs
            .iter()
            .map(|s| parse_rule(s))
            .collect::<Result<_, _>>()?;
    }

    let spec = LossSpec::squared_identity();
    let fit_cfg = FitConfig::default();
    let ta = pooled_transfer_errors(
        &report.meta,
        &parse_rule(&a_label)?,
        r,
        &measure,
        &spec,
        &fit_cfg,
        seed,
    )?;
    let tb = pooled_transfer_errors(
        &report.meta,
        &parse_rule(&b_label)?,
        r,
        &measure,
        &spec,
        &fit_cfg,
        seed,
    )?;

    let payload = match mode.as_str() {
        "worst_case" => {
            let grid = match &args.gamma_grid {
                Some(raw) => raw
                    .split(',')
                    .map(|s| {
                        let s = s.trim();
                        if s == "inf" {
                            Ok(f64::INFINITY)
                        } else {
                            s.parse::<f64>()
                                .map_err(|_| CliError::usage(format!("bad Gamma `{s}`")))
                        }
                    })
                    .collect::<Result<Vec<f64>, _>>()?,
                None => default_gamma_grid(),
            };
            let rep = transferlab_core::shift::worst_case_dominates(&ta, &tb, tau, &grid)?;
            DominancePayload {
                tau,
                mode,
                dominates: rep.dominates_on_grid,
                rule_a: a_label,
                rule_b: b_label,
                measure: ta.measure.clone(),
                gamma_grid: Some(rep.gamma_grid),
                crossing_gammas: Some(rep.crossing_gammas),
                violated_j: None,
                witness_omega: None,
            }
        }
        "everywhere" => {
            let rep = everywhere_dominates(&ta, &tb, tau)?;
            DominancePayload {
                tau,
                mode,
                dominates: rep.dominates,
                rule_a: a_label,
                rule_b: b_label,
                measure: ta.measure.clone(),
                gamma_grid: None,
                crossing_gammas: None,
                violated_j: Some(rep.violated_j),
                witness_omega: rep.witness_omega,
            }
        }
        other => return Err(CliError::usage(format!("unknown mode `{other}`"))),
    };
    emit("dominance", settings, Some(seed), output, payload)
}

#[derive(Serialize)]
struct CiPayload {
    target: String,
    measure: String,
    rule: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    alpha: f64,
    side: String,
    lower: f64,
    upper: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    u_statistic: Option<f64>,
    bound_terms: transferlab_core::concentration::BoundTerms,
    #[serde(skip_serializing_if = "Option::is_none")]
    rescale_bound: Option<f64>,
}

fn cmd_ci(settings: &Settings, args: &CiArgs, output: &Option<PathBuf>) -> Result<(), CliError> {
    use transferlab_core::concentration::{mean_ci, quantile_ci, CiSide};
    let (tensor, seed) = compute_tensor(settings, &args.tensor)?;
    let spec = parse_transform(settings, args.transform.clone())?;
    let target: String =
        settings.get("target", args.target.clone(), Some("quantile".to_string()))?;
    let alpha: f64 = settings.get("alpha", args.alpha, Some(0.19))?;
    let side_raw: String = settings.get("side", args.side.clone(), Some("two".to_string()))?;
    let side = match side_raw.as_str() {
        "one" | "upper" => CiSide::UpperOnly,
        "two" => CiSide::TwoSided,
        other => return Err(CliError::usage(format!("unknown side `{other}`"))),
    };

    let payload = match target.as_str() {
        "quantile" => {
            let beta: f64 = settings.get("beta", args.beta, Some(0.5))?;
            let ci = quantile_ci(&tensor, beta, alpha, side)?;
            CiPayload {
                target,
                measure: tensor.measure.clone(),
                rule: tensor.rule.clone(),
                beta: Some(beta),
                alpha,
                side: side_raw,
                lower: if ci.lower.is_finite() {
                    spec.apply_transform(ci.lower)
                } else {
                    ci.lower
                },
                upper: if ci.upper.is_finite() {
                    spec.apply_transform(ci.upper)
                } else {
                    ci.upper
                },
                u_statistic: None,
                bound_terms: ci.bound_terms,
                rescale_bound: None,
            }
        }
        "mean" => {
            // the mean target needs values in [0,1]: inverse measures
            // qualify; anything else requires an explicit rescaling bound
            let mut scaled = tensor.clone();
            for e in &mut scaled.entries {
                e.value = spec.apply_transform(e.value);
            }
            let bound = settings.get_opt_f64("bound", args.bound)?;
            if let Some(b) = bound {
                if b.is_nan() || b <= 0.0 {
                    return Err(CliError::usage("rescale bound must be positive"));
                }
                for e in &mut scaled.entries {
                    e.value /= b;
                }
            }
            let ci = mean_ci(&scaled, alpha, side)?;
            let rescale = bound.unwrap_or(1.0);
            CiPayload {
                target,
                measure: tensor.measure.clone(),
                rule: tensor.rule.clone(),
                beta: None,
                alpha,
                side: side_raw,
                lower: ci.lower * rescale,
                upper: ci.upper * rescale,
                u_statistic: Some(ci.u_statistic * rescale),
                bound_terms: ci.bound_terms,
                rescale_bound: bound,
            }
        }
        other => return Err(CliError::usage(format!("unknown ci target `{other}`"))),
    };
    emit("ci", settings, Some(seed), output, payload)
}

#[derive(Serialize)]
struct MetaRegressPayload {
    method: String,
    feature_set: String,
    rows: usize,
    cv_mse: f64,
    training_mse: f64,
    dropped_columns: Vec<String>,
    ratio_rule_a: String,
    ratio_rule_b: String,
    flagged_pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    stump: Option<StumpSummary>,
}

#[derive(Serialize)]
struct StumpSummary {
    feature: String,
    threshold: f64,
    left_prediction: f64,
    right_prediction: f64,
}

fn cmd_meta_regress(
    settings: &Settings,
    args: &MetaRegressArgs,
    output: &Option<PathBuf>,
) -> Result<(), CliError> {
    use transferlab_core::metareg::*;
    let report = read_data(settings, &args.data)?;
    let a_label: String =
        settings.get("rule_a", args.rule_a.clone(), Some("forest".to_string()))?;
    let b_label: String =
        settings.get("rule_b", args.rule_b.clone(), Some("cpt:abdg".to_string()))?;
    let feats_raw: String =
        settings.get("features", args.features.clone(), Some("both".to_string()))?;
    let feature_set = FeatureSet::parse(&feats_raw)
        .ok_or_else(|| CliError::usage(format!("unknown feature set `{feats_raw}`")))?;
    let method_raw: String =
        settings.get("method", args.method.clone(), Some("stump".to_string()))?;
    let method = RatioMethod::parse(&method_raw)
        .ok_or_else(|| CliError::usage(format!("unknown method `{method_raw}`")))?;
    let folds: usize = settings.get("folds", args.folds, Some(10))?;
    let seed: u64 = settings.get("seed", args.seed, None)?;

    // ratio tensor: rule A error over rule B error per (train, target) pair
    let measure = MeasureSpec::ratio(parse_rule(&a_label)?, parse_rule(&b_label)?);
    let spec = LossSpec::squared_identity();
    let tensor = pooled_transfer_errors(
        &report.meta,
        &parse_rule(&a_label)?,
        1,
        &measure,
        &spec,
        &FitConfig::default(),
        seed,
    )?;
    let features: Vec<SampleFeatures> = report.meta.samples.iter().map(sample_features).collect();
    let mut rows = Vec::new();
    for e in &tensor.entries {
        if e.flag.is_some() {
            continue;
        }
        rows.push(RatioRow {
            train: features[e.train[0]].clone(),
            test: features[e.target].clone(),
            ratio: e.value,
        });
    }
    let data = RatioDataset { rows, feature_set };
    let fit = fit_ratio_predictor(&data, method, folds, seed)?;

    if let Some(path) = &args.export_csv {
        let mut csv = String::new();
        let mut names = feature_names("tr_");
        names.extend(feature_names("te_"));
        csv.push_str(&names.join(","));
        csv.push_str(",ratio\n");
        for row in &data.rows {
            let mut cells: Vec<String> = row.train.0.iter().map(|v| format!("{v:.16e}")).collect();
            cells.extend(row.test.0.iter().map(|v| format!("{v:.16e}")));
            cells.push(format!("{:.16e}", row.ratio));
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
        std::fs::write(path, csv)
            .map_err(|e| CliError::run(format!("cannot write {path:?}: {e}")))?;
        settings
            .echo
            .borrow_mut()
            .insert("export_csv".into(), path.display().to_string());
    }

    let stump = match &fit.predictor {
        RatioPredictor::Stump(tree) => match &tree.nodes[0] {
            transferlab_core::rules::tree::Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let names = data.design_names();
                let leaf = |i: usize| match &tree.nodes[i] {
                    transferlab_core::rules::tree::Node::Leaf { value } => *value,
                    _ => f64::NAN,
                };
                Some(StumpSummary {
                    feature: names[*feature].clone(),
                    threshold: *threshold,
                    left_prediction: leaf(*left),
                    right_prediction: leaf(*right),
                })
            }
            _ => None,
        },
        _ => None,
    };

    emit(
        "meta-regress",
        settings,
        Some(seed),
        output,
        MetaRegressPayload {
            method: method.name().to_string(),
            feature_set: feature_set.name().to_string(),
            rows: data.rows.len(),
            cv_mse: fit.cv_mse,
            training_mse: fit.training_mse,
            dropped_columns: fit.dropped_columns,
            ratio_rule_a: a_label,
            ratio_rule_b: b_label,
            flagged_pairs: tensor.flagged_count(),
            stump,
        },
    )
}

fn build_synth_spec(
    settings: &Settings,
    args: &SynthArgs,
) -> Result<(SyntheticMetaSpec, u64), CliError> {
    let seed: u64 = settings.get("seed", args.seed, None)?;
    let n: usize = settings.get("n", args.n, Some(10))?;
    let obs_min: usize = settings.get("obs_min", args.obs_min, Some(20))?;
    let obs_max: usize = settings.get("obs_max", args.obs_max, Some(30))?;
    let mode_raw: String =
        settings.get("mode", args.mode.clone(), Some("shared_grid".to_string()))?;
    let mode = LotteryMode::parse(&mode_raw)
        .ok_or_else(|| CliError::usage(format!("unknown lottery mode `{mode_raw}`")))?;
    let grid_size: usize = settings.get("grid_size", args.grid_size, Some(12))?;
    let noise_sd: f64 = settings.get("noise_sd", args.noise_sd, Some(1.0))?;
    let parse4 =
        |key: &str, cli: &Option<String>, default: [f64; 4]| -> Result<[f64; 4], CliError> {
            let raw: String = settings.get(
                key,
                cli.clone(),
                Some(default.map(|v| v.to_string()).join(",")),
            )?;
            let parts: Vec<f64> = raw
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::usage(format!("`{key}` needs 4 comma-separated numbers")))?;
            if parts.len() != 4 {
                return Err(CliError::usage(format!(
                    "`{key}` needs 4 comma-separated numbers"
                )));
            }
            Ok([parts[0], parts[1], parts[2], parts[3]])
        };
    let means = parse4("param_means", &args.param_means, [0.85, 0.9, 1.0, 0.7])?;
    let spreads = parse4("param_spreads", &args.param_spreads, [0.05, 0.05, 0.2, 0.1])?;
    Ok((
        SyntheticMetaSpec {
            n_domains: n,
            obs_min,
            obs_max,
            param_means: means,
            param_spreads: spreads,
            lottery_mode: mode,
            grid_size,
            noise_sd,
            seed,
        },
        seed,
    ))
}

#[derive(Serialize)]
struct SimulateSummary {
    domains: usize,
    observations: usize,
    mode: String,
}

fn cmd_simulate(
    settings: &Settings,
    args: &SimulateArgs,
    output: &Option<PathBuf>,
) -> Result<(), CliError> {
    let (spec, seed) = build_synth_spec(settings, &args.synth)?;
    let meta = simulate_metadata(&spec);
    let csv = tio::metadata_to_csv(&meta);
    let summary = SimulateSummary {
        domains: meta.n(),
        observations: meta.samples.iter().map(|s| s.len()).sum(),
        mode: spec.lottery_mode.name().to_string(),
    };
    emit_text("simulate", settings, Some(seed), output, &csv, summary)
}

fn cmd_coverage(
    settings: &Settings,
    args: &CoverageArgs,
    output: &Option<PathBuf>,
) -> Result<(), CliError> {
    let (spec, seed) = build_synth_spec(settings, &args.synth)?;
    let r: usize = settings.get("r", args.r, Some(1))?;
    let tau = parse_tau(settings, args.tau.clone())?;
    let replications: usize = settings.get("replications", args.replications, Some(1000))?;
    if replications < 100 {
        return Err(CliError::usage("need at least 100 replications"));
    }
    let rule_label: String = settings.get("rule", args.rule.clone(), Some("eu".to_string()))?;
    let rule = parse_rule(&rule_label)?;
    let report = simulate_coverage(
        &spec,
        &rule,
        r,
        &tau,
        replications,
        &FitConfig::default(),
        seed,
    );
    emit("coverage", settings, Some(seed), output, report)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let settings = Settings::load(&cli.config)?;
    let workers = cli
        .workers
        .or_else(|| settings.file.get("workers").and_then(|v| v.parse().ok()))
        .or_else(|| {
            std::env::var("TRANSFERLAB_WORKERS")
                .ok()
                .and_then(|v| v.parse().ok())
        });
    if let Some(w) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build_global()
            .ok();
    }
    match &cli.command {
        Command::Validate(args) => cmd_validate(&settings, args, &cli.output),
        Command::WithinDomain(args) => cmd_within_domain(&settings, args, &cli.output),
        Command::Transfer(args) => cmd_transfer(&settings, args, &cli.output),
        Command::Intervals(args) => cmd_intervals(&settings, args, &cli.output),
        Command::Dominance(args) => cmd_dominance(&settings, args, &cli.output),
        Command::Ci(args) => cmd_ci(&settings, args, &cli.output),
        Command::MetaRegress(args) => cmd_meta_regress(&settings, args, &cli.output),
        Command::Simulate(args) => cmd_simulate(&settings, args, &cli.output),
        Command::Coverage(args) => cmd_coverage(&settings, args, &cli.output),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.usage => {
            eprintln!("error: {}", e.message);
            ExitCode::from(2)
        }
        Err(e) => {
            let obj = serde_json::json!({ "error": e.message });
            println!("{}", serde_json::to_string_pretty(&obj).unwrap());
            ExitCode::FAILURE
        }
    }
}
