//! `rerand`: design, calibrate, evaluate, and compare rerandomization
//! balance criteria from the command line.
//!
//! All subcommands write a single JSON report to stdout (or `--out`) whose
//! `config` block is the fully resolved request including the seed, so any
//! report can be reproduced byte for byte from itself. `--threads` shards
//! Monte Carlo work without affecting any output byte.

mod inputs;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use rerand::analysis::{
    construct_unified, dominance_test, heuristic_stratum_weights, optimal_tier_weights,
    ScoreSource,
};
use rerand::criteria::{CriterionSpec, ScoreVector};
use rerand::dgp::DgpFile;
use rerand::distributions::CalibrationResult;
use rerand::engine::{
    configure_threads, enumerate_assignments, monte_carlo_balance, rerandomize, McConfig,
    RandomizationPlan, DEFAULT_MAX_DRAWS,
};
use rerand::error::Error;
use rerand::population::CovariatePopulation;
use rerand::stats::{sample_covariance, CovariateMatrix};

use inputs::{load_criterion, load_plan, parse_f64_list, parse_u32_list};
use report::{matrix_dump_csv, CliError, Report};

#[derive(Parser)]
#[command(name = "rerand", version, about = "Rerandomization design toolkit")]
struct Cli {
    /// Worker threads for Monte Carlo sharding; never changes results.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw assignments until the balance criterion accepts one.
    Design(DesignArgs),
    /// Calibrate a weighted-sum criterion to a target acceptance rate.
    Calibrate(CalibrateArgs),
    /// Estimate accepted and unconditional balance moments for a criterion.
    Evaluate(EvaluateArgs),
    /// Test whether one criterion statistically dominates another.
    Compare(CompareArgs),
    /// Recommend tier or stratum weights for a unified criterion.
    Weights(WeightsArgs),
    /// Sample a synthetic population from a generator config.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct DesignArgs {
    /// Covariate CSV: header row of labels, one unit per row.
    #[arg(long)]
    data: PathBuf,
    /// Population sidecar JSON (tiers, strata, outcomes).
    #[arg(long)]
    sidecar: Option<PathBuf>,
    /// Criterion: JSON file path, or inline object starting with '{'.
    #[arg(long)]
    criterion: String,
    /// Randomization plan: JSON file path or inline object.
    #[arg(long)]
    plan: String,
    #[arg(long)]
    seed: u64,
    /// Give up with a domain error after this many draws.
    #[arg(long, default_value_t = DEFAULT_MAX_DRAWS)]
    max_draws: u64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Comma-separated score weights, e.g. "1,0.5".
    #[arg(long)]
    weights: String,
    /// Comma-separated chi-square dofs, e.g. "2,2".
    #[arg(long)]
    dofs: String,
    /// Target acceptance probability in (0,1).
    #[arg(long)]
    p: f64,
    /// Monte Carlo draws for mixed-weight thresholds.
    #[arg(long, default_value_t = 1_000_000)]
    mc_draws: u64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[arg(long)]
    criterion: String,
    #[arg(long)]
    plan: String,
    /// Enumerate every assignment instead of sampling; ignores --draws.
    #[arg(long, default_value_t = false)]
    exact: bool,
    #[arg(long, default_value_t = 100_000)]
    draws: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Resolve stochastic criteria with coin flips instead of weighting.
    #[arg(long, default_value_t = false)]
    coin_flip: bool,
    /// json: full report; csv: long-format dump of the covariance matrices.
    #[arg(long, default_value = "json")]
    format: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Baseline criterion: JSON file path or inline object.
    #[arg(long)]
    phi: String,
    /// Challenger criterion: JSON file path or inline object.
    #[arg(long)]
    phi_prime: String,
    /// Chi-square score dofs, e.g. "2,2"; exclusive with --scores.
    #[arg(long)]
    dofs: Option<String>,
    /// CSV of sampled score rows; exclusive with --dofs.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, default_value_t = 1_000_000)]
    draws: u64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WeightsArgs {
    /// Tier mode: comma-separated explained-variance shares per tier.
    #[arg(long)]
    r2: Option<String>,
    /// Tier mode: comma-separated score dofs per tier.
    #[arg(long)]
    dofs: Option<String>,
    /// Stratum mode: covariate CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Stratum mode: sidecar JSON carrying the strata.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    /// Stratum mode: stratified plan supplying treated counts.
    #[arg(long)]
    plan: Option<String>,
    /// Stratum mode: comparison weights lambda_j; defaults to n_j/n.
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Generator config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Units to sample.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Covariate CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Sidecar path; defaults to the CSV path with a .meta.json suffix.
    #[arg(long)]
    sidecar_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        configure_threads(threads);
    }
    let outcome = match cli.command {
        Command::Design(args) => cmd_design(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Weights(args) => cmd_weights(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => ExitCode::from(e.report() as u8),
    }
}

fn load_population(
    data: &Path,
    sidecar: Option<&PathBuf>,
) -> Result<CovariatePopulation, Error> {
    CovariatePopulation::load(data, sidecar.map(PathBuf::as_path))
}

#[derive(Serialize)]
struct DesignConfig {
    data: PathBuf,
    sidecar: Option<PathBuf>,
    criterion: CriterionSpec,
    plan: RandomizationPlan,
    seed: u64,
    max_draws: u64,
}

#[derive(Serialize)]
struct DesignResult {
    /// 1 = treated, aligned with data rows.
    assignment: Vec<u8>,
    treated_indices: Vec<usize>,
    n_treated: usize,
    n_control: usize,
    draws_used: u64,
    /// Balance scores of the accepted assignment.
    scores: ScoreVector,
}

fn cmd_design(args: DesignArgs) -> Result<(), CliError> {
    let pop = load_population(&args.data, args.sidecar.as_ref())?;
    let criterion = load_criterion(&args.criterion)?;
    let plan = load_plan(&args.plan)?;

    let (assignment, draws_used) =
        rerandomize(&pop, &plan, &criterion, args.seed, args.max_draws)?;
    let prepared = rerand::criteria::PreparedCriterion::new(&criterion, &pop)?;
    let scores = prepared.scores(&assignment)?;

    let result = DesignResult {
        assignment: assignment.indicator(),
        treated_indices: assignment.treated_indices(),
        n_treated: assignment.n_treated(),
        n_control: assignment.n_control(),
        draws_used,
        scores,
    };
    let config = DesignConfig {
        data: args.data,
        sidecar: args.sidecar,
        criterion,
        plan,
        seed: args.seed,
        max_draws: args.max_draws,
    };
    Report::new("design", config, result).emit(args.out.as_deref())?;
    Ok(())
}

#[derive(Serialize)]
struct CalibrateConfig {
    weights: Vec<f64>,
    dofs: Vec<u32>,
    target_acceptance: f64,
    mc_draws: u64,
    seed: u64,
}

#[derive(Serialize)]
struct CalibrateResult {
    criterion: CriterionSpec,
    calibration: CalibrationResult,
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    let weights = parse_f64_list("weights", &args.weights)?;
    let dofs = parse_u32_list("dofs", &args.dofs)?;
    let source = ScoreSource::ChiSquare { dofs: dofs.clone() };
    let (criterion, calibration) =
        construct_unified(&weights, &source, args.p, args.mc_draws, args.seed)?;
    let config = CalibrateConfig {
        weights,
        dofs,
        target_acceptance: args.p,
        mc_draws: args.mc_draws,
        seed: args.seed,
    };
    Report::new(
        "calibrate",
        config,
        CalibrateResult {
            criterion,
            calibration,
        },
    )
    .emit(args.out.as_deref())?;
    Ok(())
}

#[derive(Serialize)]
struct EvaluateConfig {
    data: PathBuf,
    sidecar: Option<PathBuf>,
    criterion: CriterionSpec,
    plan: RandomizationPlan,
    exact: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    draws: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coin_flip: Option<bool>,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    if args.format != "json" && args.format != "csv" {
        return Err(CliError::usage(format!(
            "--format must be json or csv, got '{}'",
            args.format
        )));
    }
    let pop = load_population(&args.data, args.sidecar.as_ref())?;
    let criterion = load_criterion(&args.criterion)?;
    let plan = load_plan(&args.plan)?;

    let balance = if args.exact {
        enumerate_assignments(&pop, &plan, &criterion)?
    } else {
        let cfg = McConfig {
            draws: args.draws,
            seed: args.seed,
            coin_flip: args.coin_flip,
        };
        monte_carlo_balance(&pop, &plan, &criterion, &cfg)?
    };

    if args.format == "csv" {
        matrix_dump_csv(
            &[
                ("accepted_cov_diff", &balance.cov_diff),
                ("all_cov_diff", &balance.cov_diff_all),
            ],
            &balance.covariate_labels,
            args.out.as_deref(),
        )?;
        return Ok(());
    }

    let config = EvaluateConfig {
        data: args.data,
        sidecar: args.sidecar,
        criterion,
        plan,
        exact: args.exact,
        draws: (!args.exact).then_some(args.draws),
        seed: (!args.exact).then_some(args.seed),
        coin_flip: (!args.exact).then_some(args.coin_flip),
    };
    Report::new("evaluate", config, balance).emit(args.out.as_deref())?;
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ScoreSourceEcho {
    ChiSquare { dofs: Vec<u32> },
    Sample { path: PathBuf },
}

#[derive(Serialize)]
struct CompareConfig {
    phi: CriterionSpec,
    phi_prime: CriterionSpec,
    source: ScoreSourceEcho,
    draws: u64,
    seed: u64,
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let phi = load_criterion(&args.phi)?;
    let phi_prime = load_criterion(&args.phi_prime)?;
    let (source, echo) = match (&args.dofs, &args.scores) {
        (Some(dofs), None) => {
            let dofs = parse_u32_list("dofs", dofs)?;
            (
                ScoreSource::ChiSquare { dofs: dofs.clone() },
                ScoreSourceEcho::ChiSquare { dofs },
            )
        }
        (None, Some(path)) => {
            let sample = CovariateMatrix::read_csv(path)?;
            (
                ScoreSource::Sample {
                    scores: sample.values().clone(),
                },
                ScoreSourceEcho::Sample { path: path.clone() },
            )
        }
        _ => {
            return Err(CliError::usage(
                "compare needs exactly one of --dofs or --scores",
            ))
        }
    };
    let verdict = dominance_test(&phi, &phi_prime, &source, args.draws, args.seed)?;
    let config = CompareConfig {
        phi,
        phi_prime,
        source: echo,
        draws: args.draws,
        seed: args.seed,
    };
    Report::new("compare", config, verdict).emit(args.out.as_deref())?;
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
enum WeightsConfig {
    Tier {
        r_squared: Vec<f64>,
        dofs: Vec<u32>,
    },
    Stratum {
        data: PathBuf,
        sidecar: PathBuf,
        plan: RandomizationPlan,
        lambda: Vec<f64>,
    },
}

#[derive(Serialize)]
struct WeightsResult {
    /// Recommended weights, rescaled to a largest weight of 1.
    weights: Vec<f64>,
}

fn cmd_weights(args: WeightsArgs) -> Result<(), CliError> {
    match (&args.r2, &args.data) {
        (Some(r2), None) => {
            let dofs_arg = args.dofs.as_ref().ok_or_else(|| {
                CliError::usage("tier weights need --dofs alongside --r2")
            })?;
            let r_squared = parse_f64_list("r2", r2)?;
            let dofs = parse_u32_list("dofs", dofs_arg)?;
            let weights = optimal_tier_weights(&r_squared, &dofs)?;
            let config = WeightsConfig::Tier { r_squared, dofs };
            Report::new("weights", config, WeightsResult { weights })
                .emit(args.out.as_deref())?;
            Ok(())
        }
        (None, Some(data)) => cmd_stratum_weights(&args, data.clone()),
        _ => Err(CliError::usage(
            "weights needs either --r2/--dofs (tier mode) or --data/--sidecar/--plan (stratum mode)",
        )),
    }
}

fn cmd_stratum_weights(args: &WeightsArgs, data: PathBuf) -> Result<(), CliError> {
    let sidecar = args.sidecar.clone().ok_or_else(|| {
        CliError::usage("stratum weights need --sidecar carrying the strata")
    })?;
    let plan_arg = args.plan.as_ref().ok_or_else(|| {
        CliError::usage("stratum weights need --plan for per-stratum treated counts")
    })?;
    let pop = load_population(&data, Some(&sidecar))?;
    let plan = load_plan(plan_arg)?;
    let strata = pop
        .strata()
        .ok_or_else(|| CliError::usage("sidecar declares no strata"))?;
    let RandomizationPlan::Stratified {
        ref treated_per_stratum,
    } = plan
    else {
        return Err(CliError::usage("stratum weights need a stratified plan"));
    };
    plan.validate_for(pop.n_units(), Some(strata))?;

    let counts = strata.counts();
    let n = pop.n_units() as f64;
    let lambda = match &args.lambda {
        Some(s) => {
            let l = parse_f64_list("lambda", s)?;
            if l.len() != counts.len() {
                return Err(CliError::usage(format!(
                    "{} lambda values for {} strata",
                    l.len(),
                    counts.len()
                )));
            }
            l
        }
        None => counts.iter().map(|&nj| nj as f64 / n).collect(),
    };

    let members = strata.members();
    let mut covariances = Vec::with_capacity(members.len());
    for (j, idx) in members.iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::InsufficientStratum { stratum: j + 1 }.into());
        }
        let rows: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| pop.covariates().values().row(i).to_vec())
            .collect();
        let sub =
            CovariateMatrix::from_rows(rows, pop.covariates().column_labels().to_vec())?;
        covariances.push(sample_covariance(&sub));
    }
    let zeta: Vec<f64> = lambda
        .iter()
        .zip(&counts)
        .map(|(&l, &nj)| l * l * n / nj as f64)
        .collect();
    let propensities: Vec<f64> = treated_per_stratum
        .iter()
        .zip(&counts)
        .map(|(&t, &nj)| t as f64 / nj as f64)
        .collect();

    let weights = heuristic_stratum_weights(&covariances, &zeta, &propensities)?;
    let config = WeightsConfig::Stratum {
        data,
        sidecar,
        plan,
        lambda,
    };
    Report::new("weights", config, WeightsResult { weights }).emit(args.out.as_deref())?;
    Ok(())
}

#[derive(Serialize)]
struct SimulateConfig {
    config: PathBuf,
    n: usize,
    seed: u64,
}

#[derive(Serialize)]
struct SimulateResult {
    data: PathBuf,
    sidecar: PathBuf,
    n_units: usize,
    n_covariates: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_strata: Option<usize>,
    has_outcomes: bool,
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let dgp = DgpFile::load(&args.config)?;
    let pop = dgp.sample(args.n, args.seed)?;
    let sidecar = args.sidecar_out.clone().unwrap_or_else(|| {
        let mut s = args.out.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    });
    pop.save(&args.out, &sidecar)?;

    let result = SimulateResult {
        data: args.out.clone(),
        sidecar,
        n_units: pop.n_units(),
        n_covariates: pop.covariates().n_covariates(),
        n_strata: pop.strata().map(|s| s.n_strata()),
        has_outcomes: pop.outcomes().is_some(),
    };
    let config = SimulateConfig {
        config: args.config,
        n: args.n,
        seed: args.seed,
    };
    let report = Report::new("simulate", config, result);
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    println!("{text}");
    Ok(())
}
