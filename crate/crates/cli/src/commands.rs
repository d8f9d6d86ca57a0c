//! Argument definitions and command handlers.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use sdrl_core::analysis::{
    contraction_suite, moment_match_report, plan_heatmap_svg, sensitivity_sweep, transport_plan_experiment,
    MetricSpec, Pairing, PlanExperimentSpec, SuiteSpec,
};
use sdrl_core::divergence::{cramer_distance, energy_distance, lp_distance, mmd_squared, wasserstein_1d, CostSpec};
use sdrl_core::sinkhorn::{sinkhorn_divergence, SinkhornConfig};
use sdrl_core::{agent, ParticleSet};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{Check, RunDir};

#[derive(Debug, Parser)]
#[command(name = "sdrl", version, about = "Sinkhorn distributional RL experiments")]
pub struct Cli {
    /// Seed for every random draw; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (default `runs/{command}-{unix time}-seed{seed}`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print a divergence between two particle sets.
    Divergence(DivergenceArgs),
    /// Train an agent from a TOML config.
    Train(TrainArgs),
    /// Run a contraction suite on random small MDPs.
    Contract(ContractArgs),
    /// Train over a parameter grid.
    Sweep(SweepArgs),
    /// Transport plans between two Gaussian samples.
    Plan(PlanArgs),
    /// Moment-series expansion of the Gaussian-kernel MMD.
    Moments(MomentsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DivergenceKind {
    Sinkhorn,
    Mmd,
    Energy,
    Cramer,
    W1,
    Wp,
    Lp,
}

#[derive(Debug, Args)]
pub struct DivergenceArgs {
    /// Divergence or distance to evaluate.
    #[arg(long, value_enum)]
    pub kind: DivergenceKind,
    /// Comma-separated values, or a JSON file holding `{"values": [..], "weights": [..]}` or `[..]`.
    #[arg(long, allow_hyphen_values = true)]
    pub x: String,
    /// Second particle set, same formats as `--x`.
    #[arg(long, allow_hyphen_values = true)]
    pub y: String,
    /// Entropic regularization.
    #[arg(long, default_value_t = 10.0)]
    pub eps: f64,
    /// Power of the unrectified cost `|x - y|^alpha`.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Gaussian bandwidths; selects the negated Gaussian-mixture cost.
    #[arg(long, value_delimiter = ',')]
    pub bandwidths: Option<Vec<f64>>,
    /// Sinkhorn iterations `L`.
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    /// Stop once the marginal error falls below this (0 runs all iterations).
    #[arg(long, default_value_t = 0.0)]
    pub tolerance: f64,
    /// Use the linear-domain solver when the kernel does not underflow.
    #[arg(long)]
    pub linear_domain: bool,
    /// Anneal eps from the cost scale by this factor in (0, 1).
    #[arg(long)]
    pub epsilon_scaling: Option<f64>,
    /// Order for `wp` and `lp`.
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    pub config: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricKind {
    W1,
    Wp,
    Lp,
    Mmd,
    Sinkhorn,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PairingKind {
    Random,
    Translated,
}

#[derive(Debug, Args)]
pub struct ContractArgs {
    /// Metric whose contraction ratio is measured.
    #[arg(long, value_enum)]
    pub divergence: MetricKind,
    /// Discount factor.
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    /// Number of random worlds.
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    /// Power of the unrectified cost (Sinkhorn and MMD).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Gaussian bandwidths for MMD.
    #[arg(long, value_delimiter = ',')]
    pub bandwidths: Option<Vec<f64>>,
    /// Order for `wp` and `lp`.
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
    /// Entropic regularization for `sinkhorn`.
    #[arg(long, default_value_t = 10.0)]
    pub eps: f64,
    /// Sinkhorn iterations; the suite runs the solver to convergence by default.
    #[arg(long, default_value_t = 5000)]
    pub iterations: usize,
    /// Solver stopping tolerance.
    #[arg(long, default_value_t = 1e-13)]
    pub tolerance: f64,
    /// How the two return tables are drawn.
    #[arg(long, value_enum, default_value_t = PairingKind::Random)]
    pub pairing: PairingKind,
    /// Offset for `--pairing translated`.
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    pub shift: f64,
    /// Largest number of states per world.
    #[arg(long, default_value_t = 4)]
    pub max_states: usize,
    /// Largest number of atoms per return law.
    #[arg(long, default_value_t = 6)]
    pub max_atoms: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// TOML run configuration; its `[sweep]` table supplies defaults.
    pub config: PathBuf,
    /// epsilon, iterations, particles or learning_rate.
    #[arg(long)]
    pub param: Option<String>,
    /// Grid values, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    /// Seeds per grid value.
    #[arg(long)]
    pub replications: Option<usize>,
    /// Required final sup-norm error of every run.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Regularization values, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.5,5")]
    pub eps: Vec<f64>,
    /// Samples per Gaussian.
    #[arg(long, default_value_t = 64)]
    pub n_points: usize,
    /// Sample 2D clouds and use squared Euclidean cost.
    #[arg(long)]
    pub two_d: bool,
    /// Sinkhorn iteration cap per plan.
    #[arg(long, default_value_t = 20_000)]
    pub iterations: usize,
    /// Solver stopping tolerance.
    #[arg(long, default_value_t = 1e-10)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct MomentsArgs {
    /// First particle set (comma-separated values or JSON file).
    #[arg(long, allow_hyphen_values = true)]
    pub x: String,
    /// Second particle set.
    #[arg(long, allow_hyphen_values = true)]
    pub y: String,
    /// Kernel scale; the Gaussian bandwidth is `2 sigma^2`.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Number of series terms.
    #[arg(long, default_value_t = 40)]
    pub n_max: usize,
}

/// Parses `0,1.5,-2` inline or reads a JSON particle file.
pub fn parse_particles(arg: &str) -> Result<ParticleSet> {
    let inline: std::result::Result<Vec<f64>, _> = arg.split(',').map(|t| t.trim().parse::<f64>()).collect();
    if let Ok(values) = inline {
        return Ok(ParticleSet::uniform(values)?);
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(CliError::Input(format!(
            "`{arg}` is neither a comma-separated list of numbers nor an existing file"
        )));
    }
    let text = std::fs::read_to_string(path)?;
    let bad = |e: serde_json::Error| CliError::Input(format!("{}: {e}", path.display()));
    let value: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
    if value.is_array() {
        let values: Vec<f64> = serde_json::from_value(value).map_err(bad)?;
        Ok(ParticleSet::uniform(values)?)
    } else {
        serde_json::from_value(value).map_err(bad)
    }
}

fn cost_from(alpha: Option<f64>, bandwidths: Option<Vec<f64>>, default_alpha: f64) -> Result<CostSpec> {
    let cost = match (alpha, bandwidths) {
        (Some(_), Some(_)) => return Err(CliError::Input("pass either --alpha or --bandwidths, not both".into())),
        (_, Some(b)) => CostSpec::gaussian(b),
        (a, None) => CostSpec::power(a.unwrap_or(default_alpha)),
    };
    cost.validate()?;
    Ok(cost)
}

pub fn divergence_value(args: &DivergenceArgs) -> Result<f64> {
    let x = parse_particles(&args.x)?;
    let y = parse_particles(&args.y)?;
    let value = match args.kind {
        DivergenceKind::Sinkhorn => {
            let cost = cost_from(args.alpha, args.bandwidths.clone(), 2.0)?;
            let cfg = SinkhornConfig {
                epsilon: args.eps,
                max_iterations: args.iterations,
                tolerance: args.tolerance,
                log_domain: !args.linear_domain,
                include_entropy: false,
                epsilon_scaling: args.epsilon_scaling,
            };
            cfg.validate()?;
            sinkhorn_divergence(&x, &y, &cost, &cfg)?
        }
        DivergenceKind::Mmd => mmd_squared(&x, &y, &cost_from(args.alpha, args.bandwidths.clone(), 1.0)?)?,
        DivergenceKind::Energy => energy_distance(&x, &y),
        DivergenceKind::Cramer => cramer_distance(&x, &y),
        DivergenceKind::W1 => wasserstein_1d(&x, &y, 1.0)?,
        DivergenceKind::Wp => wasserstein_1d(&x, &y, args.p)?,
        DivergenceKind::Lp => lp_distance(&x, &y, args.p)?,
    };
    Ok(value)
}

/// Shared state for one invocation.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn base_dir(config: &Path) -> &Path {
    config.parent().unwrap_or(Path::new("."))
}

pub fn cmd_train(g: &Globals, args: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let mdp = cfg.build_mdp(base_dir(&args.config))?;
    let agent_cfg = cfg.agent_config(&mdp, g.seed)?;
    let mut run = RunDir::create(g.out.as_deref(), "train", agent_cfg.seed)?;
    let record = agent::train(&mdp, &agent_cfg)?;
    for p in record.write(run.root(), "curve")? {
        if let Some(name) = p.file_name().and_then(|n| n.to_str()) {
            run.record(name);
        }
    }
    if let Some(row) = record.final_row() {
        eprintln!(
            "step {}  mean_return {:.4}  sup_q_err {}",
            row.step,
            row.mean_return,
            row.sup_q_err.map_or("n/a".into(), |e| format!("{e:.4}"))
        );
    }
    let echo = serde_json::json!({ "file": to_json(&cfg), "resolved": to_json(&agent_cfg) });
    let root = run.root().to_path_buf();
    run.finish(Some(&args.config), echo, Vec::new())?;
    println!("{}", root.join("curve.csv").display());
    Ok(())
}

fn metric_from(args: &ContractArgs) -> Result<MetricSpec> {
    let metric = match args.divergence {
        MetricKind::W1 => MetricSpec::Wasserstein { p: 1.0 },
        MetricKind::Wp => MetricSpec::Wasserstein { p: args.p },
        MetricKind::Lp => MetricSpec::Lp { p: args.p },
        MetricKind::Mmd => MetricSpec::Mmd {
            kernel: cost_from(args.alpha, args.bandwidths.clone(), 1.0)?,
        },
        MetricKind::Sinkhorn => {
            let config = SinkhornConfig::new(args.eps, args.iterations).with_tolerance(args.tolerance);
            config.validate()?;
            MetricSpec::Sinkhorn {
                config,
                cost: cost_from(args.alpha, args.bandwidths.clone(), 2.0)?,
            }
        }
        MetricKind::Mean => MetricSpec::Mean,
    };
    Ok(metric)
}

fn violation(checks: &[Check]) -> Result<()> {
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} ({})", c.name, c.detail))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::BoundViolation(failed.join("; ")))
    }
}

pub fn cmd_contract(g: &Globals, args: &ContractArgs) -> Result<()> {
    if !(args.gamma > 0.0 && args.gamma < 1.0) {
        return Err(CliError::Input(format!("--gamma must lie in (0, 1), got {}", args.gamma)));
    }
    let seed = g.seed.unwrap_or(0);
    let mut spec = SuiteSpec::new(metric_from(args)?, args.gamma, args.trials, seed);
    spec.pairing = match args.pairing {
        PairingKind::Random => Pairing::Random,
        PairingKind::Translated => Pairing::Translated { shift: args.shift },
    };
    spec.max_states = args.max_states;
    spec.max_atoms = args.max_atoms;
    let mut run = RunDir::create(g.out.as_deref(), "contract", seed)?;
    let report = contraction_suite(&spec)?;
    run.write("contraction.csv", &report.to_csv()?)?;
    let detail = format!(
        "max_ratio {} vs bound {} + {} ({} trials skipped)",
        report.max_ratio,
        report.theoretical_bound.map_or("none".into(), |b| b.to_string()),
        report.tolerance,
        report.skipped
    );
    eprintln!("{}: {detail}", report.metric);
    let checks = match report.theoretical_bound {
        Some(_) => vec![Check::new(format!("{} contraction", report.metric), report.bound_satisfied, detail)],
        None => Vec::new(),
    };
    let echo = serde_json::json!({ "suite": to_json(&spec), "max_ratio": report.max_ratio });
    run.finish(None, echo, checks.clone())?;
    println!("{}", report.max_ratio);
    violation(&checks)
}

pub fn cmd_sweep(g: &Globals, args: &SweepArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let mdp = cfg.build_mdp(base_dir(&args.config))?;
    let base = cfg.agent_config(&mdp, g.seed)?;
    let grid = cfg.sweep_grid(args.param.as_deref(), args.values.clone(), args.replications)?;
    let threshold = cfg.sweep_threshold(args.threshold);
    let mut run = RunDir::create(g.out.as_deref(), "sweep", base.seed)?;
    let report = sensitivity_sweep(&mdp, &base, &grid, threshold)?;
    run.write("sweep.csv", &report.to_csv()?)?;
    let checks: Vec<Check> = report
        .rows
        .iter()
        .map(|r| {
            let detail = match (&r.error, r.final_sup_q_err) {
                (Some(e), _) => e.clone(),
                (None, Some(err)) => format!("sup_q_err {err} vs {threshold}"),
                (None, None) => "no oracle error recorded".into(),
            };
            Check::new(format!("{}={} rep {}", r.parameter, r.value, r.replication), r.success, detail)
        })
        .collect();
    let echo = serde_json::json!({
        "file": to_json(&cfg),
        "resolved": to_json(&base),
        "grid": to_json(&grid),
        "threshold": threshold,
    });
    run.finish(Some(&args.config), echo, checks.clone())?;
    println!("{}", tally(&checks, "runs met the bound"));
    violation(&checks)
}

fn tally(checks: &[Check], what: &str) -> String {
    let passed = checks.iter().filter(|c| c.passed).count();
    format!("{passed} of {} {what}", checks.len())
}

pub fn cmd_plan(g: &Globals, args: &PlanArgs) -> Result<()> {
    let seed = g.seed.unwrap_or(0);
    let mut spec = PlanExperimentSpec::new(args.n_points, args.eps.clone(), seed);
    spec.two_d = args.two_d;
    spec.max_iterations = args.iterations;
    spec.tolerance = args.tolerance;
    let mut run = RunDir::create(g.out.as_deref(), "plan", seed)?;
    let exp = transport_plan_experiment(&spec)?;
    for (plan, s) in exp.plans.iter().zip(&exp.summaries) {
        let svg = plan_heatmap_svg(plan, &format!("transport plan, eps = {}", s.epsilon));
        run.write(&format!("plan_eps{}.svg", s.epsilon), &svg)?;
        let rows = (0..plan.n_rows()).map(|i| (0..plan.n_cols()).map(|j| plan.get(i, j).to_string()).collect());
        let header: Vec<String> = (0..plan.n_cols()).map(|j| format!("col{j}")).collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        run.write(
            &format!("plan_eps{}.csv", s.epsilon),
            &sdrl_core::analysis::csv_string(&header, rows)?,
        )?;
    }
    run.write("summary.csv", &exp.summary_csv()?)?;

    let mut by_eps: Vec<_> = exp.summaries.iter().collect();
    by_eps.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
    let entropy_up = by_eps.windows(2).all(|w| w[1].entropy > w[0].entropy);
    let kl_down = by_eps.windows(2).all(|w| w[1].plan_kl < w[0].plan_kl);
    let list = |f: fn(&sdrl_core::analysis::PlanSummary) -> f64| {
        by_eps.iter().map(|s| format!("{:.6}", f(s))).collect::<Vec<_>>().join(", ")
    };
    let checks = vec![
        Check::new("entropy strictly increasing in eps", entropy_up, list(|s| s.entropy)),
        Check::new("plan KL to product strictly decreasing in eps", kl_down, list(|s| s.plan_kl)),
    ];
    for s in &exp.summaries {
        eprintln!(
            "eps {}: entropy {:.6}  plan_kl {:.6}  marginal_error {:.2e}  iterations {}",
            s.epsilon, s.entropy, s.plan_kl, s.marginal_error, s.iterations
        );
    }
    run.finish(None, serde_json::json!({ "experiment": to_json(&spec) }), checks.clone())?;
    println!("{}", tally(&checks, "checks passed"));
    violation(&checks)
}

pub fn cmd_moments(g: &Globals, args: &MomentsArgs) -> Result<()> {
    let x = parse_particles(&args.x)?;
    let y = parse_particles(&args.y)?;
    let report = moment_match_report(&x, &y, args.sigma, args.n_max)?;
    let mut run = RunDir::create(g.out.as_deref(), "moments", g.seed.unwrap_or(0))?;
    run.write("moments.csv", &report.to_csv()?)?;
    let series = report.series_value();
    let direct = report.rows.last().map_or(0.0, |r| r.direct_mmd);
    let gap = (series - direct).abs();
    let slack = report.tail_bound + 1e-9;
    let checks = vec![Check::new(
        "series matches direct MMD within the tail bound",
        gap <= slack,
        format!("|series - direct| = {gap:e}, tail bound {:e}", report.tail_bound),
    )];
    let echo = serde_json::json!({ "x": to_json(&x), "y": to_json(&y), "sigma": args.sigma, "n_max": args.n_max });
    run.finish(None, echo, checks.clone())?;
    println!("{series:.12}");
    violation(&checks)
}

/// Runs one parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Input("--threads must be positive".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let g = Globals {
        seed: cli.seed,
        out: cli.out,
    };
    match &cli.command {
        Command::Divergence(args) => {
            println!("{:.12}", divergence_value(args)?);
            Ok(())
        }
        Command::Train(args) => cmd_train(&g, args),
        Command::Contract(args) => cmd_contract(&g, args),
        Command::Sweep(args) => cmd_sweep(&g, args),
        Command::Plan(args) => cmd_plan(&g, args),
        Command::Moments(args) => cmd_moments(&g, args),
    }
}
