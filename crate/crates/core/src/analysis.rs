//! Verification harness: contraction ratios, ε-interpolation sweeps,
//! moment-series checks, transport-plan experiments and training sweeps.
//!
//! Every report serializes to CSV with a fixed header, and to JSON.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{train, AgentConfig, DivergenceSpec};
use crate::divergence::{
    cost_matrix, lp_distance, mmd_squared, moment_series_tail_bound, moment_series_terms, wasserstein_1d,
    CostMatrix, CostSpec,
};
use crate::envs::{gaussian_cloud, gaussian_cloud_2d, rng, Policy, Rng, TabularMdp};
use crate::error::{Error, Result};
use crate::particles::ParticleSet;
use crate::sinkhorn::{plan_kl_to_product, sinkhorn_divergence, sinkhorn_divergence_terms, solve, SinkhornConfig, TransportPlan};
use crate::value_dist::{exact_bellman_pushforward, sup_distance, ReturnTable, DEFAULT_SUPPORT_CAP};

/// Pre-distances below this are too small for a meaningful ratio.
pub const RATIO_FLOOR: f64 = 1e-9;

/// Renders rows as RFC 4180 CSV.
pub fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn derived_seed(base: u64, index: u64) -> u64 {
    base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

// ---------------------------------------------------------------------------
// contraction

/// Distance between return distributions used in contraction trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricSpec {
    /// `W_p`.
    Wasserstein { p: f64 },
    /// CDF distance `l_p`.
    Lp { p: f64 },
    /// Unsquared MMD, `sqrt(mmd_squared)`.
    Mmd { kernel: CostSpec },
    /// Sinkhorn divergence value.
    Sinkhorn { config: SinkhornConfig, cost: CostSpec },
    /// `|mean(X) - mean(Y)|`; its supremum is the mean-table sup-norm.
    Mean,
}

impl MetricSpec {
    pub fn name(&self) -> String {
        match self {
            MetricSpec::Wasserstein { p } => format!("w{p}"),
            MetricSpec::Lp { p } => format!("l{p}"),
            MetricSpec::Mmd { kernel } => match kernel {
                CostSpec::UnrectifiedPower { alpha } => format!("mmd_alpha{alpha}"),
                CostSpec::NegGaussianMixture { .. } => "mmd_gaussian".into(),
            },
            MetricSpec::Sinkhorn { config, .. } => format!("sinkhorn_eps{}", config.epsilon),
            MetricSpec::Mean => "mean".into(),
        }
    }

    pub fn distance(&self, x: &ParticleSet, y: &ParticleSet) -> Result<f64> {
        match self {
            MetricSpec::Wasserstein { p } => wasserstein_1d(x, y, *p),
            MetricSpec::Lp { p } => lp_distance(x, y, *p),
            MetricSpec::Mmd { kernel } => Ok(mmd_squared(x, y, kernel)?.max(0.0).sqrt()),
            MetricSpec::Sinkhorn { config, cost } => sinkhorn_divergence(x, y, cost, config),
            MetricSpec::Mean => Ok((x.mean() - y.mean()).abs()),
        }
    }

    /// Contraction factor predicted for the policy-evaluation operator, if any.
    pub fn theoretical_bound(&self, gamma: f64) -> Option<f64> {
        match self {
            MetricSpec::Wasserstein { .. } | MetricSpec::Mean => Some(gamma),
            MetricSpec::Lp { p } => Some(gamma.powf(1.0 / p)),
            MetricSpec::Mmd {
                kernel: CostSpec::UnrectifiedPower { alpha },
            } if *alpha < 2.0 => Some(gamma.powf(alpha / 2.0)),
            MetricSpec::Mmd { .. } => None,
            MetricSpec::Sinkhorn { .. } => Some(1.0),
        }
    }

    /// Slack allowed on top of the bound.
    pub fn tolerance(&self) -> f64 {
        match self {
            MetricSpec::Sinkhorn { .. } => 1e-6,
            MetricSpec::Mean => 1e-12,
            _ => 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub pre: f64,
    pub post: f64,
    /// `None` marks a trial skipped because `pre < RATIO_FLOOR`.
    pub ratio: Option<f64>,
}

/// Sup distances before and after one application of the policy-evaluation operator.
pub fn contraction_trial(
    mdp: &TabularMdp,
    policy: &Policy,
    z1: &ReturnTable,
    z2: &ReturnTable,
    metric: &MetricSpec,
) -> Result<(f64, f64, Option<f64>)> {
    let pre = sup_distance(z1, z2, |a, b| metric.distance(a, b))?;
    let t1 = exact_bellman_pushforward(z1, mdp, policy, DEFAULT_SUPPORT_CAP)?;
    let t2 = exact_bellman_pushforward(z2, mdp, policy, DEFAULT_SUPPORT_CAP)?;
    let post = sup_distance(&t1, &t2, |a, b| metric.distance(a, b))?;
    let ratio = (pre >= RATIO_FLOOR).then(|| post / pre);
    Ok((pre, post, ratio))
}

/// How the second table of a trial is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pairing {
    /// Independent random tables.
    Random,
    /// `Z2 = Z1 + shift`; tight for the Wasserstein metrics.
    Translated { shift: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub metric: MetricSpec,
    pub gamma: f64,
    pub n_trials: usize,
    pub seed: u64,
    #[serde(default = "default_pairing")]
    pub pairing: Pairing,
    #[serde(default = "default_max_states")]
    pub max_states: usize,
    #[serde(default = "default_max_actions")]
    pub max_actions: usize,
    #[serde(default = "default_max_atoms")]
    pub max_atoms: usize,
}

fn default_pairing() -> Pairing {
    Pairing::Random
}
fn default_max_states() -> usize {
    4
}
fn default_max_actions() -> usize {
    2
}
fn default_max_atoms() -> usize {
    6
}

impl SuiteSpec {
    pub fn new(metric: MetricSpec, gamma: f64, n_trials: usize, seed: u64) -> Self {
        SuiteSpec {
            metric,
            gamma,
            n_trials,
            seed,
            pairing: Pairing::Random,
            max_states: default_max_states(),
            max_actions: default_max_actions(),
            max_atoms: default_max_atoms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub metric: String,
    pub spec: SuiteSpec,
    pub rows: Vec<TrialRow>,
    pub max_ratio: f64,
    pub skipped: usize,
    /// `None` when no bound is asserted for this metric.
    pub theoretical_bound: Option<f64>,
    pub tolerance: f64,
    pub bound_satisfied: bool,
}

impl ContractionReport {
    pub fn to_csv(&self) -> Result<String> {
        csv_string(
            &["trial", "pre", "post", "ratio"],
            self.rows.iter().map(|r| {
                vec![r.trial.to_string(), r.pre.to_string(), r.post.to_string(), opt(r.ratio)]
            }),
        )
    }
}

/// Random MDP without terminal states; some transitions are zeroed.
pub fn random_mdp(n_states: usize, n_actions: usize, gamma: f64, rng: &mut Rng) -> Result<TabularMdp> {
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let keep = rng.random_range(0..n_states);
        let mut row: Vec<f64> = (0..n_states)
            .map(|k| {
                if k == keep || rng.random::<f64>() > 0.3 {
                    rng.random::<f64>() + 0.05
                } else {
                    0.0
                }
            })
            .collect();
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
        transition.extend(row);
    }
    let reward = (0..n_states * n_actions).map(|_| rng.random_range(-1.0..1.0)).collect();
    TabularMdp::new(n_states, n_actions, transition, reward, gamma, vec![false; n_states], 0)
}

/// Random stochastic policy.
pub fn random_policy(n_states: usize, n_actions: usize, rng: &mut Rng) -> Result<Policy> {
    Policy::new(
        (0..n_states)
            .map(|_| {
                let row: Vec<f64> = (0..n_actions).map(|_| rng.random::<f64>() + 0.05).collect();
                let total: f64 = row.iter().sum();
                row.into_iter().map(|p| p / total).collect()
            })
            .collect(),
    )
}

/// Random table of weighted particle sets with values in `[-2, 2]`.
pub fn random_table(n_states: usize, n_actions: usize, max_atoms: usize, rng: &mut Rng) -> Result<ReturnTable> {
    let entries = (0..n_states * n_actions)
        .map(|_| {
            let k = rng.random_range(1..=max_atoms);
            let values = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let weights = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
            ParticleSet::normalized(values, weights)
        })
        .collect::<Result<Vec<_>>>()?;
    ReturnTable::new(n_states, n_actions, entries)
}

fn run_trial(spec: &SuiteSpec, trial: usize) -> Result<TrialRow> {
    let mut r = rng(derived_seed(spec.seed, trial as u64));
    let n_s = r.random_range(1..=spec.max_states);
    let n_a = r.random_range(1..=spec.max_actions);
    let mdp = random_mdp(n_s, n_a, spec.gamma, &mut r)?;
    let policy = random_policy(n_s, n_a, &mut r)?;
    let z1 = random_table(n_s, n_a, spec.max_atoms, &mut r)?;
    let z2 = match spec.pairing {
        Pairing::Random => random_table(n_s, n_a, spec.max_atoms, &mut r)?,
        Pairing::Translated { shift } => ReturnTable::new(
            n_s,
            n_a,
            z1.entries()
                .iter()
                .map(|p| p.affine(shift, 1.0))
                .collect::<Result<Vec<_>>>()?,
        )?,
    };
    let (pre, post, ratio) = contraction_trial(&mdp, &policy, &z1, &z2, &spec.metric)?;
    Ok(TrialRow {
        trial,
        pre,
        post,
        ratio,
    })
}

/// Runs `n_trials` independent random trials; rows come back in trial order.
pub fn contraction_suite(spec: &SuiteSpec) -> Result<ContractionReport> {
    if spec.n_trials == 0 {
        return Err(Error::param("n_trials", "must be positive"));
    }
    if !(spec.gamma > 0.0 && spec.gamma < 1.0) {
        return Err(Error::param("gamma", "must lie in (0, 1)"));
    }
    if spec.max_states == 0 || spec.max_actions == 0 || spec.max_atoms == 0 {
        return Err(Error::param("max_states", "table dimensions must be positive"));
    }
    let rows = (0..spec.n_trials)
        .into_par_iter()
        .map(|t| run_trial(spec, t))
        .collect::<Result<Vec<_>>>()?;
    let max_ratio = rows
        .iter()
        .filter_map(|r| r.ratio)
        .fold(0.0f64, f64::max);
    let skipped = rows.iter().filter(|r| r.ratio.is_none()).count();
    let theoretical_bound = spec.metric.theoretical_bound(spec.gamma);
    let tolerance = spec.metric.tolerance();
    let bound_satisfied = theoretical_bound.is_none_or(|b| max_ratio <= b + tolerance);
    Ok(ContractionReport {
        metric: spec.metric.name(),
        spec: spec.clone(),
        rows,
        max_ratio,
        skipped,
        theoretical_bound,
        tolerance,
        bound_satisfied,
    })
}

// ---------------------------------------------------------------------------
// interpolation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationRow {
    pub epsilon: f64,
    pub divergence: Option<f64>,
    /// Twice the unregularized transport cost, when computable in closed form.
    pub two_w: Option<f64>,
    pub mmd: f64,
    pub plan_kl: Option<f64>,
    /// Solver failure for this row, if any.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationReport {
    pub rows: Vec<InterpolationRow>,
    /// Interior rows outside `[min, max]` of the two oracles widened by 5%.
    pub bracket_violations: Vec<f64>,
}

impl InterpolationReport {
    pub fn to_csv(&self) -> Result<String> {
        csv_string(
            &["epsilon", "sinkhorn_divergence", "two_w", "mmd", "plan_kl", "error"],
            self.rows.iter().map(|r| {
                vec![
                    r.epsilon.to_string(),
                    opt(r.divergence),
                    opt(r.two_w),
                    r.mmd.to_string(),
                    opt(r.plan_kl),
                    r.error.clone().unwrap_or_default(),
                ]
            }),
        )
    }
}

/// Unregularized transport cost `W_alpha^alpha` for power costs; `None` otherwise.
pub fn transport_cost_oracle(x: &ParticleSet, y: &ParticleSet, cost: &CostSpec) -> Result<Option<f64>> {
    match cost {
        CostSpec::UnrectifiedPower { alpha } if *alpha >= 1.0 => Ok(Some(wasserstein_1d(x, y, *alpha)?.powf(*alpha))),
        _ => Ok(None),
    }
}

/// One row per ε with both limit oracles attached.
pub fn interpolation_sweep(
    x: &ParticleSet,
    y: &ParticleSet,
    cost: &CostSpec,
    eps_grid: &[f64],
    base: &SinkhornConfig,
) -> Result<InterpolationReport> {
    cost.validate()?;
    if eps_grid.is_empty() {
        return Err(Error::param("eps_grid", "must be nonempty"));
    }
    if eps_grid.iter().any(|e| !(e.is_finite() && *e > 0.0)) || eps_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("eps_grid", "must be positive and strictly ascending"));
    }
    let two_w = transport_cost_oracle(x, y, cost)?.map(|w| 2.0 * w);
    let mmd = mmd_squared(x, y, cost)?;
    let rows: Vec<InterpolationRow> = eps_grid
        .iter()
        .map(|&epsilon| {
            let cfg = SinkhornConfig { epsilon, ..base.clone() };
            match sinkhorn_divergence_terms(x, y, cost, &cfg) {
                Ok(t) => InterpolationRow {
                    epsilon,
                    divergence: Some(t.value()),
                    two_w,
                    mmd,
                    plan_kl: Some(plan_kl_to_product(&t.cross.plan)),
                    error: None,
                },
                Err(e) => InterpolationRow {
                    epsilon,
                    divergence: None,
                    two_w,
                    mmd,
                    plan_kl: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let mut bracket_violations = Vec::new();
    if let Some(w) = two_w {
        let (lo, hi) = (w.min(mmd), w.max(mmd));
        let slack = 0.05 * hi.abs().max(lo.abs());
        for r in rows.iter().skip(1).take(rows.len().saturating_sub(2)) {
            if let Some(d) = r.divergence {
                if d < lo - slack || d > hi + slack {
                    bracket_violations.push(r.epsilon);
                }
            }
        }
    }
    Ok(InterpolationReport {
        rows,
        bracket_violations,
    })
}

// ---------------------------------------------------------------------------
// moments

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub n: usize,
    pub contribution: f64,
    pub cumulative: f64,
    pub direct_mmd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub sigma: f64,
    pub n_max: usize,
    pub rows: Vec<MomentRow>,
    pub tail_bound: f64,
}

impl MomentReport {
    pub fn to_csv(&self) -> Result<String> {
        csv_string(
            &["n", "contribution", "cumulative", "direct_mmd"],
            self.rows.iter().map(|r| {
                vec![
                    r.n.to_string(),
                    r.contribution.to_string(),
                    r.cumulative.to_string(),
                    r.direct_mmd.to_string(),
                ]
            }),
        )
    }

    pub fn series_value(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cumulative)
    }
}

/// Per-order series contributions next to the Gaussian-kernel MMD (bandwidth `2 sigma^2`).
pub fn moment_match_report(x: &ParticleSet, y: &ParticleSet, sigma: f64, n_max: usize) -> Result<MomentReport> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::param("sigma", "must be positive"));
    }
    let terms = moment_series_terms(x, y, sigma, n_max)?;
    let direct_mmd = mmd_squared(x, y, &CostSpec::gaussian(vec![2.0 * sigma * sigma]))?;
    let mut cumulative = 0.0;
    let rows = terms
        .iter()
        .enumerate()
        .map(|(n, &contribution)| {
            cumulative += contribution;
            MomentRow {
                n,
                contribution,
                cumulative,
                direct_mmd,
            }
        })
        .collect();
    let m = x.max_abs().max(y.max_abs());
    Ok(MomentReport {
        sigma,
        n_max,
        rows,
        tail_bound: moment_series_tail_bound(m * m / (sigma * sigma), n_max),
    })
}

// ---------------------------------------------------------------------------
// transport plans

/// Two Gaussian samples and the ε values to solve at.
///
/// The second parameter of each Gaussian is a variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanExperimentSpec {
    pub n_points: usize,
    pub eps_list: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub x_mean: f64,
    #[serde(default = "default_x_var")]
    pub x_variance: f64,
    #[serde(default = "default_y_mean")]
    pub y_mean: f64,
    #[serde(default = "default_y_var")]
    pub y_variance: f64,
    /// Sample genuine 2D clouds with isotropic covariance instead of 1D marginals.
    #[serde(default)]
    pub two_d: bool,
    #[serde(default = "default_plan_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_plan_tolerance")]
    pub tolerance: f64,
}

fn default_x_var() -> f64 {
    2.0 / 3.0
}
fn default_y_mean() -> f64 {
    -1.0
}
fn default_y_var() -> f64 {
    1.0
}
fn default_plan_iterations() -> usize {
    20_000
}
fn default_plan_tolerance() -> f64 {
    1e-10
}

impl PlanExperimentSpec {
    pub fn new(n_points: usize, eps_list: Vec<f64>, seed: u64) -> Self {
        PlanExperimentSpec {
            n_points,
            eps_list,
            seed,
            x_mean: 0.0,
            x_variance: default_x_var(),
            y_mean: default_y_mean(),
            y_variance: default_y_var(),
            two_d: false,
            max_iterations: default_plan_iterations(),
            tolerance: default_plan_tolerance(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub epsilon: f64,
    pub entropy: f64,
    pub plan_kl: f64,
    pub marginal_error: f64,
    pub iterations: usize,
    pub primal_cost: f64,
}

#[derive(Debug, Clone)]
pub struct PlanExperiment {
    pub spec: PlanExperimentSpec,
    pub plans: Vec<TransportPlan>,
    pub summaries: Vec<PlanSummary>,
}

impl PlanExperiment {
    pub fn summary_csv(&self) -> Result<String> {
        csv_string(
            &["epsilon", "entropy", "plan_kl", "marginal_error", "iterations", "primal_cost"],
            self.summaries.iter().map(|s| {
                vec![
                    s.epsilon.to_string(),
                    s.entropy.to_string(),
                    s.plan_kl.to_string(),
                    s.marginal_error.to_string(),
                    s.iterations.to_string(),
                    s.primal_cost.to_string(),
                ]
            }),
        )
    }
}

fn sorted(p: ParticleSet) -> Result<ParticleSet> {
    let mut v = p.values().to_vec();
    v.sort_by(f64::total_cmp);
    ParticleSet::uniform(v)
}

fn experiment_cost(spec: &PlanExperimentSpec, r: &mut Rng) -> Result<CostMatrix> {
    let (sx, sy) = (spec.x_variance.sqrt(), spec.y_variance.sqrt());
    if spec.two_d {
        let mut x = gaussian_cloud_2d(spec.n_points, (spec.x_mean, spec.x_mean), sx, r)?.points;
        let mut y = gaussian_cloud_2d(spec.n_points, (spec.y_mean, spec.y_mean), sy, r)?.points;
        // order by first coordinate so the heatmap axes are readable
        x.sort_by(|a, b| a.0.total_cmp(&b.0));
        y.sort_by(|a, b| a.0.total_cmp(&b.0));
        let entries = x
            .iter()
            .flat_map(|p| y.iter().map(move |q| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)))
            .collect();
        CostMatrix::from_entries(spec.n_points, spec.n_points, entries)
    } else {
        let x = sorted(gaussian_cloud(spec.n_points, spec.x_mean, sx, r)?)?;
        let y = sorted(gaussian_cloud(spec.n_points, spec.y_mean, sy, r)?)?;
        cost_matrix(&x, &y, &CostSpec::power(2.0))
    }
}

/// Plans between two fixed Gaussian samples under squared distance, one per ε.
pub fn transport_plan_experiment(spec: &PlanExperimentSpec) -> Result<PlanExperiment> {
    if spec.n_points == 0 {
        return Err(Error::param("n_points", "must be positive"));
    }
    if spec.eps_list.is_empty() || spec.eps_list.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(Error::param("eps_list", "must be nonempty and positive"));
    }
    let mut r = rng(spec.seed);
    let cost = experiment_cost(spec, &mut r)?;
    let w = vec![1.0 / spec.n_points as f64; spec.n_points];
    let mut plans = Vec::new();
    let mut summaries = Vec::new();
    for &epsilon in &spec.eps_list {
        let cfg = SinkhornConfig::new(epsilon, spec.max_iterations).with_tolerance(spec.tolerance);
        let res = solve(&cost, &w, &w, &cfg).map_err(|e| e.labeled("plan"))?;
        summaries.push(PlanSummary {
            epsilon,
            entropy: res.plan.entropy(),
            plan_kl: plan_kl_to_product(&res.plan),
            marginal_error: res.marginal_error,
            iterations: res.iterations_run,
            primal_cost: res.primal_cost,
        });
        plans.push(res.plan);
    }
    Ok(PlanExperiment {
        spec: spec.clone(),
        plans,
        summaries,
    })
}

/// SVG heatmap of a plan.
///
/// The viewBox is `0 0 n_cols n_rows`: cell `(i, j)` is the unit square at
/// `x = j, y = i`, emitted in row-major order. Fill is a linear scale from
/// white at 0 to `#08306b` at the largest entry.
pub fn plan_heatmap_svg(plan: &TransportPlan, title: &str) -> String {
    let (n, m) = (plan.n_rows(), plan.n_cols());
    let max = plan.matrix().iter().cloned().fold(0.0f64, f64::max);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {m} {n}\" width=\"{}\" height=\"{}\" shape-rendering=\"crispEdges\">\n",
        (m * 8).max(200),
        (n * 8).max(200)
    ));
    out.push_str(&format!("<title>{}</title>\n", xml_escape(title)));
    for i in 0..n {
        for j in 0..m {
            let t = if max > 0.0 { plan.get(i, j) / max } else { 0.0 };
            let lerp = |hi: f64, lo: f64| (hi + t * (lo - hi)).round() as u8;
            out.push_str(&format!(
                "<rect x=\"{j}\" y=\"{i}\" width=\"1\" height=\"1\" fill=\"#{:02x}{:02x}{:02x}\"/>\n",
                lerp(255.0, 8.0),
                lerp(255.0, 48.0),
                lerp(255.0, 107.0)
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

// ---------------------------------------------------------------------------
// sensitivity sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Epsilon,
    Iterations,
    Particles,
    LearningRate,
}

impl SweepParameter {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParameter::Epsilon => "epsilon",
            SweepParameter::Iterations => "iterations",
            SweepParameter::Particles => "particles",
            SweepParameter::LearningRate => "learning_rate",
        }
    }

    fn apply(&self, base: &AgentConfig, value: f64) -> Result<AgentConfig> {
        let mut cfg = base.clone();
        let as_count = |name: &'static str| -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::param(name, format!("{value} is not a positive integer")))
            }
        };
        match self {
            SweepParameter::Epsilon | SweepParameter::Iterations => {
                let DivergenceSpec::Sinkhorn { config, .. } = &mut cfg.divergence else {
                    return Err(Error::param("parameter", "only Sinkhorn agents have epsilon and iterations"));
                };
                if *self == SweepParameter::Epsilon {
                    config.epsilon = value;
                } else {
                    config.max_iterations = as_count("iterations")?;
                }
            }
            SweepParameter::Particles => cfg.n_particles = as_count("particles")?,
            SweepParameter::LearningRate => cfg.learning_rate = value,
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    pub replications: usize,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("values", "must be nonempty and finite"));
        }
        if self.replications == 0 {
            return Err(Error::param("replications", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub replication: usize,
    pub seed: u64,
    pub final_mean_return: Option<f64>,
    pub final_sup_q_err: Option<f64>,
    pub wall_clock_s: f64,
    pub success: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub grid: SweepGrid,
    pub threshold: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> Result<String> {
        csv_string(
            &[
                "parameter",
                "value",
                "replication",
                "seed",
                "final_mean_return",
                "final_sup_q_err",
                "wall_clock_s",
                "success",
                "error",
            ],
            self.rows.iter().map(|r| {
                vec![
                    r.parameter.clone(),
                    r.value.to_string(),
                    r.replication.to_string(),
                    r.seed.to_string(),
                    opt(r.final_mean_return),
                    opt(r.final_sup_q_err),
                    format!("{:.3}", r.wall_clock_s),
                    r.success.to_string(),
                    r.error.clone().unwrap_or_default(),
                ]
            }),
        )
    }

    pub fn all_succeeded(&self) -> bool {
        self.rows.iter().all(|r| r.success)
    }
}

/// Trains one agent per grid value and replication; failures are recorded, not raised.
///
/// Replication `k` uses seed `base.seed + k` for every value, so values are compared on paired seeds.
pub fn sensitivity_sweep(mdp: &TabularMdp, base: &AgentConfig, grid: &SweepGrid, threshold: f64) -> Result<SweepReport> {
    grid.validate()?;
    let jobs: Vec<(f64, usize)> = grid
        .values
        .iter()
        .flat_map(|&v| (0..grid.replications).map(move |k| (v, k)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(value, replication)| {
            let seed = base.seed.wrapping_add(replication as u64);
            let started = std::time::Instant::now();
            let outcome = grid.parameter.apply(base, value).and_then(|cfg| {
                train(
                    mdp,
                    &AgentConfig {
                        seed,
                        ..cfg
                    },
                )
            });
            let wall_clock_s = started.elapsed().as_secs_f64();
            let (final_mean_return, final_sup_q_err, error) = match outcome {
                Ok(rec) => {
                    let last = rec.final_row().cloned();
                    (last.as_ref().map(|r| r.mean_return), last.and_then(|r| r.sup_q_err), None)
                }
                Err(e) => (None, None, Some(e.to_string())),
            };
            SweepRow {
                parameter: grid.parameter.name().into(),
                value,
                replication,
                seed,
                final_mean_return,
                final_sup_q_err,
                wall_clock_s,
                success: final_sup_q_err.is_some_and(|e| e <= threshold),
                error,
            }
        })
        .collect();
    Ok(SweepReport {
        grid: grid.clone(),
        threshold,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn u(v: &[f64]) -> ParticleSet {
        ParticleSet::uniform(v.to_vec()).unwrap()
    }

    fn one_state(gamma: f64) -> (TabularMdp, Policy) {
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![0.5], gamma, vec![false], 0).unwrap();
        (mdp, Policy::uniform(1, 1))
    }

    #[test]
    fn translated_pair_is_tight_for_w1() {
        let (mdp, pi) = one_state(0.9);
        let z1 = ReturnTable::constant(1, 1, &u(&[0.0, 1.0, 3.0]));
        let z2 = ReturnTable::constant(1, 1, &u(&[0.7, 1.7, 3.7]));
        let (pre, post, ratio) = contraction_trial(&mdp, &pi, &z1, &z2, &MetricSpec::Wasserstein { p: 1.0 }).unwrap();
        assert!((pre - 0.7).abs() < 1e-12);
        assert!((post - 0.63).abs() < 1e-12);
        assert!((ratio.unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn shifted_mmd_respects_its_rate() {
        let (mdp, pi) = one_state(0.9);
        let z1 = ReturnTable::constant(1, 1, &u(&[0.0, 2.0]));
        let z2 = ReturnTable::constant(1, 1, &u(&[0.5, 2.5]));
        let metric = MetricSpec::Mmd {
            kernel: CostSpec::power(1.0),
        };
        let (_, _, ratio) = contraction_trial(&mdp, &pi, &z1, &z2, &metric).unwrap();
        assert!(ratio.unwrap() <= 0.9f64.sqrt() + 1e-9);
    }

    #[test]
    fn identical_tables_are_skipped() {
        let (mdp, pi) = one_state(0.5);
        let z = ReturnTable::constant(1, 1, &u(&[1.0]));
        let (pre, _, ratio) = contraction_trial(&mdp, &pi, &z, &z, &MetricSpec::Mean).unwrap();
        assert_eq!(pre, 0.0);
        assert!(ratio.is_none());
    }

    #[test]
    fn bounds_per_metric() {
        assert_eq!(MetricSpec::Wasserstein { p: 1.0 }.theoretical_bound(0.81), Some(0.81));
        assert_eq!(MetricSpec::Lp { p: 2.0 }.theoretical_bound(0.81), Some(0.9));
        let mmd2 = MetricSpec::Mmd {
            kernel: CostSpec::power(2.0),
        };
        assert_eq!(mmd2.theoretical_bound(0.81), None);
    }

    #[test]
    fn small_suite_runs_and_is_ordered() {
        let rep = contraction_suite(&SuiteSpec::new(MetricSpec::Wasserstein { p: 1.0 }, 0.9, 20, 3)).unwrap();
        assert_eq!(rep.rows.len(), 20);
        assert!(rep.rows.iter().enumerate().all(|(i, r)| r.trial == i));
        assert!(rep.bound_satisfied, "{}", rep.max_ratio);
        let again = contraction_suite(&rep.spec).unwrap();
        assert_eq!(rep, again);
    }

    #[test]
    fn interpolation_rejects_bad_grids() {
        let x = u(&[0.0]);
        let c = CostSpec::power(1.0);
        let base = SinkhornConfig::default();
        assert!(interpolation_sweep(&x, &x, &c, &[], &base).is_err());
        assert!(interpolation_sweep(&x, &x, &c, &[1.0, 0.5], &base).is_err());
        assert!(interpolation_sweep(&x, &x, &c, &[0.0, 1.0], &base).is_err());
    }

    #[test]
    fn moments_of_identical_sets_vanish() {
        let x = u(&[0.3, -1.0, 1.5]);
        let rep = moment_match_report(&x, &x, 1.0, 40).unwrap();
        assert!(rep.rows.iter().all(|r| r.contribution == 0.0 && r.cumulative == 0.0));
        assert!(rep.rows[0].direct_mmd.abs() < 1e-15);
    }

    #[test]
    fn heatmap_has_one_rect_per_cell() {
        let plan = TransportPlan::product(&[0.5, 0.5], &[0.25, 0.25, 0.5]);
        let svg = plan_heatmap_svg(&plan, "a<b");
        assert!(svg.contains("viewBox=\"0 0 3 2\""));
        assert_eq!(svg.matches("<rect").count(), 6);
        assert!(svg.contains("#08306b"));
        assert!(svg.contains("a&lt;b"));
    }

    #[test]
    fn sweep_rejects_bad_values() {
        let (mdp, _) = one_state(0.5);
        let grid = SweepGrid {
            parameter: SweepParameter::Particles,
            values: vec![2.5],
            replications: 1,
        };
        let base = AgentConfig {
            gamma: 0.5,
            total_steps: 10,
            ..Default::default()
        };
        let rep = sensitivity_sweep(&mdp, &base, &grid, 0.1).unwrap();
        assert!(!rep.rows[0].success);
        assert!(rep.rows[0].error.is_some());
    }
}
