//! Entropic optimal transport by Sinkhorn diagonal scaling.
//!
//! Plans take the scaling form `P_ij = u_i K_ij v_j` with Gibbs kernel
//! `K_ij = exp(-C_ij / eps)`. Starting from `v = 1`, each iteration applies
//! `u <- a / (K v)` then `v <- b / (K^T u)`, where `a`, `b` are the particle
//! weights. Marginals are probability vectors, so the plan has unit mass and
//! the primal cost `<P, C>` is an expectation; with uniform weights the
//! unit-marginal convention `1_N` gives `N` times our values.
//!
//! The log-domain path keeps `f = log u`, `g = log v` and replaces the
//! matrix-vector products by log-sum-exp reductions. The linear path is
//! faster and is used only when no Gibbs entry underflows; it falls back to
//! the log-domain path on underflow or non-finite scalings.
//!
//! The reported value is the sharp primal cost `<P, C>` of the entropic plan.
//! Setting [`SinkhornConfig::include_entropy`] adds `eps * KL(P | a x b)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::divergence::{cost_matrix, CostMatrix, CostSpec};
use crate::error::{Error, Result};
use crate::particles::ParticleSet;

/// Marginal L1 error below which a run counts as converged.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-6;

/// Smallest `-C/eps` for which `exp` stays a normal float.
const LINEAR_DOMAIN_FLOOR: f64 = -700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    /// Entropic regularization strength.
    pub epsilon: f64,
    /// Number of scaling iterations `L`; exactly this many run when `tolerance` is 0.
    pub max_iterations: usize,
    /// Early-stop threshold on the marginal error; 0 disables early stopping.
    pub tolerance: f64,
    pub log_domain: bool,
    /// Report `<P, C> + eps KL(P | a x b)` instead of the sharp cost.
    pub include_entropy: bool,
    /// Anneal from `eps_0 = max |C|` down to `epsilon` by this factor per
    /// stage, warm-starting the potentials. The iteration budget is split
    /// evenly over the stages. Implies the log domain.
    pub epsilon_scaling: Option<f64>,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 10.0,
            max_iterations: 10,
            tolerance: 0.0,
            log_domain: true,
            include_entropy: false,
            epsilon_scaling: None,
        }
    }
}

impl SinkhornConfig {
    pub fn new(epsilon: f64, max_iterations: usize) -> Self {
        SinkhornConfig {
            epsilon,
            max_iterations,
            ..Default::default()
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn with_log_domain(mut self, log_domain: bool) -> Self {
        self.log_domain = log_domain;
        self
    }

    pub fn with_entropy(mut self, include_entropy: bool) -> Self {
        self.include_entropy = include_entropy;
        self
    }

    pub fn with_epsilon_scaling(mut self, factor: f64) -> Self {
        self.epsilon_scaling = Some(factor);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::param(
                "epsilon",
                format!("must be positive, got {}", self.epsilon),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::param("max_iterations", "must be at least 1"));
        }
        if let Some(f) = self.epsilon_scaling {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::param(
                    "epsilon_scaling",
                    format!("factor must lie in (0, 1), got {f}"),
                ));
            }
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::param(
                "tolerance",
                format!("must be nonnegative, got {}", self.tolerance),
            ));
        }
        Ok(())
    }
}

/// A coupling matrix together with the marginals it was fitted to.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    matrix: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
    row_marginal: Vec<f64>,
    col_marginal: Vec<f64>,
}

impl TransportPlan {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        matrix: Vec<f64>,
        row_marginal: Vec<f64>,
        col_marginal: Vec<f64>,
    ) -> Result<Self> {
        if matrix.len() != n_rows * n_cols
            || row_marginal.len() != n_rows
            || col_marginal.len() != n_cols
        {
            return Err(Error::InvalidInput("transport plan shape mismatch".into()));
        }
        if matrix.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidInput(
                "transport plan entries must be finite and nonnegative".into(),
            ));
        }
        Ok(TransportPlan {
            matrix,
            n_rows,
            n_cols,
            row_marginal,
            col_marginal,
        })
    }

    /// The independent coupling `r c^T`.
    pub fn product(row_marginal: &[f64], col_marginal: &[f64]) -> Self {
        let matrix = row_marginal
            .iter()
            .flat_map(|r| col_marginal.iter().map(move |c| r * c))
            .collect();
        TransportPlan {
            matrix,
            n_rows: row_marginal.len(),
            n_cols: col_marginal.len(),
            row_marginal: row_marginal.to_vec(),
            col_marginal: col_marginal.to_vec(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n_cols + j]
    }

    /// Row-major entries.
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn row_marginal(&self) -> &[f64] {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &[f64] {
        &self.col_marginal
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.matrix
            .chunks(self.n_cols)
            .map(|row| row.iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_cols];
        for row in self.matrix.chunks(self.n_cols) {
            sums.iter_mut().zip(row).for_each(|(s, p)| *s += p);
        }
        sums
    }

    /// Larger of the two L1 deviations between the plan's marginals and its targets.
    pub fn marginal_error(&self) -> f64 {
        let row: f64 = self
            .row_sums()
            .iter()
            .zip(&self.row_marginal)
            .map(|(s, r)| (s - r).abs())
            .sum();
        let col: f64 = self
            .col_sums()
            .iter()
            .zip(&self.col_marginal)
            .map(|(s, c)| (s - c).abs())
            .sum();
        row.max(col)
    }

    /// Shannon entropy `-sum P log P` with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .matrix
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    /// `<P, C>`.
    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        self.matrix.iter().zip(cost.entries()).map(|(p, c)| p * c).sum()
    }
}

/// Output of a Sinkhorn run.
#[derive(Debug, Clone)]
pub struct SinkhornResult {
    /// Sharp transport cost `<P, C>`.
    pub primal_cost: f64,
    /// `eps * KL(P | a x b)`, always computed.
    pub entropy_term: f64,
    pub plan: TransportPlan,
    /// `(log u, log v)`; entries are `-inf` for zero-weight particles.
    pub log_scalings: (Vec<f64>, Vec<f64>),
    pub iterations_run: usize,
    pub marginal_error: f64,
    pub converged: bool,
    pub used_log_domain: bool,
    /// Marginal error after each iteration.
    pub error_history: Vec<f64>,
    include_entropy: bool,
}

impl SinkhornResult {
    /// The loss value: primal cost, plus the entropy term when configured.
    pub fn value(&self) -> f64 {
        if self.include_entropy {
            self.primal_cost + self.entropy_term
        } else {
            self.primal_cost
        }
    }
}

#[inline]
fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn log_weights(w: &[f64]) -> Vec<f64> {
    w.iter().map(|x| x.ln()).collect()
}

fn check_marginal(name: &'static str, w: &[f64], len: usize) -> Result<()> {
    if w.len() != len {
        return Err(Error::InvalidInput(format!(
            "{name} marginal has length {} but the cost matrix needs {len}",
            w.len()
        )));
    }
    if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::InvalidInput(format!("{name} marginal has invalid entries")));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "{name} marginal sums to {total}, expected 1"
        )));
    }
    Ok(())
}

struct Scaling {
    f: Vec<f64>,
    g: Vec<f64>,
    history: Vec<f64>,
    /// Plan assembled from the scalings when the iterations ran in linear space.
    plan: Option<Vec<f64>>,
}

/// Solves the entropic transport problem for an explicit cost matrix.
pub fn solve(cost: &CostMatrix, a: &[f64], b: &[f64], cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    cfg.validate()?;
    let (n, m) = (cost.n_rows(), cost.n_cols());
    check_marginal("row", a, n)?;
    check_marginal("column", b, m)?;
    let eps = cfg.epsilon;
    let neg: Vec<f64> = cost.entries().iter().map(|c| -c / eps).collect();
    let failure = |detail: String| Error::SolverFailure {
        epsilon: eps,
        cost_scale: cost.max_abs(),
        detail,
    };

    let linear_ok =
        !cfg.log_domain && cfg.epsilon_scaling.is_none() && neg.iter().all(|x| *x >= LINEAR_DOMAIN_FLOOR);
    let (scaling, used_log_domain) = match linear_ok.then(|| linear_iterations(&neg, n, m, a, b, cfg)).flatten() {
        Some(s) => (s, false),
        None => (log_iterations(cost, &neg, a, b, cfg), true),
    };
    let Scaling { f, g, history, plan } = scaling;
    if f.iter().chain(&g).any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(failure("non-finite dual potentials".into()));
    }

    let matrix = plan.unwrap_or_else(|| {
        let mut matrix = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                matrix.push((f[i] + g[j] + neg[i * m + j]).exp());
            }
        }
        matrix
    });
    if matrix.iter().any(|p| !p.is_finite()) {
        return Err(failure("plan entries overflowed".into()));
    }
    let plan = TransportPlan {
        matrix,
        n_rows: n,
        n_cols: m,
        row_marginal: a.to_vec(),
        col_marginal: b.to_vec(),
    };
    let primal_cost = plan.cost(cost);
    let kl = dual_kl(&plan, &f, &g, &neg, a, b);
    let marginal_error = plan.marginal_error();
    if !primal_cost.is_finite() {
        return Err(failure("primal cost is not finite".into()));
    }
    Ok(SinkhornResult {
        primal_cost,
        entropy_term: eps * kl,
        plan,
        log_scalings: (f, g),
        iterations_run: history.len(),
        marginal_error,
        converged: marginal_error <= FEASIBILITY_TOLERANCE,
        used_log_domain,
        error_history: history,
        include_entropy: cfg.include_entropy,
    })
}

fn log_iterations(cost: &CostMatrix, target_neg: &[f64], a: &[f64], b: &[f64], cfg: &SinkhornConfig) -> Scaling {
    let (n, m) = (cost.n_rows(), cost.n_cols());
    let la = log_weights(a);
    let lb = log_weights(b);
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let eps_target = cfg.epsilon;
    let mut eps = match cfg.epsilon_scaling {
        Some(_) => cost.max_abs().max(eps_target),
        None => eps_target,
    };
    let mut annealed: Vec<f64> = cost.entries().iter().map(|c| -c / eps).collect();
    let mut neg: &[f64] = if eps == eps_target { target_neg } else { &annealed };
    // row_lse[i] = log (K v)_i for the current g
    let mut row_lse: Vec<f64> = (0..n)
        .map(|i| log_sum_exp(neg[i * m..(i + 1) * m].iter().zip(&g).map(|(k, gj)| k + gj)))
        .collect();
    let mut col_max = vec![f64::NEG_INFINITY; m];
    let mut col_sum = vec![0.0; m];
    // the iteration budget is shared evenly between the annealing stages and the target
    let per_stage = cfg.epsilon_scaling.map_or(usize::MAX, |factor| {
        let stages = ((eps / eps_target).ln() / (1.0 / factor).ln()).ceil().max(0.0) as usize;
        (cfg.max_iterations / (stages + 1)).max(1)
    });
    let mut history = Vec::new();
    let mut stage_start = 0;
    let mut stage_converged = false;
    for it in 0..cfg.max_iterations {
        let stage_end = stage_converged || (it > stage_start && (it - stage_start) % per_stage == 0);
        if let (Some(factor), true) = (cfg.epsilon_scaling, eps > eps_target && stage_end) {
            stage_start = it;
            stage_converged = false;
            let next = (eps * factor).max(eps_target);
            // keep the dual potentials eps * (f - log a) fixed across the change of eps
            let ratio = eps / next;
            for (gj, lbj) in g.iter_mut().zip(&lb) {
                if gj.is_finite() {
                    *gj = lbj + ratio * (*gj - lbj);
                }
            }
            eps = next;
            if eps == eps_target {
                neg = target_neg;
            } else {
                annealed.iter_mut().zip(cost.entries()).for_each(|(k, c)| *k = -c / eps);
                neg = &annealed;
            }
            for i in 0..n {
                row_lse[i] = log_sum_exp(neg[i * m..(i + 1) * m].iter().zip(&g).map(|(k, gj)| k + gj));
            }
        }
        for i in 0..n {
            f[i] = la[i] - row_lse[i];
        }
        col_max.fill(f64::NEG_INFINITY);
        for i in 0..n {
            if f[i] == f64::NEG_INFINITY {
                continue;
            }
            for (cm, k) in col_max.iter_mut().zip(&neg[i * m..(i + 1) * m]) {
                *cm = cm.max(f[i] + k);
            }
        }
        col_sum.fill(0.0);
        for i in 0..n {
            if f[i] == f64::NEG_INFINITY {
                continue;
            }
            for ((cs, cm), k) in col_sum.iter_mut().zip(&col_max).zip(&neg[i * m..(i + 1) * m]) {
                *cs += (f[i] + k - cm).exp();
            }
        }
        for j in 0..m {
            g[j] = lb[j] - (col_max[j] + col_sum[j].ln());
        }
        let mut err = 0.0;
        for i in 0..n {
            row_lse[i] = log_sum_exp(neg[i * m..(i + 1) * m].iter().zip(&g).map(|(k, gj)| k + gj));
            let r = (f[i] + row_lse[i]).exp();
            err += if f[i] == f64::NEG_INFINITY { a[i] } else { (r - a[i]).abs() };
        }
        history.push(err);
        if cfg.tolerance > 0.0 && err < cfg.tolerance {
            // an annealing stage that meets the tolerance hands over to the next one early
            if eps > eps_target {
                stage_converged = true;
            } else {
                break;
            }
        }
    }
    Scaling { f, g, history, plan: None }
}

fn linear_iterations(
    neg: &[f64],
    n: usize,
    m: usize,
    a: &[f64],
    b: &[f64],
    cfg: &SinkhornConfig,
) -> Option<Scaling> {
    let kernel: Vec<f64> = neg.iter().map(|x| x.exp()).collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv: Vec<f64> = kernel.chunks(m).map(|row| dot(row, &v)).collect();
    let mut ktu = vec![0.0; m];
    let mut history = Vec::new();
    for _ in 0..cfg.max_iterations {
        for i in 0..n {
            u[i] = a[i] / kv[i];
        }
        ktu.fill(0.0);
        for (row, ui) in kernel.chunks(m).zip(&u) {
            ktu.iter_mut().zip(row).for_each(|(acc, k)| *acc += k * ui);
        }
        for j in 0..m {
            v[j] = b[j] / ktu[j];
        }
        let mut err = 0.0;
        for (i, row) in kernel.chunks(m).enumerate() {
            kv[i] = dot(row, &v);
            err += (u[i] * kv[i] - a[i]).abs();
        }
        if !err.is_finite() || u.iter().chain(&v).any(|s| !s.is_finite()) {
            return None;
        }
        history.push(err);
        if cfg.tolerance > 0.0 && err < cfg.tolerance {
            break;
        }
    }
    let plan = kernel
        .chunks(m)
        .zip(&u)
        .flat_map(|(row, ui)| row.iter().zip(&v).map(move |(k, vj)| ui * k * vj))
        .collect();
    Some(Scaling {
        f: u.iter().map(|x| x.ln()).collect(),
        g: v.iter().map(|x| x.ln()).collect(),
        history,
        plan: Some(plan),
    })
}

/// `KL(P | a x b)` from `log P_ij = f_i + g_j - C_ij / eps`, without a log per entry.
fn dual_kl(plan: &TransportPlan, f: &[f64], g: &[f64], neg: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let m = plan.n_cols;
    let mut kl = 0.0;
    for (i, row) in plan.matrix.chunks(m).enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                kl += p * neg[i * m + j];
            }
        }
    }
    for (i, r) in plan.row_sums().iter().enumerate() {
        if *r > 0.0 {
            kl += r * (f[i] - a[i].ln());
        }
    }
    for (j, c) in plan.col_sums().iter().enumerate() {
        if *c > 0.0 {
            kl += c * (g[j] - b[j].ln());
        }
    }
    kl.max(0.0)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Entropic plan between two particle sets under `cost`.
pub fn sinkhorn_plan(
    x: &ParticleSet,
    y: &ParticleSet,
    cost: &CostSpec,
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult> {
    let c = cost_matrix(x, y, cost)?;
    solve(&c, x.weights(), y.weights(), cfg)
}

/// Sharp transport cost of the entropic plan (plus the entropy term when configured).
pub fn entropic_ot_cost(
    x: &ParticleSet,
    y: &ParticleSet,
    cost: &CostSpec,
    cfg: &SinkhornConfig,
) -> Result<f64> {
    Ok(sinkhorn_plan(x, y, cost, cfg)?.value())
}

/// The three entropic problems behind a debiased Sinkhorn divergence.
#[derive(Debug, Clone)]
pub struct DivergenceTerms {
    pub cross: SinkhornResult,
    pub self_x: SinkhornResult,
    pub self_y: SinkhornResult,
}

impl DivergenceTerms {
    /// `2 W(x, y) - W(x, x) - W(y, y)`.
    pub fn value(&self) -> f64 {
        2.0 * self.cross.value() - self.self_x.value() - self.self_y.value()
    }
}

/// Solves the cross and both self problems with the same configuration.
pub fn sinkhorn_divergence_terms(
    x: &ParticleSet,
    y: &ParticleSet,
    cost: &CostSpec,
    cfg: &SinkhornConfig,
) -> Result<DivergenceTerms> {
    let cross = sinkhorn_plan(x, y, cost, cfg).map_err(|e| e.labeled("cross"))?;
    let self_x = sinkhorn_plan(x, x, cost, cfg).map_err(|e| e.labeled("x-self"))?;
    let self_y = if x == y {
        self_x.clone()
    } else {
        sinkhorn_plan(y, y, cost, cfg).map_err(|e| e.labeled("y-self"))?
    };
    Ok(DivergenceTerms {
        cross,
        self_x,
        self_y,
    })
}

/// Debiased Sinkhorn divergence `2 W(x, y) - W(x, x) - W(y, y)`.
pub fn sinkhorn_divergence(
    x: &ParticleSet,
    y: &ParticleSet,
    cost: &CostSpec,
    cfg: &SinkhornConfig,
) -> Result<f64> {
    Ok(sinkhorn_divergence_terms(x, y, cost, cfg)?.value())
}

/// `KL(P | r c^T)` against the plan's target marginals.
///
/// Returns `f64::INFINITY` when the plan puts mass where the product vanishes.
pub fn plan_kl_to_product(plan: &TransportPlan) -> f64 {
    let mut kl = 0.0;
    for (i, r) in plan.row_marginal.iter().enumerate() {
        for (j, c) in plan.col_marginal.iter().enumerate() {
            let p = plan.get(i, j);
            if p > 0.0 {
                let q = r * c;
                if q <= 0.0 {
                    return f64::INFINITY;
                }
                kl += p * (p / q).ln();
            }
        }
    }
    kl.max(0.0)
}

/// Sensitivity `d value / d C_ij` of a solved problem, holding the marginals fixed.
///
/// With the entropy term included the value is the entropic optimum, and the
/// envelope theorem gives `P` itself. The sharp cost `<P, C>` also moves with
/// the plan: differentiating the fixed point `log P_ij = f_i + g_j - C_ij/eps`
/// under the marginal constraints gives
/// `P_ij (1 + (lambda_i + mu_j - C_ij) / eps)`, where `(lambda, mu)` solves the
/// bordered system `[[diag(r), P], [P^T, diag(c)]] (lambda; mu) = (rowsum(P.C); colsum(P.C))`.
pub fn cost_sensitivity(result: &SinkhornResult, cost: &CostMatrix, epsilon: f64) -> Result<Vec<f64>> {
    let plan = &result.plan;
    if result.include_entropy {
        return Ok(plan.matrix.clone());
    }
    let (n, m) = (plan.n_rows, plan.n_cols);
    let r = plan.row_sums();
    let c = plan.col_sums();
    let mut wr = vec![0.0; n];
    let mut wc = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let pc = plan.get(i, j) * cost.get(i, j);
            wr[i] += pc;
            wc[j] += pc;
        }
    }
    let rows: Vec<usize> = (0..n).filter(|&i| r[i] > 0.0).collect();
    let cols: Vec<usize> = (0..m).filter(|&j| c[j] > 0.0).collect();
    let mut mu = vec![0.0; m];
    if cols.len() > 1 {
        // Schur complement on the columns; it is a Laplacian, so pin the last column.
        let k = cols.len() - 1;
        let scaled = DMatrix::<f64>::from_fn(rows.len(), k, |ii, a| {
            plan.get(rows[ii], cols[a]) / r[rows[ii]].sqrt()
        });
        let mut schur = -scaled.tr_mul(&scaled);
        let mut rhs = DVector::<f64>::zeros(k);
        for (a_idx, &ja) in cols[..k].iter().enumerate() {
            schur[(a_idx, a_idx)] += c[ja];
            rhs[a_idx] = wc[ja] - rows.iter().map(|&i| plan.get(i, ja) * wr[i] / r[i]).sum::<f64>();
        }
        let sol = match schur.clone().lu().solve(&rhs) {
            Some(s) if s.iter().all(|x| x.is_finite()) => s,
            _ => schur
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .map_err(|e| Error::SolverFailure {
                    epsilon,
                    cost_scale: cost.max_abs(),
                    detail: format!("sensitivity system is singular: {e}"),
                })?,
        };
        for (a_idx, &ja) in cols[..k].iter().enumerate() {
            mu[ja] = sol[a_idx];
        }
    }
    let mut lambda = vec![0.0; n];
    for &i in &rows {
        let pm: f64 = (0..m).map(|j| plan.get(i, j) * mu[j]).sum();
        lambda[i] = (wr[i] - pm) / r[i];
    }
    let mut sens = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let p = plan.get(i, j);
            sens.push(p * (1.0 + (lambda[i] + mu[j] - cost.get(i, j)) / epsilon));
        }
    }
    Ok(sens)
}

/// Value of the Sinkhorn divergence and its gradient in `x` from one set of solves.
pub fn sinkhorn_value_and_gradient(
    x: &ParticleSet,
    y: &ParticleSet,
    cost: &CostSpec,
    cfg: &SinkhornConfig,
) -> Result<(f64, Vec<f64>)> {
    let cxy = cost_matrix(x, y, cost)?;
    let cxx = cost_matrix(x, x, cost)?;
    let cross = solve(&cxy, x.weights(), y.weights(), cfg).map_err(|e| e.labeled("cross"))?;
    let self_x = solve(&cxx, x.weights(), x.weights(), cfg).map_err(|e| e.labeled("x-self"))?;
    let self_y = if x == y {
        self_x.clone()
    } else {
        sinkhorn_plan(y, y, cost, cfg).map_err(|e| e.labeled("y-self"))?
    };
    let value = 2.0 * cross.value() - self_x.value() - self_y.value();

    let eps = cfg.epsilon;
    let s_xy = cost_sensitivity(&cross, &cxy, eps)?;
    let s_xx = cost_sensitivity(&self_x, &cxx, eps)?;
    let (xv, yv) = (x.values(), y.values());
    let (n, m) = (x.len(), y.len());
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let mut gi = 0.0;
        for j in 0..m {
            gi += 2.0 * s_xy[i * m + j] * cost.d_first(xv[i], yv[j]);
        }
        for j in 0..n {
            // x_i appears in row i and in column i of the self problem
            gi -= s_xx[i * n + j] * cost.d_first(xv[i], xv[j]);
            gi -= s_xx[j * n + i] * cost.d_second(xv[j], xv[i]);
        }
        grad[i] = gi;
    }
    Ok((value, grad))
}

/// Gradient of [`sinkhorn_divergence`] with respect to the values of `x`.
///
/// Exact at a converged fixed point; with few iterations it differentiates the
/// current plan as if it were converged.
pub fn sinkhorn_gradient(
    x: &ParticleSet,
    y: &ParticleSet,
    cost: &CostSpec,
    cfg: &SinkhornConfig,
) -> Result<Vec<f64>> {
    Ok(sinkhorn_value_and_gradient(x, y, cost, cfg)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn u(v: &[f64]) -> ParticleSet {
        ParticleSet::uniform(v.to_vec()).unwrap()
    }

    #[test]
    fn single_atom_plan() {
        let r = sinkhorn_plan(&u(&[0.0]), &u(&[0.0]), &CostSpec::power(2.0), &SinkhornConfig::default()).unwrap();
        assert_eq!(r.primal_cost, 0.0);
        assert!((r.plan.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn small_epsilon_recovers_identity_matching() {
        let x = u(&[0.0, 1.0]);
        let cfg = SinkhornConfig::new(1e-3, 500);
        let r = sinkhorn_plan(&x, &x, &CostSpec::power(2.0), &cfg).unwrap();
        assert!(r.primal_cost.abs() < 1e-3);
        for (i, j, want) in [(0, 0, 0.5), (0, 1, 0.0), (1, 0, 0.0), (1, 1, 0.5)] {
            assert!((r.plan.get(i, j) - want).abs() < 1e-3);
        }
        assert!(r.used_log_domain);
    }

    #[test]
    fn huge_epsilon_gives_product_plan() {
        let x = u(&[0.0, 1.0]);
        let cfg = SinkhornConfig::new(1e6, 100);
        let r = sinkhorn_plan(&x, &x, &CostSpec::power(2.0), &cfg).unwrap();
        assert!(r.plan.matrix().iter().all(|p| (p - 0.25).abs() < 1e-6));
        assert!(plan_kl_to_product(&r.plan) <= 1e-6);
    }

    #[test]
    fn dirac_pairs_are_forced() {
        let (x, y) = (u(&[0.0]), u(&[1.0]));
        for eps in [1e-3, 1.0, 1e4] {
            let cfg = SinkhornConfig::new(eps, 10);
            assert_eq!(entropic_ot_cost(&x, &y, &CostSpec::power(2.0), &cfg).unwrap(), 1.0);
            let d = sinkhorn_divergence(&x, &y, &CostSpec::power(2.0), &cfg).unwrap();
            assert!((d - 2.0).abs() < 1e-12);
        }
        assert_eq!(entropic_ot_cost(&x, &x, &CostSpec::power(2.0), &SinkhornConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn divergence_vanishes_on_identical_sets() {
        let x = u(&[0.2, -0.7, 1.3]);
        let d = sinkhorn_divergence(&x, &x, &CostSpec::power(2.0), &SinkhornConfig::default()).unwrap();
        assert!(d.abs() < 1e-9);
    }

    #[test]
    fn small_epsilon_approaches_twice_w1() {
        let x = u(&[0.0, 1.0]);
        let y = u(&[2.0, 3.0]);
        let cfg = SinkhornConfig::new(1e-3, 1000);
        let d = sinkhorn_divergence(&x, &y, &CostSpec::power(1.0), &cfg).unwrap();
        assert!((d - 4.0).abs() < 1e-2, "{d}");
    }

    #[test]
    fn kl_examples() {
        let half = TransportPlan::new(2, 2, vec![0.5, 0.0, 0.0, 0.5], vec![0.5; 2], vec![0.5; 2]).unwrap();
        assert!((plan_kl_to_product(&half) - std::f64::consts::LN_2).abs() < 1e-15);
        let prod = TransportPlan::product(&[0.3, 0.7], &[0.5, 0.25, 0.25]);
        assert!(plan_kl_to_product(&prod).abs() < 1e-15);
        let bad = TransportPlan::new(1, 2, vec![0.5, 0.5], vec![1.0], vec![1.0, 0.0]).unwrap();
        assert_eq!(plan_kl_to_product(&bad), f64::INFINITY);
    }

    #[test]
    fn linear_and_log_domains_agree() {
        let x = u(&[0.0, 0.4, 1.1]);
        let y = u(&[-0.3, 0.9]);
        let base = SinkhornConfig::new(0.5, 200);
        let lin = sinkhorn_plan(&x, &y, &CostSpec::power(2.0), &base.clone().with_log_domain(false)).unwrap();
        let log = sinkhorn_plan(&x, &y, &CostSpec::power(2.0), &base).unwrap();
        assert!(!lin.used_log_domain);
        assert!((lin.primal_cost - log.primal_cost).abs() < 1e-12);
    }

    #[test]
    fn linear_domain_falls_back_on_underflow() {
        let x = u(&[0.0, 100.0]);
        let y = u(&[1.0, 99.0]);
        let cfg = SinkhornConfig::new(10.0, 50).with_log_domain(false);
        let r = sinkhorn_plan(&x, &y, &CostSpec::power(2.0), &cfg).unwrap();
        assert!(r.used_log_domain);
        assert!(r.converged);
    }

    #[test]
    fn tolerance_stops_early() {
        let x = u(&[0.0, 0.5, 1.0]);
        let y = u(&[0.1, 0.2]);
        let cfg = SinkhornConfig::new(0.1, 10_000).with_tolerance(1e-10);
        let r = sinkhorn_plan(&x, &y, &CostSpec::power(2.0), &cfg).unwrap();
        assert!(r.iterations_run < 10_000);
        assert!(r.converged && r.marginal_error < 1e-10);
        let exact = sinkhorn_plan(&x, &y, &CostSpec::power(2.0), &SinkhornConfig::new(0.1, 7)).unwrap();
        assert_eq!(exact.iterations_run, 7);
    }

    #[test]
    fn entropy_flag_adds_regularizer() {
        let x = u(&[0.0, 0.5]);
        let y = u(&[0.2, 0.9]);
        let cfg = SinkhornConfig::new(0.3, 100);
        let sharp = sinkhorn_plan(&x, &y, &CostSpec::power(2.0), &cfg).unwrap();
        let full = sinkhorn_plan(&x, &y, &CostSpec::power(2.0), &cfg.with_entropy(true)).unwrap();
        assert_eq!(sharp.value(), sharp.primal_cost);
        assert!((full.value() - sharp.primal_cost - 0.3 * plan_kl_to_product(&sharp.plan)).abs() < 1e-12);
    }

    #[test]
    fn invalid_config_rejected() {
        let x = u(&[0.0]);
        assert!(sinkhorn_plan(&x, &x, &CostSpec::power(2.0), &SinkhornConfig::new(0.0, 10)).is_err());
        assert!(sinkhorn_plan(&x, &x, &CostSpec::power(2.0), &SinkhornConfig::new(1.0, 0)).is_err());
    }

    #[test]
    fn dirac_gradient_closed_form() {
        let g = sinkhorn_gradient(&u(&[0.0]), &u(&[1.0]), &CostSpec::power(2.0), &SinkhornConfig::default()).unwrap();
        assert!((g[0] + 4.0).abs() < 1e-12, "{g:?}");
    }

    #[test]
    fn epsilon_scaling_converges_where_plain_iteration_stalls() {
        let x = u(&[0.0, 0.3, 1.7, 2.4]);
        let y = u(&[0.9, 1.1, 2.0]);
        let cfg = SinkhornConfig::new(1e-3, 2000);
        let scaled = sinkhorn_plan(&x, &y, &CostSpec::power(1.0), &cfg.clone().with_epsilon_scaling(0.5)).unwrap();
        assert!(scaled.used_log_domain);
        assert!(scaled.marginal_error < 1e-6, "{}", scaled.marginal_error);
        let w = crate::divergence::wasserstein_1d(&x, &y, 1.0).unwrap();
        assert!((scaled.primal_cost - w).abs() < 1e-2, "{} vs {w}", scaled.primal_cost);
        assert!(SinkhornConfig::new(1.0, 10).with_epsilon_scaling(1.5).validate().is_err());
    }

    #[test]
    fn epsilon_scaling_with_tolerance_finishes_at_the_target() {
        let x = u(&[-1.16, -0.96, 1.42]);
        let y = u(&[-0.42, 0.9, -1.54, -0.5]);
        let cfg = SinkhornConfig::new(1.0, 20_000).with_tolerance(1e-12).with_epsilon_scaling(0.5);
        let r = sinkhorn_plan(&x, &y, &CostSpec::power(2.0), &cfg).unwrap();
        assert!(r.marginal_error < 1e-12, "{}", r.marginal_error);
        let plain = sinkhorn_plan(&x, &y, &CostSpec::power(2.0), &SinkhornConfig::new(1.0, 20_000).with_tolerance(1e-12)).unwrap();
        assert!((r.primal_cost - plain.primal_cost).abs() < 1e-9);
    }

    #[test]
    fn gradient_vanishes_at_target() {
        let x = u(&[0.1, 0.5, -0.4]);
        let g = sinkhorn_gradient(&x, &x, &CostSpec::power(2.0), &SinkhornConfig::new(1.0, 500)).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-6), "{g:?}");
    }
}
