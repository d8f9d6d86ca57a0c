//! Closed-form and kernel divergences between weighted particle sets.
//!
//! All kernel quantities use V-statistics: expectations over independent
//! copies of the empirical measures, including the `i == j` pairs. This
//! carries an `O(1/N)` bias relative to the U-statistic but is exactly the
//! plug-in value for Dirac mixtures.
//!
//! Costs and kernels share one description, [`CostSpec`], with the sign
//! convention `k = -c`. The unrectified kernel `k_alpha(x, y) = -|x - y|^alpha`
//! is thus the cost `|x - y|^alpha`, and the Gaussian mixture kernel is the
//! cost `-(1/|H|) sum_h exp(-(x - y)^2 / h)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::particles::ParticleSet;

/// Largest moment order accepted by [`scaled_moment`].
pub const MAX_MOMENT_ORDER: usize = 64;

/// Ground cost `c(x, y)` between scalar returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostSpec {
    /// `c(x, y) = |x - y|^alpha`, the negated unrectified kernel.
    UnrectifiedPower { alpha: f64 },
    /// `c(x, y) = -(1/|H|) sum_h exp(-(x - y)^2 / h)`: arithmetic mean over bandwidths.
    NegGaussianMixture { bandwidths: Vec<f64> },
}

impl CostSpec {
    pub fn power(alpha: f64) -> Self {
        CostSpec::UnrectifiedPower { alpha }
    }

    pub fn gaussian(bandwidths: Vec<f64>) -> Self {
        CostSpec::NegGaussianMixture { bandwidths }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CostSpec::UnrectifiedPower { alpha } => {
                if !(alpha.is_finite() && *alpha > 0.0) {
                    return Err(Error::param("alpha", format!("must be positive, got {alpha}")));
                }
            }
            CostSpec::NegGaussianMixture { bandwidths } => {
                if bandwidths.is_empty() {
                    return Err(Error::param("bandwidths", "must be nonempty"));
                }
                if let Some(h) = bandwidths.iter().find(|h| !(h.is_finite() && **h > 0.0)) {
                    return Err(Error::param("bandwidths", format!("must be positive, got {h}")));
                }
            }
        }
        Ok(())
    }

    /// Evaluates `c(x, y)`.
    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            CostSpec::UnrectifiedPower { alpha } => {
                let d = (x - y).abs();
                if *alpha == 1.0 {
                    d
                } else if *alpha == 2.0 {
                    d * d
                } else {
                    d.powf(*alpha)
                }
            }
            CostSpec::NegGaussianMixture { bandwidths } => {
                let d2 = (x - y) * (x - y);
                let s: f64 = bandwidths.iter().map(|h| (-d2 / h).exp()).sum();
                -s / bandwidths.len() as f64
            }
        }
    }

    /// The associated kernel `k(x, y) = -c(x, y)`.
    #[inline]
    pub fn kernel(&self, x: f64, y: f64) -> f64 {
        -self.eval(x, y)
    }

    /// Partial derivative of `c(x, y)` in `x`. At `x == y` this returns 0,
    /// which is the derivative for `alpha > 1` and a subgradient otherwise.
    #[inline]
    pub fn d_first(&self, x: f64, y: f64) -> f64 {
        let d = x - y;
        if d == 0.0 {
            return 0.0;
        }
        match self {
            CostSpec::UnrectifiedPower { alpha } => {
                if *alpha == 1.0 {
                    d.signum()
                } else if *alpha == 2.0 {
                    2.0 * d
                } else {
                    alpha * d.abs().powf(alpha - 1.0) * d.signum()
                }
            }
            CostSpec::NegGaussianMixture { bandwidths } => {
                let d2 = d * d;
                let s: f64 = bandwidths.iter().map(|h| 2.0 * d / h * (-d2 / h).exp()).sum();
                s / bandwidths.len() as f64
            }
        }
    }

    /// Partial derivative of `c(x, y)` in `y`.
    #[inline]
    pub fn d_second(&self, x: f64, y: f64) -> f64 {
        -self.d_first(x, y)
    }
}

/// Dense row-major `n_rows x n_cols` cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
}

impl CostMatrix {
    /// Builds a matrix from row-major entries; all entries must be finite.
    pub fn from_entries(n_rows: usize, n_cols: usize, entries: Vec<f64>) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 || entries.len() != n_rows * n_cols {
            return Err(Error::InvalidInput(format!(
                "cost matrix shape {n_rows}x{n_cols} does not match {} entries",
                entries.len()
            )));
        }
        if let Some(k) = entries.iter().position(|c| !c.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "cost entry ({}, {}) is not finite",
                k / n_cols,
                k % n_cols
            )));
        }
        Ok(CostMatrix {
            entries,
            n_rows,
            n_cols,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n_cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Largest absolute entry, used to report the cost scale.
    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, c| m.max(c.abs()))
    }
}

/// `entries[i][j] = c(x_i, y_j)`.
pub fn cost_matrix(x: &ParticleSet, y: &ParticleSet, cost: &CostSpec) -> Result<CostMatrix> {
    cost.validate()?;
    let mut entries = Vec::with_capacity(x.len() * y.len());
    for (i, &xi) in x.values().iter().enumerate() {
        for (j, &yj) in y.values().iter().enumerate() {
            let c = cost.eval(xi, yj);
            if !c.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "cost c(x[{i}] = {xi}, y[{j}] = {yj}) is not finite"
                )));
            }
            entries.push(c);
        }
    }
    CostMatrix::from_entries(x.len(), y.len(), entries)
}

fn check_order(p: f64) -> Result<()> {
    if p.is_finite() && p >= 1.0 {
        Ok(())
    } else {
        Err(Error::param("p", format!("must be >= 1, got {p}")))
    }
}

/// 1D Wasserstein-`p` distance through quantile functions.
///
/// The quantile functions of both sets are piecewise constant, so the integral
/// `int_0^1 |F_x^{-1}(w) - F_y^{-1}(w)|^p dw` is a finite sum over the merged
/// breakpoints of the two cumulative weight sequences.
pub fn wasserstein_1d(x: &ParticleSet, y: &ParticleSet, p: f64) -> Result<f64> {
    check_order(p)?;
    let xi = x.sorted_indices();
    let yi = y.sorted_indices();
    let (xv, xw) = (x.values(), x.weights());
    let (yv, yw) = (y.values(), y.weights());
    let (mut i, mut j) = (0, 0);
    let (mut rx, mut ry) = (xw[xi[0]], yw[yi[0]]);
    let mut total = 0.0;
    loop {
        let gap = (xv[xi[i]] - yv[yi[j]]).abs();
        let step = if p == 1.0 { gap } else { gap.powf(p) };
        let advance_x;
        let advance_y;
        if rx < ry {
            total += rx * step;
            ry -= rx;
            advance_x = true;
            advance_y = false;
        } else if ry < rx {
            total += ry * step;
            rx -= ry;
            advance_x = false;
            advance_y = true;
        } else {
            total += rx * step;
            advance_x = true;
            advance_y = true;
        }
        if advance_x {
            i += 1;
            if i == xi.len() {
                break;
            }
            rx = xw[xi[i]];
        }
        if advance_y {
            j += 1;
            if j == yi.len() {
                break;
            }
            ry = yw[yi[j]];
        }
    }
    Ok(if p == 1.0 { total } else { total.powf(1.0 / p) })
}

/// `l_p` distance between CDFs: `(int |F_x(w) - F_y(w)|^p dw)^(1/p)`.
pub fn lp_distance(x: &ParticleSet, y: &ParticleSet, p: f64) -> Result<f64> {
    check_order(p)?;
    let mut events: Vec<(f64, f64)> = x
        .iter()
        .map(|(v, w)| (v, w))
        .chain(y.iter().map(|(v, w)| (v, -w)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut diff = 0.0;
    let mut total = 0.0;
    for pair in events.windows(2) {
        diff += pair[0].1;
        let width = pair[1].0 - pair[0].0;
        if width > 0.0 {
            let d = diff.abs();
            total += width * if p == 1.0 { d } else { d.powf(p) };
        }
    }
    Ok(if p == 1.0 { total } else { total.powf(1.0 / p) })
}

/// `E[k(X, Y)]` over the product of two particle sets.
fn expected_kernel(x: &ParticleSet, y: &ParticleSet, cost: &CostSpec) -> f64 {
    x.iter()
        .map(|(xv, xw)| xw * y.iter().map(|(yv, yw)| yw * cost.kernel(xv, yv)).sum::<f64>())
        .sum()
}

/// Squared MMD with kernel `k = -c`, as an exact V-statistic.
pub fn mmd_squared(x: &ParticleSet, y: &ParticleSet, kernel: &CostSpec) -> Result<f64> {
    kernel.validate()?;
    let kxx = expected_kernel(x, x, kernel);
    let kyy = expected_kernel(y, y, kernel);
    let kxy = expected_kernel(x, y, kernel);
    Ok(kxx + kyy - 2.0 * kxy)
}

fn expected_abs_diff(x: &ParticleSet, y: &ParticleSet) -> f64 {
    x.iter()
        .map(|(xv, xw)| xw * y.iter().map(|(yv, yw)| yw * (xv - yv).abs()).sum::<f64>())
        .sum()
}

/// Energy distance `2E|X - Y| - E|X - X'| - E|Y - Y'|`.
pub fn energy_distance(x: &ParticleSet, y: &ParticleSet) -> f64 {
    let exy = expected_abs_diff(x, y);
    let exx = expected_abs_diff(x, x);
    let eyy = expected_abs_diff(y, y);
    2.0 * exy - exx - eyy
}

/// Cramér distance `E|X - Y| - E|X - X'|/2 - E|Y - Y'|/2`, half the energy distance.
pub fn cramer_distance(x: &ParticleSet, y: &ParticleSet) -> f64 {
    let exy = expected_abs_diff(x, y);
    let exx = expected_abs_diff(x, x);
    let eyy = expected_abs_diff(y, y);
    exy - 0.5 * exx - 0.5 * eyy
}

/// Gradient of [`mmd_squared`] with respect to each value of `x`; `y` is held fixed.
pub fn mmd_gradient(x: &ParticleSet, y: &ParticleSet, kernel: &CostSpec) -> Result<Vec<f64>> {
    kernel.validate()?;
    // dk/dx = -dc/dx
    Ok(x
        .iter()
        .map(|(xi, ai)| {
            let self_term: f64 = x.iter().map(|(xj, aj)| aj * kernel.d_first(xi, xj)).sum();
            let cross_term: f64 = y.iter().map(|(yj, bj)| bj * kernel.d_first(xi, yj)).sum();
            2.0 * ai * (cross_term - self_term)
        })
        .collect())
}

/// Gradient of [`energy_distance`] in `x`; equal to the MMD gradient with `k_1`.
pub fn energy_gradient(x: &ParticleSet, y: &ParticleSet) -> Vec<f64> {
    x.iter()
        .map(|(xi, ai)| {
            let cross: f64 = y.iter().map(|(yj, bj)| bj * sign(xi - yj)).sum();
            let own: f64 = x.iter().map(|(xj, aj)| aj * sign(xi - xj)).sum();
            2.0 * ai * (cross - own)
        })
        .collect()
}

#[inline]
fn sign(d: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        d.signum()
    }
}

/// Gaussian-damped moment `E[exp(-X^2 / (2 sigma^2)) X^n]`.
pub fn scaled_moment(x: &ParticleSet, n: usize, sigma: f64) -> Result<f64> {
    if n > MAX_MOMENT_ORDER {
        return Err(Error::param(
            "n",
            format!("moment order {n} exceeds the maximum of {MAX_MOMENT_ORDER}"),
        ));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::param("sigma", format!("must be positive, got {sigma}")));
    }
    let s2 = 2.0 * sigma * sigma;
    let m: f64 = x
        .iter()
        .map(|(v, w)| w * (-v * v / s2).exp() * v.powi(n as i32))
        .sum();
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::Overflow(format!(
            "moment of order {n} is not finite; rescale the particle values"
        )))
    }
}

/// Upper bound on the terms of order above `n_max` in [`moment_series_terms`].
///
/// With `r = max|v|^2 / sigma^2` over both supports, order `n` contributes at
/// most `4 r^n / n!`, so the tail is bounded by the exponential-series tail
/// `4 r^(n_max+1) / (n_max+1)! / (1 - r/(n_max+2))`. Returns infinity when the
/// ratio test does not yet apply.
pub fn moment_series_tail_bound(ratio: f64, n_max: usize) -> f64 {
    let next = (n_max + 2) as f64;
    if ratio >= next {
        return f64::INFINITY;
    }
    let mut term = 4.0;
    for k in 1..=n_max + 1 {
        term *= ratio / k as f64;
    }
    term / (1.0 - ratio / next)
}

/// Per-order contributions `(M_n(x) - M_n(y))^2 / (sigma^(2n) n!)` for `n = 0..=n_max`.
///
/// Their sum is the squared MMD under the Gaussian kernel
/// `exp(-(x - y)^2 / (2 sigma^2))`, i.e. bandwidth `h = 2 sigma^2`.
pub fn moment_series_terms(
    x: &ParticleSet,
    y: &ParticleSet,
    sigma: f64,
    n_max: usize,
) -> Result<Vec<f64>> {
    if n_max == 0 || n_max > MAX_MOMENT_ORDER {
        return Err(Error::param(
            "n_max",
            format!("must be in 1..={MAX_MOMENT_ORDER}, got {n_max}"),
        ));
    }
    let m = x.max_abs().max(y.max_abs());
    let ratio = m * m / (sigma * sigma);
    if (n_max as f64) + 2.0 <= ratio {
        return Err(Error::SeriesDivergence(format!(
            "terms still grow at order {n_max} (max|v|^2/sigma^2 = {ratio:.3}); \
             increase n_max or sigma"
        )));
    }
    let mut coef = 1.0;
    let mut terms = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        if n > 0 {
            coef /= sigma * sigma * n as f64;
        }
        let d = scaled_moment(x, n, sigma)? - scaled_moment(y, n, sigma)?;
        terms.push(coef * d * d);
    }
    Ok(terms)
}

/// Truncated moment series for the Gaussian-kernel squared MMD (bandwidth `2 sigma^2`).
///
/// Truncation error is at most [`moment_series_tail_bound`]; an error is
/// returned while the series terms are still growing at `n_max`.
pub fn mmd_via_moments(x: &ParticleSet, y: &ParticleSet, sigma: f64, n_max: usize) -> Result<f64> {
    Ok(moment_series_terms(x, y, sigma, n_max)?.iter().sum())
}
