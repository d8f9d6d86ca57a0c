//! Shared helpers for the integration tests: a dense LP solver and random instances.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::Rng as _;
use sdrl_core::envs::Rng;
use sdrl_core::ParticleSet;

const PIVOT_TOL: f64 = 1e-12;

fn pivot(t: &mut [Vec<f64>], row: usize, col: usize) {
    let p = t[row][col];
    for v in t[row].iter_mut() {
        *v /= p;
    }
    let pivot_row = t[row].clone();
    for (i, r) in t.iter_mut().enumerate() {
        if i != row && r[col] != 0.0 {
            let f = r[col];
            for (v, pv) in r.iter_mut().zip(&pivot_row) {
                *v -= f * pv;
            }
        }
    }
}

/// Bland's-rule simplex over the columns `0..n_enter`. Returns `None` when unbounded.
fn run_simplex(t: &mut [Vec<f64>], basis: &mut [usize], cost: &[f64], n_enter: usize) -> Option<()> {
    let rhs = t[0].len() - 1;
    loop {
        let reduced = |j: usize, t: &[Vec<f64>]| -> f64 {
            cost[j] - basis.iter().enumerate().map(|(i, &b)| cost[b] * t[i][j]).sum::<f64>()
        };
        let Some(col) = (0..n_enter).find(|&j| !basis.contains(&j) && reduced(j, t) < -PIVOT_TOL) else {
            return Some(());
        };
        let mut best: Option<(f64, usize)> = None;
        for i in 0..t.len() {
            if t[i][col] > PIVOT_TOL {
                let ratio = t[i][rhs] / t[i][col];
                best = match best {
                    Some((r, bi)) if ratio > r + 1e-15 || (ratio >= r - 1e-15 && basis[bi] < basis[i]) => Some((r, bi)),
                    _ => Some((ratio, i)),
                };
            }
        }
        let (_, row) = best?;
        pivot(t, row, col);
        basis[row] = col;
    }
}

/// `min c.x` subject to `A x = b`, `x >= 0`, by the two-phase tableau method.
pub fn lp_min(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Option<f64> {
    let (m, n) = (a.len(), c.len());
    let width = n + m + 1;
    let mut t = vec![vec![0.0; width]; m];
    for i in 0..m {
        let s = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[i][j] = s * a[i][j];
        }
        t[i][n + i] = 1.0;
        t[i][width - 1] = s * b[i];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    let mut phase1 = vec![0.0; n + m];
    phase1[n..].iter_mut().for_each(|v| *v = 1.0);
    run_simplex(&mut t, &mut basis, &phase1, n + m)?;
    let infeasibility: f64 = (0..m).filter(|&i| basis[i] >= n).map(|i| t[i][width - 1]).sum();
    if infeasibility > 1e-9 {
        return None;
    }
    for i in 0..m {
        if basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| t[i][j].abs() > PIVOT_TOL) {
                pivot(&mut t, i, j);
                basis[i] = j;
            }
        }
    }
    let mut phase2 = c.to_vec();
    phase2.extend(std::iter::repeat_n(0.0, m));
    run_simplex(&mut t, &mut basis, &phase2, n)?;
    Some((0..m).map(|i| phase2[basis[i]] * t[i][width - 1]).sum())
}

/// Optimal transport cost `min <P, C>` over couplings of `x` and `y`, solved as an LP.
pub fn transport_lp(x: &ParticleSet, y: &ParticleSet, cost: impl Fn(f64, f64) -> f64) -> f64 {
    let (n, m) = (x.len(), y.len());
    let mut c = Vec::with_capacity(n * m);
    for &xi in x.values() {
        for &yj in y.values() {
            c.push(cost(xi, yj));
        }
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..n {
        let mut row = vec![0.0; n * m];
        row[i * m..(i + 1) * m].iter_mut().for_each(|v| *v = 1.0);
        a.push(row);
        b.push(x.weights()[i]);
    }
    // the last column constraint is implied by the others
    for j in 0..m.saturating_sub(1) {
        let mut row = vec![0.0; n * m];
        for i in 0..n {
            row[i * m + j] = 1.0;
        }
        a.push(row);
        b.push(y.weights()[j]);
    }
    lp_min(&c, &a, &b).expect("transport LP is feasible and bounded")
}

/// Weighted set of `1..=max_atoms` atoms with values in `[lo, hi]`.
pub fn random_weighted(r: &mut Rng, max_atoms: usize, lo: f64, hi: f64) -> ParticleSet {
    let k = r.random_range(1..=max_atoms);
    let values = (0..k).map(|_| r.random_range(lo..hi)).collect();
    let weights = (0..k).map(|_| r.random::<f64>() + 0.05).collect();
    ParticleSet::normalized(values, weights).unwrap()
}

/// Uniform set of `1..=max_atoms` atoms with values in `[lo, hi]`.
pub fn random_uniform(r: &mut Rng, max_atoms: usize, lo: f64, hi: f64) -> ParticleSet {
    let k = r.random_range(1..=max_atoms);
    ParticleSet::uniform((0..k).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

/// Runs the CLI in-process with `--out out`.
pub fn sdrl(out: &Path, args: &[&str]) -> sdrl_cli::Result<()> {
    use clap::Parser;
    let mut argv = vec!["sdrl", "--out", out.to_str().unwrap()];
    argv.extend_from_slice(args);
    sdrl_cli::run(sdrl_cli::Cli::try_parse_from(argv).expect("valid arguments"))
}

/// Final value of column `col` in a CSV file.
pub fn last_csv_value(path: &Path, col: &str) -> Option<f64> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    let idx = lines.next()?.split(',').position(|h| h == col)?;
    lines.last()?.split(',').nth(idx)?.parse().ok()
}

#[test]
fn lp_solver_matches_hand_examples() {
    // min x0 + 2 x1, x0 + x1 = 1
    assert!((lp_min(&[1.0, 2.0], &[vec![1.0, 1.0]], &[1.0]).unwrap() - 1.0).abs() < 1e-12);
    let x = ParticleSet::uniform(vec![0.0, 1.0]).unwrap();
    let y = ParticleSet::uniform(vec![0.5, 3.0]).unwrap();
    // sorted matching: 0 -> 0.5, 1 -> 3
    let w = transport_lp(&x, &y, |a, b| (a - b).abs());
    assert!((w - 0.5 * (0.5 + 2.0)).abs() < 1e-12, "{w}");
}
