//! Particle return distributions over a tabular MDP.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{argmax_lowest, rng, Policy, QTable, TabularMdp};
use crate::error::{Error, Result};
use crate::particles::ParticleSet;

/// Default cap on the atoms of one exact pushforward entry.
pub const DEFAULT_SUPPORT_CAP: usize = 1_000_000;

/// One particle set per `(state, action)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnTable {
    n_states: usize,
    n_actions: usize,
    entries: Vec<ParticleSet>,
}

impl ReturnTable {
    pub fn new(n_states: usize, n_actions: usize, entries: Vec<ParticleSet>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || entries.len() != n_states * n_actions {
            return Err(Error::InvalidInput(format!(
                "return table needs {} entries, got {}",
                n_states * n_actions,
                entries.len()
            )));
        }
        Ok(ReturnTable {
            n_states,
            n_actions,
            entries,
        })
    }

    /// Every entry set to `init`.
    pub fn constant(n_states: usize, n_actions: usize, init: &ParticleSet) -> Self {
        ReturnTable {
            n_states,
            n_actions,
            entries: vec![init.clone(); n_states * n_actions],
        }
    }

    pub fn for_mdp(mdp: &TabularMdp, init: &ParticleSet) -> Self {
        Self::constant(mdp.n_states(), mdp.n_actions(), init)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> &ParticleSet {
        &self.entries[s * self.n_actions + a]
    }

    pub fn get_mut(&mut self, s: usize, a: usize) -> &mut ParticleSet {
        &mut self.entries[s * self.n_actions + a]
    }

    pub fn entries(&self) -> &[ParticleSet] {
        &self.entries
    }

    /// Shared particle count when every entry has uniform weights and the same size.
    pub fn n_particles(&self) -> Option<usize> {
        let n = self.entries[0].len();
        self.entries
            .iter()
            .all(|p| p.len() == n && p.is_uniform())
            .then_some(n)
    }

    pub fn is_trainable(&self) -> bool {
        self.n_particles().is_some()
    }

    /// Particle means as an action-value table.
    pub fn means(&self) -> QTable {
        QTable {
            n_actions: self.n_actions,
            values: self.entries.iter().map(particle_mean).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, p| m.max(p.max_abs()))
    }

    pub fn check_against(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(Error::InvalidInput(format!(
                "return table is {}x{} but the MDP is {}x{}",
                self.n_states,
                self.n_actions,
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }

    /// JSON: `{"gamma_note": ..., "entries": [{"s", "a", "values", "weights"}]}`.
    pub fn to_json(&self, gamma_note: &str) -> Result<String> {
        let doc = TableDoc {
            gamma_note: gamma_note.to_string(),
            entries: (0..self.n_states)
                .flat_map(|s| (0..self.n_actions).map(move |a| (s, a)))
                .map(|(s, a)| EntryDoc {
                    s,
                    a,
                    values: self.get(s, a).values().to_vec(),
                    weights: self.get(s, a).weights().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parses the JSON shape written by [`ReturnTable::to_json`]; entry order is free.
    pub fn from_json(text: &str) -> Result<(Self, String)> {
        let doc: TableDoc = serde_json::from_str(text)?;
        let n_states = doc.entries.iter().map(|e| e.s + 1).max().unwrap_or(0);
        let n_actions = doc.entries.iter().map(|e| e.a + 1).max().unwrap_or(0);
        let mut slots: Vec<Option<ParticleSet>> = vec![None; n_states * n_actions];
        for e in doc.entries {
            let slot = &mut slots[e.s * n_actions + e.a];
            if slot.is_some() {
                return Err(Error::InvalidInput(format!("duplicate entry ({}, {})", e.s, e.a)));
            }
            *slot = Some(ParticleSet::weighted(e.values, e.weights)?);
        }
        let entries = slots
            .into_iter()
            .enumerate()
            .map(|(k, p)| {
                p.ok_or_else(|| {
                    Error::InvalidInput(format!("missing entry ({}, {})", k / n_actions, k % n_actions))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((ReturnTable::new(n_states, n_actions, entries)?, doc.gamma_note))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableDoc {
    gamma_note: String,
    entries: Vec<EntryDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryDoc {
    s: usize,
    a: usize,
    values: Vec<f64>,
    weights: Vec<f64>,
}

pub fn particle_mean(x: &ParticleSet) -> f64 {
    x.mean()
}

/// Action with the largest particle mean; ties go to the lowest index.
pub fn greedy_action(table: &ReturnTable, state: usize) -> usize {
    let means: Vec<f64> = (0..table.n_actions())
        .map(|a| particle_mean(table.get(state, a)))
        .collect();
    argmax_lowest(&means)
}

/// Sample target `r + gamma z_i`, or `delta_r` for a terminal successor.
pub fn bellman_target(next: &ParticleSet, reward: f64, gamma: f64, terminal: bool) -> Result<ParticleSet> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::param("gamma", format!("must lie in (0, 1), got {gamma}")));
    }
    if terminal {
        next.affine(reward, 0.0)
    } else {
        next.affine(reward, gamma)
    }
}

/// Sorts atoms and merges equal values.
fn merge_atoms(mut atoms: Vec<(f64, f64)>) -> (Vec<f64>, Vec<f64>) {
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut values: Vec<f64> = Vec::with_capacity(atoms.len());
    let mut weights: Vec<f64> = Vec::with_capacity(atoms.len());
    for (v, w) in atoms {
        if w == 0.0 {
            continue;
        }
        match values.last() {
            Some(last) if *last == v => *weights.last_mut().unwrap() += w,
            _ => {
                values.push(v);
                weights.push(w);
            }
        }
    }
    (values, weights)
}

/// Exact distributional Bellman operator `T^pi` on a table of finite mixtures.
///
/// Entry `(s, a)` becomes the mixture over `(s', a')` with weight
/// `P(s' | s, a) pi(a' | s')` of `R(s, a) + gamma Z(s', a')`. Equal atoms are
/// merged, so the support is at most `|supp P| * |A| * N` atoms.
pub fn exact_bellman_pushforward(
    table: &ReturnTable,
    mdp: &TabularMdp,
    policy: &Policy,
    support_cap: usize,
) -> Result<ReturnTable> {
    table.check_against(mdp)?;
    policy.check_against(mdp)?;
    let gamma = mdp.gamma();
    let mut entries = Vec::with_capacity(table.entries().len());
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let r = mdp.reward(s, a);
            let mut atoms = Vec::new();
            for (s2, &p) in mdp.next_distribution(s, a).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (a2, &pi) in policy.probs(s2).iter().enumerate() {
                    if pi == 0.0 {
                        continue;
                    }
                    let z = table.get(s2, a2);
                    atoms.extend(z.iter().map(|(v, w)| (r + gamma * v, p * pi * w)));
                }
            }
            let (values, weights) = merge_atoms(atoms);
            if values.len() > support_cap {
                return Err(Error::SupportCap {
                    atoms: values.len(),
                    cap: support_cap,
                });
            }
            entries.push(ParticleSet::normalized(values, weights)?);
        }
    }
    ReturnTable::new(mdp.n_states(), mdp.n_actions(), entries)
}

/// How [`subsample_particles`] places its atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubsampleMode {
    /// Quantiles at the midpoints `(2i - 1) / (2n)`; deterministic.
    QuantileMidpoints,
    /// Inverse-CDF draws at i.i.d. uniform levels.
    MonteCarlo { seed: u64 },
}

fn quantile(sorted: &[(f64, f64)], level: f64) -> f64 {
    let mut acc = 0.0;
    for &(v, w) in sorted {
        acc += w;
        if acc >= level {
            return v;
        }
    }
    sorted.iter().rev().find(|(_, w)| *w > 0.0).map_or(sorted[sorted.len() - 1].0, |p| p.0)
}

/// Reduces a mixture to `n` equally weighted atoms.
pub fn subsample_particles(x: &ParticleSet, n: usize, mode: SubsampleMode) -> Result<ParticleSet> {
    if n == 0 {
        return Err(Error::param("n", "must be at least 1"));
    }
    let mut sorted: Vec<(f64, f64)> = x.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let values = match mode {
        SubsampleMode::QuantileMidpoints => (1..=n)
            .map(|i| quantile(&sorted, (2 * i - 1) as f64 / (2 * n) as f64))
            .collect(),
        SubsampleMode::MonteCarlo { seed } => {
            let mut r = rng(seed);
            let mut levels: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
            levels.sort_by(f64::total_cmp);
            levels.iter().map(|&q| quantile(&sorted, q)).collect()
        }
    };
    ParticleSet::uniform(values)
}

/// Iterates the exact operator from `init`, reducing every entry to `atoms`
/// quantile-midpoint particles after each step, until the sup-W1 change falls below `tol`.
pub fn iterate_pushforward(
    init: &ReturnTable,
    mdp: &TabularMdp,
    policy: &Policy,
    atoms: usize,
    tol: f64,
    max_iterations: usize,
) -> Result<ReturnTable> {
    let mut z = init.clone();
    for _ in 0..max_iterations {
        let pushed = exact_bellman_pushforward(&z, mdp, policy, DEFAULT_SUPPORT_CAP)?;
        let reduced = ReturnTable::new(
            mdp.n_states(),
            mdp.n_actions(),
            pushed
                .entries()
                .iter()
                .map(|p| {
                    if p.len() <= atoms {
                        Ok(p.clone())
                    } else {
                        subsample_particles(p, atoms, SubsampleMode::QuantileMidpoints)
                    }
                })
                .collect::<Result<Vec<_>>>()?,
        )?;
        let change = sup_distance(&z, &reduced, |a, b| crate::divergence::wasserstein_1d(a, b, 1.0))?;
        z = reduced;
        if change <= tol {
            break;
        }
    }
    Ok(z)
}

/// `sup_{s,a} d(Z1(s,a), Z2(s,a))`.
pub fn sup_distance(
    z1: &ReturnTable,
    z2: &ReturnTable,
    d: impl Fn(&ParticleSet, &ParticleSet) -> Result<f64>,
) -> Result<f64> {
    if z1.n_states != z2.n_states || z1.n_actions != z2.n_actions {
        return Err(Error::InvalidInput("return tables differ in shape".into()));
    }
    z1.entries
        .iter()
        .zip(&z2.entries)
        .try_fold(0.0f64, |m, (a, b)| Ok(m.max(d(a, b)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{chain_mdp, ChainRewards};

    fn u(v: &[f64]) -> ParticleSet {
        ParticleSet::uniform(v.to_vec()).unwrap()
    }

    fn table_of_means(means: &[f64]) -> ReturnTable {
        ReturnTable::new(1, means.len(), means.iter().map(|m| u(&[*m])).collect()).unwrap()
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy_action(&table_of_means(&[1.0, 0.5]), 0), 0);
        assert_eq!(greedy_action(&table_of_means(&[1.0, 1.0]), 0), 0);
        assert_eq!(greedy_action(&table_of_means(&[0.5, 1.0, 0.9]), 0), 1);
    }

    #[test]
    fn bellman_target_examples() {
        assert_eq!(bellman_target(&u(&[0.0, 1.0]), 1.0, 0.5, false).unwrap().values(), &[1.0, 1.5]);
        assert_eq!(bellman_target(&u(&[3.0, -1.0, 7.0]), 2.0, 0.9, true).unwrap().values(), &[2.0; 3]);
        let t = bellman_target(&u(&[10.0]), 0.0, 0.99, false).unwrap();
        assert!((t.values()[0] - 9.9).abs() < 1e-12);
        assert!(bellman_target(&u(&[0.0]), 0.0, 1.0, false).is_err());
    }

    #[test]
    fn particle_mean_examples() {
        assert_eq!(particle_mean(&u(&[4.5])), 4.5);
        assert_eq!(particle_mean(&u(&[0.0, 1.0])), 0.5);
        let p = ParticleSet::weighted(vec![1.0, 2.0, 3.0], vec![0.5, 0.25, 0.25]).unwrap();
        assert_eq!(particle_mean(&p), 1.75);
    }

    #[test]
    fn pushforward_examples() {
        let single = TabularMdp::new(1, 1, vec![1.0], vec![0.0], 0.9, vec![false], 0).unwrap();
        let z = ReturnTable::constant(1, 1, &u(&[1.0]));
        let out = exact_bellman_pushforward(&z, &single, &Policy::uniform(1, 1), DEFAULT_SUPPORT_CAP).unwrap();
        assert_eq!(out.get(0, 0).values(), &[0.9]);

        // two-cell cycle with unit reward everywhere
        let cycle = TabularMdp::new(
            2,
            1,
            vec![0.0, 1.0, 1.0, 0.0],
            vec![1.0, 1.0],
            0.5,
            vec![false, false],
            0,
        )
        .unwrap();
        let z = ReturnTable::constant(2, 1, &u(&[0.0]));
        let out = exact_bellman_pushforward(&z, &cycle, &Policy::uniform(2, 1), DEFAULT_SUPPORT_CAP).unwrap();
        assert!(out.entries().iter().all(|p| p.values() == [1.0]));
    }

    #[test]
    fn pushforward_respects_support_cap() {
        let m = chain_mdp(4, 0.3, ChainRewards::default(), 0.9).unwrap();
        let z = ReturnTable::for_mdp(&m, &u(&[0.0, 0.1, 0.2, 0.3]));
        let err = exact_bellman_pushforward(&z, &m, &Policy::uniform(4, 2), 3).unwrap_err();
        assert!(matches!(err, Error::SupportCap { .. }));
    }

    #[test]
    fn subsample_examples() {
        let d = subsample_particles(&u(&[2.5]), 5, SubsampleMode::QuantileMidpoints).unwrap();
        assert_eq!(d.values(), &[2.5; 5]);
        let two = subsample_particles(&u(&[1.0, 0.0]), 2, SubsampleMode::QuantileMidpoints).unwrap();
        assert_eq!(two.values(), &[0.0, 1.0]);
        let mc = subsample_particles(&u(&[0.0, 1.0, 2.0]), 6, SubsampleMode::MonteCarlo { seed: 4 }).unwrap();
        assert_eq!(mc.len(), 6);
        assert_eq!(
            mc,
            subsample_particles(&u(&[0.0, 1.0, 2.0]), 6, SubsampleMode::MonteCarlo { seed: 4 }).unwrap()
        );
        assert!(subsample_particles(&u(&[0.0]), 0, SubsampleMode::QuantileMidpoints).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let table = ReturnTable::new(
            2,
            1,
            vec![u(&[0.0, 1.0]), ParticleSet::weighted(vec![3.0, 4.0], vec![0.25, 0.75]).unwrap()],
        )
        .unwrap();
        let text = table.to_json("gamma = 0.9").unwrap();
        let (back, note) = ReturnTable::from_json(&text).unwrap();
        assert_eq!(back, table);
        assert_eq!(note, "gamma = 0.9");
        let missing = r#"{"gamma_note": "", "entries": [{"s": 1, "a": 0, "values": [0.0], "weights": [1.0]}]}"#;
        assert!(ReturnTable::from_json(missing).is_err());
    }
}
