//! Finite MDPs with exact dynamics, plus the Gaussian sample generators.
//!
//! Every constructor produces a [`TabularMdp`] whose terminal states are
//! absorbing with reward 0, so value iteration and exact distributional
//! backups need no special casing for episode ends.
//!
//! Randomness flows through [`Rng`], a ChaCha8 stream seeded explicitly with
//! [`rng`]. ChaCha8 output is specified bit-for-bit across platforms, which
//! keeps training runs reproducible from their seed.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::particles::ParticleSet;

/// Portable seeded generator used everywhere in the crate.
pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const ROW_TOLERANCE: f64 = 1e-12;

/// A finite MDP `(S, A, R, P, gamma)` with per-state terminal flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpSchema", into = "MdpSchema")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `P[s][a][s']`, flattened.
    transition: Vec<f64>,
    /// Expected immediate reward `R[s][a]`, flattened.
    reward: Vec<f64>,
    gamma: f64,
    terminal: Vec<bool>,
    start_state: usize,
}

/// JSON layout of a [`TabularMdp`].
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpSchema {
    n_states: usize,
    n_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    gamma: f64,
    terminal: Vec<bool>,
    #[serde(default)]
    start_state: usize,
}

impl TryFrom<MdpSchema> for TabularMdp {
    type Error = Error;

    fn try_from(s: MdpSchema) -> Result<Self> {
        let shape_ok = s.transition.len() == s.n_states
            && s.reward.len() == s.n_states
            && s.transition
                .iter()
                .all(|rows| rows.len() == s.n_actions && rows.iter().all(|r| r.len() == s.n_states))
            && s.reward.iter().all(|r| r.len() == s.n_actions);
        if !shape_ok {
            return Err(Error::InvalidInput("MDP arrays do not match n_states/n_actions".into()));
        }
        TabularMdp::new(
            s.n_states,
            s.n_actions,
            s.transition.into_iter().flatten().flatten().collect(),
            s.reward.into_iter().flatten().collect(),
            s.gamma,
            s.terminal,
            s.start_state,
        )
    }
}

impl From<TabularMdp> for MdpSchema {
    fn from(m: TabularMdp) -> Self {
        let (ns, na) = (m.n_states, m.n_actions);
        MdpSchema {
            n_states: ns,
            n_actions: na,
            transition: (0..ns)
                .map(|s| (0..na).map(|a| m.next_distribution(s, a).to_vec()).collect())
                .collect(),
            reward: m.reward.chunks(na).map(|r| r.to_vec()).collect(),
            gamma: m.gamma,
            terminal: m.terminal,
            start_state: m.start_state,
        }
    }
}

impl TabularMdp {
    /// Validates and builds an MDP from flattened arrays.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        terminal: Vec<bool>,
        start_state: usize,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidInput("MDP needs at least one state and action".into()));
        }
        if transition.len() != n_states * n_actions * n_states
            || reward.len() != n_states * n_actions
            || terminal.len() != n_states
        {
            return Err(Error::InvalidInput("MDP array lengths are inconsistent".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::param("gamma", format!("must lie in (0, 1), got {gamma}")));
        }
        if start_state >= n_states {
            return Err(Error::InvalidInput(format!("start state {start_state} out of range")));
        }
        if let Some(r) = reward.iter().find(|r| !r.is_finite()) {
            return Err(Error::InvalidInput(format!("reward {r} is not finite")));
        }
        for (k, row) in transition.chunks(n_states).enumerate() {
            let (s, a) = (k / n_actions, k % n_actions);
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::InvalidInput(format!("P[{s}][{a}] has invalid entries")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::InvalidInput(format!("P[{s}][{a}] sums to {total}")));
            }
            if terminal[s] && (row[s] != 1.0 || reward[k] != 0.0) {
                return Err(Error::InvalidInput(format!(
                    "terminal state {s} must self-loop with reward 0"
                )));
            }
        }
        Ok(TabularMdp {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            terminal,
            start_state,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn start_state(&self) -> usize {
        self.start_state
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn has_terminal(&self) -> bool {
        self.terminal.iter().any(|t| *t)
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// Largest absolute expected reward.
    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// `P(. | s, a)`.
    pub fn next_distribution(&self, s: usize, a: usize) -> &[f64] {
        let k = (s * self.n_actions + a) * self.n_states;
        &self.transition[k..k + self.n_states]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// A stochastic policy `pi(a | s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    /// Builds a policy from rows of action probabilities.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_actions = rows.first().map_or(0, |r| r.len());
        if n_actions == 0 || rows.iter().any(|r| r.len() != n_actions) {
            return Err(Error::InvalidInput("policy rows must be nonempty and equal length".into()));
        }
        for (s, r) in rows.iter().enumerate() {
            if r.iter().any(|p| !(p.is_finite() && *p >= 0.0))
                || (r.iter().sum::<f64>() - 1.0).abs() > ROW_TOLERANCE
            {
                return Err(Error::InvalidInput(format!("policy row {s} is not a distribution")));
            }
        }
        Ok(Policy {
            n_actions,
            probs: rows.into_iter().flatten().collect(),
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy {
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Policy { n_actions, probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn probs(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn sample(&self, s: usize, rng: &mut Rng) -> usize {
        sample_index(self.probs(s), rng)
    }

    pub(crate) fn check_against(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_actions != mdp.n_actions() || self.n_states() != mdp.n_states() {
            return Err(Error::InvalidInput("policy shape does not match the MDP".into()));
        }
        Ok(())
    }
}

/// Draws an index from a distribution, never returning a zero-probability entry.
fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = k;
            if u < acc {
                return k;
            }
        }
    }
    last_positive
}

/// Chain rewards: `terminal` on entering the right end, `step` on every other move.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainRewards {
    pub terminal: f64,
    #[serde(default)]
    pub step: f64,
}

impl Default for ChainRewards {
    fn default() -> Self {
        ChainRewards {
            terminal: 1.0,
            step: 0.0,
        }
    }
}

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

/// Left/right chain of `n_states` cells; the right end is terminal.
///
/// Actions move one cell in the intended direction with probability
/// `1 - slip_prob` and the opposite way otherwise; moving left from cell 0
/// stays put. `R[s][a]` is the expected reward over the successor.
pub fn chain_mdp(n_states: usize, slip_prob: f64, rewards: ChainRewards, gamma: f64) -> Result<TabularMdp> {
    if n_states < 2 {
        return Err(Error::param("n_states", format!("must be >= 2, got {n_states}")));
    }
    if !(0.0..1.0).contains(&slip_prob) {
        return Err(Error::param("slip_prob", format!("must lie in [0, 1), got {slip_prob}")));
    }
    let goal = n_states - 1;
    let mut transition = vec![0.0; n_states * 2 * n_states];
    let mut reward = vec![0.0; n_states * 2];
    let mut terminal = vec![false; n_states];
    terminal[goal] = true;
    for s in 0..n_states {
        for a in [LEFT, RIGHT] {
            let row = &mut transition[(s * 2 + a) * n_states..(s * 2 + a + 1) * n_states];
            if s == goal {
                row[s] = 1.0;
                continue;
            }
            let right = s + 1;
            let left = s.saturating_sub(1);
            let (intended, reverse) = if a == RIGHT { (right, left) } else { (left, right) };
            row[intended] += 1.0 - slip_prob;
            row[reverse] += slip_prob;
            reward[s * 2 + a] = rewards.step + rewards.terminal * row[goal];
        }
    }
    TabularMdp::new(n_states, 2, transition, reward, gamma, terminal, 0)
}

/// Three-state episodic MDP with two actions and a terminal state 2.
///
/// Transitions and rewards are chosen so the return laws are multimodal with
/// wide support; used as the policy-evaluation benchmark.
pub fn three_state_mdp(gamma: f64) -> Result<TabularMdp> {
    #[rustfmt::skip]
    let transition = vec![
        0.0, 0.5, 0.5,   0.5, 0.5, 0.0,
        0.3, 0.0, 0.7,   0.0, 0.6, 0.4,
        0.0, 0.0, 1.0,   0.0, 0.0, 1.0,
    ];
    let reward = vec![0.0, 1.0, 0.5, -0.5, 0.0, 0.0];
    TabularMdp::new(3, 2, transition, reward, gamma, vec![false, false, true], 0)
}

/// Fixed policy paired with [`three_state_mdp`].
pub fn three_state_policy() -> Policy {
    Policy::new(vec![vec![0.5, 0.5], vec![0.3, 0.7], vec![1.0, 0.0]]).expect("rows are distributions")
}

/// Gridworld layout and rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    /// Probability mass moved to the two perpendicular directions, split evenly.
    pub noise: f64,
    /// Reward for entering each cell, `height` rows of `width` entries.
    pub reward_map: Vec<Vec<f64>>,
    /// Terminal cells as `row * width + col`; defaults to the last cell.
    #[serde(default)]
    pub terminals: Vec<usize>,
    pub gamma: f64,
}

pub const UP: usize = 0;
pub const RIGHT_MOVE: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT_MOVE: usize = 3;

/// Four-action gridworld; moves into walls leave the agent in place.
pub fn gridworld_mdp(spec: &GridSpec) -> Result<TabularMdp> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 {
        return Err(Error::param("width/height", "grid must be nonempty"));
    }
    if spec.reward_map.len() != h || spec.reward_map.iter().any(|r| r.len() != w) {
        return Err(Error::InvalidInput(format!(
            "reward_map must be {h} rows of {w} entries"
        )));
    }
    if !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::param("noise", format!("must lie in [0, 1], got {}", spec.noise)));
    }
    let n = w * h;
    let terminals = if spec.terminals.is_empty() {
        vec![n - 1]
    } else {
        spec.terminals.clone()
    };
    if let Some(t) = terminals.iter().find(|t| **t >= n) {
        return Err(Error::InvalidInput(format!("terminal cell {t} out of range")));
    }
    let mut terminal = vec![false; n];
    terminals.iter().for_each(|&t| terminal[t] = true);
    let step = |s: usize, dir: usize| -> usize {
        let (r, c) = (s / w, s % w);
        match dir {
            UP if r > 0 => s - w,
            DOWN if r + 1 < h => s + w,
            LEFT_MOVE if c > 0 => s - 1,
            RIGHT_MOVE if c + 1 < w => s + 1,
            _ => s,
        }
    };
    let mut transition = vec![0.0; n * 4 * n];
    let mut reward = vec![0.0; n * 4];
    for s in 0..n {
        for a in 0..4 {
            let k = s * 4 + a;
            let row = &mut transition[k * n..(k + 1) * n];
            if terminal[s] {
                row[s] = 1.0;
                continue;
            }
            row[step(s, a)] += 1.0 - spec.noise;
            row[step(s, (a + 1) % 4)] += spec.noise / 2.0;
            row[step(s, (a + 3) % 4)] += spec.noise / 2.0;
            reward[k] = row
                .iter()
                .enumerate()
                .map(|(t, p)| p * spec.reward_map[t / w][t % w])
                .sum();
        }
    }
    TabularMdp::new(n, 4, transition, reward, spec.gamma, terminal, 0)
}

/// One sampled step of experience.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub terminal: bool,
}

/// Samples `s' ~ P(. | s, a)`; the reward is the expected reward `R[s][a]`.
pub fn sample_transition(mdp: &TabularMdp, state: usize, action: usize, rng: &mut Rng) -> Transition {
    let next_state = sample_index(mdp.next_distribution(state, action), rng);
    Transition {
        state,
        action,
        reward: mdp.reward(state, action),
        next_state,
        terminal: mdp.is_terminal(next_state),
    }
}

/// Action values as a flattened `[s][a]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Greedy action per state, lowest index on ties.
    pub fn greedy_policy(&self) -> Vec<usize> {
        self.values.chunks(self.n_actions).map(argmax_lowest).collect()
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

pub(crate) fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// One expected backup `R + gamma P V`, where `V(s') = next_value(s', Q)`.
fn backup(mdp: &TabularMdp, q: &QTable, next_value: impl Fn(usize, &[f64]) -> f64) -> QTable {
    let n = mdp.n_states();
    let v: Vec<f64> = (0..n).map(|s| next_value(s, q.row(s))).collect();
    let values = (0..n)
        .flat_map(|s| (0..mdp.n_actions()).map(move |a| (s, a)))
        .map(|(s, a)| {
            let ev: f64 = mdp.next_distribution(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
            mdp.reward(s, a) + mdp.gamma() * ev
        })
        .collect();
    QTable {
        n_actions: mdp.n_actions(),
        values,
    }
}

/// Optimality backup `T Q`.
pub fn optimality_backup(mdp: &TabularMdp, q: &QTable) -> QTable {
    backup(mdp, q, |_, row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Policy backup `T^pi Q`.
pub fn policy_backup(mdp: &TabularMdp, policy: &Policy, q: &QTable) -> QTable {
    backup(mdp, q, |s, row| {
        policy.probs(s).iter().zip(row).map(|(p, x)| p * x).sum()
    })
}

fn iterate_to_tolerance(mdp: &TabularMdp, tol: f64, step: impl Fn(&QTable) -> QTable) -> Result<QTable> {
    if !(tol > 0.0) {
        return Err(Error::param("tol", format!("must be positive, got {tol}")));
    }
    let mut q = QTable {
        n_actions: mdp.n_actions(),
        values: vec![0.0; mdp.n_states() * mdp.n_actions()],
    };
    loop {
        let next = step(&q);
        let residual = next.sup_distance(&q);
        q = next;
        // the returned table's own residual is at most gamma times this one
        if residual <= tol {
            return Ok(q);
        }
    }
}

/// Optimal action values with sup-norm Bellman residual at most `tol`, and the greedy policy.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<(QTable, Vec<usize>)> {
    let q = iterate_to_tolerance(mdp, tol, |q| optimality_backup(mdp, q))?;
    let policy = q.greedy_policy();
    Ok((q, policy))
}

/// `Q^pi` with sup-norm Bellman residual at most `tol`.
pub fn policy_evaluation(mdp: &TabularMdp, policy: &Policy, tol: f64) -> Result<QTable> {
    policy.check_against(mdp)?;
    iterate_to_tolerance(mdp, tol, |q| policy_backup(mdp, policy, q))
}

/// Two-dimensional sample cloud with uniform weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud2D {
    pub points: Vec<(f64, f64)>,
}

fn normal(mean: f64, std: f64) -> Result<Normal<f64>> {
    if !(std.is_finite() && std > 0.0) {
        return Err(Error::param("std", format!("must be positive, got {std}")));
    }
    Normal::new(mean, std).map_err(|e| Error::param("std", e.to_string()))
}

/// `n` i.i.d. draws from `N(mean, std^2)` as a uniform particle set.
pub fn gaussian_cloud(n: usize, mean: f64, std: f64, rng: &mut Rng) -> Result<ParticleSet> {
    if n == 0 {
        return Err(Error::param("n", "must be at least 1"));
    }
    let dist = normal(mean, std)?;
    ParticleSet::uniform((0..n).map(|_| dist.sample(rng)).collect())
}

/// `n` i.i.d. draws from an isotropic 2D Gaussian.
pub fn gaussian_cloud_2d(n: usize, mean: (f64, f64), std: f64, rng: &mut Rng) -> Result<PointCloud2D> {
    if n == 0 {
        return Err(Error::param("n", "must be at least 1"));
    }
    let dx = normal(mean.0, std)?;
    let dy = normal(mean.1, std)?;
    Ok(PointCloud2D {
        points: (0..n).map(|_| (dx.sample(rng), dy.sample(rng))).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows_ok(mdp: &TabularMdp) {
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                let row = mdp.next_distribution(s, a);
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|p| *p >= 0.0));
            }
        }
    }

    #[test]
    fn chain_construction() {
        let m = chain_mdp(2, 0.0, ChainRewards::default(), 0.9).unwrap();
        rows_ok(&m);
        assert!(m.transition.iter().all(|p| *p == 0.0 || *p == 1.0));
        let m = chain_mdp(5, 0.1, ChainRewards::default(), 0.9).unwrap();
        rows_ok(&m);
        for s in 1..3 {
            assert_eq!(m.next_distribution(s, RIGHT)[s + 1], 0.9);
        }
        assert!(chain_mdp(1, 0.0, ChainRewards::default(), 0.9).is_err());
        assert!(chain_mdp(3, 1.0, ChainRewards::default(), 0.9).is_err());
        assert!(chain_mdp(3, 0.1, ChainRewards::default(), 1.0).is_err());
    }

    #[test]
    fn chain_values_follow_geometric_pattern() {
        let gamma = 0.9;
        let m = chain_mdp(5, 0.0, ChainRewards::default(), gamma).unwrap();
        let (q, pi) = value_iteration(&m, 1e-12).unwrap();
        for s in 0..4 {
            let dist = (4 - s) as i32;
            assert!((q.get(s, RIGHT) - gamma.powi(dist - 1)).abs() < 1e-11);
            assert_eq!(pi[s], RIGHT);
        }
        assert_eq!(q.get(4, LEFT), 0.0);
    }

    #[test]
    fn gridworld_construction() {
        let one = GridSpec {
            width: 1,
            height: 1,
            noise: 0.0,
            reward_map: vec![vec![0.0]],
            terminals: vec![],
            gamma: 0.9,
        };
        let m = gridworld_mdp(&one).unwrap();
        assert!(m.is_terminal(0));
        let two = GridSpec {
            width: 2,
            height: 2,
            reward_map: vec![vec![0.0, 0.0], vec![0.0, 1.0]],
            ..one.clone()
        };
        let m = gridworld_mdp(&two).unwrap();
        assert!(m.transition.iter().all(|p| *p == 0.0 || *p == 1.0));
        assert_eq!(m.next_distribution(0, RIGHT_MOVE)[1], 1.0);
        assert_eq!(m.next_distribution(0, UP)[0], 1.0);
        let three = GridSpec {
            width: 3,
            height: 3,
            noise: 0.2,
            reward_map: vec![vec![0.0; 3]; 3],
            ..one.clone()
        };
        rows_ok(&gridworld_mdp(&three).unwrap());
        let bad = GridSpec {
            reward_map: vec![vec![0.0; 2]; 3],
            ..three
        };
        assert!(gridworld_mdp(&bad).is_err());
    }

    #[test]
    fn value_iteration_examples() {
        let m = chain_mdp(4, 0.2, ChainRewards { terminal: 0.0, step: 0.0 }, 0.9).unwrap();
        let (q, _) = value_iteration(&m, 1e-10).unwrap();
        assert!(q.values.iter().all(|v| *v == 0.0));
        let single = TabularMdp::new(1, 1, vec![1.0], vec![1.0], 0.5, vec![false], 0).unwrap();
        let (q, pi) = value_iteration(&single, 1e-12).unwrap();
        assert!((q.get(0, 0) - 2.0).abs() < 1e-11);
        assert_eq!(pi, vec![0]);
    }

    #[test]
    fn value_iteration_is_a_fixed_point() {
        let m = chain_mdp(6, 0.25, ChainRewards { terminal: 1.0, step: -0.05 }, 0.95).unwrap();
        let tol = 1e-9;
        let (q, _) = value_iteration(&m, tol).unwrap();
        assert!(optimality_backup(&m, &q).sup_distance(&q) <= tol);
    }

    #[test]
    fn deterministic_rows_sample_their_successor() {
        let m = chain_mdp(4, 0.0, ChainRewards::default(), 0.9).unwrap();
        let mut r = rng(1);
        for _ in 0..100 {
            let t = sample_transition(&m, 1, RIGHT, &mut r);
            assert_eq!(t.next_state, 2);
            assert!(!t.terminal);
        }
        assert!(sample_transition(&m, 2, RIGHT, &mut r).terminal);
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = chain_mdp(5, 0.3, ChainRewards::default(), 0.9).unwrap();
        let draw = |seed| {
            let mut r = rng(seed);
            (0..50).map(|_| sample_transition(&m, 2, LEFT, &mut r).next_state).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn json_schema_roundtrip() {
        let m = chain_mdp(3, 0.1, ChainRewards::default(), 0.8).unwrap();
        let text = m.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["transition"][0][1][1], 0.9);
        assert_eq!(TabularMdp::from_json(&text).unwrap(), m);
        let broken = text.replace("0.9", "0.95");
        assert!(TabularMdp::from_json(&broken).is_err());
    }

    #[test]
    fn gaussian_cloud_examples() {
        let mut r = rng(3);
        let p = gaussian_cloud(1, 2.5, 1e-12, &mut r).unwrap();
        assert!((p.values()[0] - 2.5).abs() < 1e-9);
        let a = gaussian_cloud(20, 0.0, 1.0, &mut rng(9)).unwrap();
        let b = gaussian_cloud(20, 0.0, 1.0, &mut rng(9)).unwrap();
        assert_eq!(a, b);
        assert!(gaussian_cloud(0, 0.0, 1.0, &mut r).is_err());
        assert!(gaussian_cloud(3, 0.0, 0.0, &mut r).is_err());
        let c = gaussian_cloud_2d(4, (1.0, -1.0), 0.5, &mut r).unwrap();
        assert_eq!(c.points.len(), 4);
    }
}
