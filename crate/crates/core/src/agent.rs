//! Tabular particle agents trained by fitted distributional iteration.
//!
//! Each `(s, a)` holds `N` equally weighted particles. A training step samples
//! a replay batch, builds per-transition Bellman targets from a periodically
//! synced target table, and moves the online particles down the gradient of
//! the configured divergence with the target held fixed.
//!
//! Particle steps divide the gradient by the particle weight, i.e.
//! `z_i <- z_i - lr * N * dL/dz_i`. This is the Wasserstein gradient of the
//! loss at the particle, so the learning rate does not depend on `N`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::divergence::{energy_distance, energy_gradient, mmd_gradient, mmd_squared, CostSpec};
use crate::envs::{policy_evaluation, rng, sample_transition, value_iteration, Policy, QTable, Rng, TabularMdp, Transition};
use crate::error::{Error, Result};
use crate::particles::ParticleSet;
use crate::sinkhorn::{sinkhorn_value_and_gradient, SinkhornConfig};
use crate::value_dist::{bellman_target, greedy_action, ReturnTable};

/// Learning rate of the reference deep-RL setup, kept for the Adam option.
pub const REFERENCE_LEARNING_RATE: f64 = 5e-5;
/// Adam epsilon of the reference deep-RL setup.
pub const REFERENCE_ADAM_EPSILON: f64 = 0.01 / 32.0;

/// Loss between the online particles and their Bellman target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DivergenceSpec {
    Sinkhorn { config: SinkhornConfig, cost: CostSpec },
    Mmd { kernel: CostSpec },
    Energy,
}

impl DivergenceSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DivergenceSpec::Sinkhorn { .. } => "sinkhorn",
            DivergenceSpec::Mmd { .. } => "mmd",
            DivergenceSpec::Energy => "energy",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DivergenceSpec::Sinkhorn { config, cost } => {
                config.validate()?;
                cost.validate()
            }
            DivergenceSpec::Mmd { kernel } => kernel.validate(),
            DivergenceSpec::Energy => Ok(()),
        }
    }
}

/// Linear decay of the exploration rate from `eps_start` to `eps_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exploration {
    pub eps_start: f64,
    pub eps_end: f64,
    pub decay_steps: usize,
}

impl Exploration {
    pub fn at(&self, step: usize) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.eps_end;
        }
        let t = step as f64 / self.decay_steps as f64;
        self.eps_start + t * (self.eps_end - self.eps_start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

/// Control learns the greedy policy; evaluation learns the return law of a fixed policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainingMode {
    Control,
    Evaluation { policy: Policy },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub n_particles: usize,
    pub divergence: DivergenceSpec,
    pub learning_rate: f64,
    /// When set, the learning rate decays linearly to this value at `total_steps`.
    #[serde(default)]
    pub final_learning_rate: Option<f64>,
    pub gamma: f64,
    pub target_sync_period: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub exploration: Exploration,
    pub total_steps: usize,
    pub seed: u64,
    /// Steps between learning-curve rows.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Episode length cap for both training and evaluation rollouts.
    pub max_episode_steps: usize,
    /// Initial particles are evenly spaced on `[-init_spread, init_spread]`.
    pub init_spread: f64,
    pub optimizer: Optimizer,
    pub mode: TrainingMode,
}

impl Default for AgentConfig {
    /// Desk-scale settings for the small chain and grid MDPs.
    fn default() -> Self {
        AgentConfig {
            n_particles: 32,
            divergence: DivergenceSpec::Sinkhorn {
                config: SinkhornConfig::default(),
                cost: CostSpec::power(2.0),
            },
            learning_rate: 0.05,
            final_learning_rate: None,
            gamma: 0.9,
            target_sync_period: 100,
            buffer_capacity: 10_000,
            batch_size: 8,
            exploration: Exploration {
                eps_start: 1.0,
                eps_end: 0.05,
                decay_steps: 10_000,
            },
            total_steps: 20_000,
            seed: 0,
            eval_interval: 1_000,
            eval_episodes: 20,
            max_episode_steps: 100,
            init_spread: 0.1,
            optimizer: Optimizer::Sgd,
            mode: TrainingMode::Control,
        }
    }
}

impl AgentConfig {
    /// Settings of the reference deep-RL setup (`N = 200`, `lr = 5e-5`, Adam).
    pub fn reference() -> Self {
        AgentConfig {
            n_particles: 200,
            learning_rate: REFERENCE_LEARNING_RATE,
            optimizer: Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: REFERENCE_ADAM_EPSILON,
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_particles", self.n_particles),
            ("target_sync_period", self.target_sync_period),
            ("buffer_capacity", self.buffer_capacity),
            ("batch_size", self.batch_size),
            ("total_steps", self.total_steps),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
            ("max_episode_steps", self.max_episode_steps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::param(name, "must be positive"));
        }
        if self.batch_size > self.buffer_capacity {
            return Err(Error::param("batch_size", "must not exceed buffer_capacity"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        if let Some(lr) = self.final_learning_rate {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::param("final_learning_rate", "must be nonnegative"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::param("gamma", "must lie in (0, 1)"));
        }
        let e = &self.exploration;
        if !((0.0..=1.0).contains(&e.eps_start) && (0.0..=1.0).contains(&e.eps_end)) {
            return Err(Error::param("exploration", "rates must lie in [0, 1]"));
        }
        if !(self.init_spread >= 0.0 && self.init_spread.is_finite()) {
            return Err(Error::param("init_spread", "must be nonnegative"));
        }
        self.divergence.validate()
    }
}

/// Divergence value and its gradient in the current particles; the target is constant.
pub fn loss_and_gradient(
    current: &ParticleSet,
    target: &ParticleSet,
    divergence: &DivergenceSpec,
) -> Result<(f64, Vec<f64>)> {
    if !current.is_uniform() {
        return Err(Error::InvalidInput("trainable particles must have uniform weights".into()));
    }
    match divergence {
        DivergenceSpec::Sinkhorn { config, cost } => sinkhorn_value_and_gradient(current, target, cost, config),
        DivergenceSpec::Mmd { kernel } => Ok((
            mmd_squared(current, target, kernel)?,
            mmd_gradient(current, target, kernel)?,
        )),
        DivergenceSpec::Energy => Ok((energy_distance(current, target), energy_gradient(current, target))),
    }
}

/// Fixed-capacity ring buffer of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Draws `k` transitions with replacement.
    pub fn sample(&self, k: usize, rng: &mut Rng) -> Vec<Transition> {
        (0..k)
            .map(|_| self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

/// One learning-curve point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub step: usize,
    pub mean_return: f64,
    /// Mean training loss since the previous row.
    pub loss: f64,
    /// `sup_{s,a} |mean Z(s,a) - Q(s,a)|` against the exact oracle.
    pub sup_q_err: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
    pub final_table: ReturnTable,
    pub config: AgentConfig,
    pub wall_clock_s: f64,
}

impl RunRecord {
    pub fn final_row(&self) -> Option<&RunRow> {
        self.rows.last()
    }

    /// CSV with header `step,mean_return,loss,sup_q_err`. Depends only on the run, not the clock.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "mean_return", "loss", "sup_q_err"])?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.mean_return.to_string(),
                r.loss.to_string(),
                r.sup_q_err.map(|e| e.to_string()).unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// JSON sidecar with the full config echo, seed and wall-clock time.
    pub fn sidecar_json(&self) -> Result<String> {
        let doc = serde_json::json!({
            "config": self.config,
            "seed": self.config.seed,
            "wall_clock_s": self.wall_clock_s,
            "rows": self.rows.len(),
            "final_row": self.final_row(),
        });
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        let table_path = dir.join(format!("{stem}_table.json"));
        std::fs::write(&csv_path, self.to_csv()?)?;
        std::fs::write(&json_path, self.sidecar_json()?)?;
        std::fs::write(
            &table_path,
            self.final_table.to_json(&format!("gamma = {}", self.config.gamma))?,
        )?;
        Ok(vec![csv_path, json_path, table_path])
    }
}

/// Average return of greedy rollouts from the start state.
pub fn evaluate_policy(
    table: &ReturnTable,
    mdp: &TabularMdp,
    episodes: usize,
    horizon: usize,
    discounted: bool,
    rng: &mut Rng,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::param("episodes", "must be positive"));
    }
    table.check_against(mdp)?;
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut s = mdp.start_state();
        let mut discount = 1.0;
        for _ in 0..horizon {
            if mdp.is_terminal(s) {
                break;
            }
            let t = sample_transition(mdp, s, greedy_action(table, s), rng);
            total += discount * t.reward;
            if discounted {
                discount *= mdp.gamma();
            }
            s = t.next_state;
        }
    }
    Ok(total / episodes as f64)
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: Vec<i32>,
}

fn initial_table(mdp: &TabularMdp, cfg: &AgentConfig) -> Result<ReturnTable> {
    let n = cfg.n_particles;
    let spread = cfg.init_spread;
    let grid: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                0.0
            } else {
                -spread + 2.0 * spread * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    let init = ParticleSet::uniform(grid)?;
    let zero = ParticleSet::uniform(vec![0.0; n])?;
    let entries = (0..mdp.n_states())
        .flat_map(|s| (0..mdp.n_actions()).map(move |a| (s, a)))
        .map(|(s, _)| if mdp.is_terminal(s) { zero.clone() } else { init.clone() })
        .collect();
    ReturnTable::new(mdp.n_states(), mdp.n_actions(), entries)
}

fn oracle(mdp: &TabularMdp, mode: &TrainingMode) -> Result<QTable> {
    match mode {
        TrainingMode::Control => Ok(value_iteration(mdp, 1e-12)?.0),
        TrainingMode::Evaluation { policy } => policy_evaluation(mdp, policy, 1e-12),
    }
}

/// Runs the training loop; fully determined by `(mdp, cfg)`.
pub fn train(mdp: &TabularMdp, cfg: &AgentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    if (cfg.gamma - mdp.gamma()).abs() > 0.0 {
        return Err(Error::param("gamma", "agent and MDP discount factors differ"));
    }
    if let TrainingMode::Evaluation { policy } = &cfg.mode {
        policy.check_against(mdp)?;
    }
    let started = Instant::now();
    let n = cfg.n_particles;
    let n_actions = mdp.n_actions();
    let q_star = oracle(mdp, &cfg.mode)?;
    let value_limit = 10.0 * (mdp.max_abs_reward() / (1.0 - cfg.gamma)).max(cfg.init_spread);

    let mut rng = rng(cfg.seed);
    let mut online = initial_table(mdp, cfg)?;
    let mut target = online.clone();
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut adam = match cfg.optimizer {
        Optimizer::Adam { .. } => Some(AdamState {
            m: vec![0.0; online.entries().len() * n],
            v: vec![0.0; online.entries().len() * n],
            t: vec![0; online.entries().len()],
        }),
        Optimizer::Sgd => None,
    };

    let mut rows = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut state = mdp.start_state();
    let mut episode_len = 0;
    let mut values = vec![0.0; n];

    for step in 1..=cfg.total_steps {
        let explore = rng.random::<f64>() < cfg.exploration.at(step);
        let action = if explore {
            rng.random_range(0..n_actions)
        } else {
            match &cfg.mode {
                TrainingMode::Control => greedy_action(&online, state),
                TrainingMode::Evaluation { policy } => policy.sample(state, &mut rng),
            }
        };
        let t = sample_transition(mdp, state, action, &mut rng);
        buffer.push(t);
        episode_len += 1;
        if t.terminal || episode_len >= cfg.max_episode_steps {
            state = mdp.start_state();
            episode_len = 0;
        } else {
            state = t.next_state;
        }

        if buffer.len() >= cfg.batch_size {
            let batch = buffer.sample(cfg.batch_size, &mut rng);
            let mut grads: BTreeMap<(usize, usize), (Vec<f64>, usize)> = BTreeMap::new();
            for tr in &batch {
                let next_action = match &cfg.mode {
                    TrainingMode::Control => greedy_action(&target, tr.next_state),
                    TrainingMode::Evaluation { policy } => policy.sample(tr.next_state, &mut rng),
                };
                let tgt = bellman_target(target.get(tr.next_state, next_action), tr.reward, cfg.gamma, tr.terminal)?;
                let (loss, grad) = loss_and_gradient(online.get(tr.state, tr.action), &tgt, &cfg.divergence)
                    .map_err(|e| Error::InvalidInput(format!("({}, {}): {e}", tr.state, tr.action)))?;
                loss_sum += loss;
                loss_count += 1;
                let slot = grads
                    .entry((tr.state, tr.action))
                    .or_insert_with(|| (vec![0.0; n], 0));
                slot.0.iter_mut().zip(&grad).for_each(|(acc, g)| *acc += g);
                slot.1 += 1;
            }
            for ((s, a), (grad, count)) in grads {
                let entry = s * n_actions + a;
                let particles = online.get_mut(s, a);
                values.copy_from_slice(particles.values());
                let lr = match cfg.final_learning_rate {
                    Some(end) => {
                        let t = step as f64 / cfg.total_steps as f64;
                        cfg.learning_rate + t * (end - cfg.learning_rate)
                    }
                    None => cfg.learning_rate,
                };
                // divide by the particle weight 1/N
                let scale = n as f64 / count as f64;
                match (&cfg.optimizer, adam.as_mut()) {
                    (Optimizer::Adam { beta1, beta2, epsilon }, Some(st)) => {
                        st.t[entry] += 1;
                        let t = st.t[entry];
                        for i in 0..n {
                            let g = grad[i] * scale;
                            let k = entry * n + i;
                            st.m[k] = beta1 * st.m[k] + (1.0 - beta1) * g;
                            st.v[k] = beta2 * st.v[k] + (1.0 - beta2) * g * g;
                            let mh = st.m[k] / (1.0 - beta1.powi(t));
                            let vh = st.v[k] / (1.0 - beta2.powi(t));
                            values[i] -= lr * mh / (vh.sqrt() + epsilon);
                        }
                    }
                    _ => {
                        for i in 0..n {
                            values[i] -= lr * grad[i] * scale;
                        }
                    }
                }
                if let Some(v) = values.iter().find(|v| !(v.abs() <= value_limit)) {
                    return Err(Error::TrainingAborted {
                        step,
                        reason: format!(
                            "particle value {v} at ({s}, {a}) exceeds {value_limit}; lower the learning rate"
                        ),
                    });
                }
                particles.set_values(&values)?;
            }
        }

        if step % cfg.target_sync_period == 0 {
            target = online.clone();
        }

        if step % cfg.eval_interval == 0 || step == cfg.total_steps {
            let mut eval_rng = crate::envs::rng(cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mean_return = evaluate_policy(
                &online,
                mdp,
                cfg.eval_episodes,
                cfg.max_episode_steps,
                false,
                &mut eval_rng,
            )?;
            rows.push(RunRow {
                step,
                mean_return,
                loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN },
                sup_q_err: Some(online.means().sup_distance(&q_star)),
            });
            loss_sum = 0.0;
            loss_count = 0;
        }
    }

    Ok(RunRecord {
        rows,
        final_table: online,
        config: cfg.clone(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{chain_mdp, ChainRewards, RIGHT};

    fn u(v: &[f64]) -> ParticleSet {
        ParticleSet::uniform(v.to_vec()).unwrap()
    }

    #[test]
    fn identical_sets_have_zero_loss_and_gradient() {
        let x = u(&[0.1, 0.4, 0.9]);
        for spec in [
            DivergenceSpec::Sinkhorn {
                config: SinkhornConfig::new(10.0, 50),
                cost: CostSpec::power(2.0),
            },
            DivergenceSpec::Mmd {
                kernel: CostSpec::gaussian(vec![1.0]),
            },
            DivergenceSpec::Energy,
        ] {
            let (l, g) = loss_and_gradient(&x, &x, &spec).unwrap();
            assert!(l.abs() < 1e-6, "{}: {l}", spec.name());
            assert!(g.iter().all(|v| v.abs() < 1e-6), "{}: {g:?}", spec.name());
        }
    }

    #[test]
    fn energy_loss_equals_k1_mmd() {
        let x = u(&[0.0, 0.3, 1.2]);
        let y = u(&[-0.5, 0.8]);
        let (l, _) = loss_and_gradient(&x, &y, &DivergenceSpec::Energy).unwrap();
        let m = mmd_squared(&x, &y, &CostSpec::power(1.0)).unwrap();
        assert!((l - m).abs() < 1e-12);
    }

    #[test]
    fn weighted_current_is_rejected() {
        let x = ParticleSet::weighted(vec![0.0, 1.0], vec![0.2, 0.8]).unwrap();
        assert!(loss_and_gradient(&x, &x, &DivergenceSpec::Energy).is_err());
    }

    #[test]
    fn exploration_schedule_is_linear() {
        let e = Exploration {
            eps_start: 1.0,
            eps_end: 0.0,
            decay_steps: 10,
        };
        assert_eq!(e.at(0), 1.0);
        assert_eq!(e.at(5), 0.5);
        assert_eq!(e.at(20), 0.0);
    }

    #[test]
    fn replay_buffer_wraps() {
        let mut b = ReplayBuffer::new(2);
        for s in 0..3 {
            b.push(Transition {
                state: s,
                action: 0,
                reward: 0.0,
                next_state: 0,
                terminal: false,
            });
        }
        assert_eq!(b.len(), 2);
        let states: Vec<usize> = b.items.iter().map(|t| t.state).collect();
        assert_eq!(states, vec![2, 1]);
    }

    #[test]
    fn evaluate_policy_examples() {
        let m = chain_mdp(4, 0.0, ChainRewards::default(), 0.9).unwrap();
        let mut optimal = ReturnTable::for_mdp(&m, &u(&[0.0]));
        for s in 0..3 {
            *optimal.get_mut(s, RIGHT) = u(&[1.0]);
        }
        let mut r = rng(0);
        assert_eq!(evaluate_policy(&optimal, &m, 3, 50, false, &mut r).unwrap(), 1.0);
        // all-zero table breaks ties toward LEFT and never reaches the goal
        let zero = ReturnTable::for_mdp(&m, &u(&[0.0]));
        assert_eq!(evaluate_policy(&zero, &m, 2, 50, false, &mut r).unwrap(), 0.0);
        assert!(evaluate_policy(&zero, &m, 0, 50, false, &mut r).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = AgentConfig::default();
        assert!(c.validate().is_ok());
        c.batch_size = c.buffer_capacity + 1;
        assert!(c.validate().is_err());
        let c = AgentConfig {
            gamma: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert_eq!(AgentConfig::reference().n_particles, 200);
    }

    #[test]
    fn too_large_learning_rate_aborts() {
        let m = chain_mdp(3, 0.0, ChainRewards::default(), 0.9).unwrap();
        let cfg = AgentConfig {
            learning_rate: 1e6,
            divergence: DivergenceSpec::Energy,
            n_particles: 4,
            total_steps: 200,
            ..Default::default()
        };
        assert!(matches!(train(&m, &cfg), Err(Error::TrainingAborted { .. })));
    }
}
