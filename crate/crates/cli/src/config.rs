//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//!
//! [mdp]
//! kind = "chain"        # chain | grid | three_state | file
//! gamma = 0.9           # required
//! n_states = 5
//! slip = 0.1
//!
//! [agent]
//! n_particles = 32
//! learning_rate = 0.05
//!
//! [divergence]
//! kind = "sinkhorn"     # sinkhorn | mmd | energy
//! epsilon = 10.0
//! iterations = 10
//! alpha = 2.0
//!
//! [exploration]
//! eps_start = 1.0
//! eps_end = 0.05
//! decay_fraction = 0.5
//!
//! [evaluation]          # optional; switches to policy evaluation
//! policy = [[0.5, 0.5], [0.3, 0.7], [1.0, 0.0]]
//!
//! [sweep]               # optional; defaults for `sdrl sweep`
//! parameter = "epsilon"
//! values = [1.0, 10.0, 100.0, 500.0]
//! ```
//!
//! Unset keys take the reference defaults (`N = 200`, `L = 10`, `eps = 10`,
//! `alpha = 2`, `lr = 5e-5`, Adam). Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdrl_core::agent::{AgentConfig, DivergenceSpec, Exploration, Optimizer, TrainingMode, REFERENCE_ADAM_EPSILON};
use sdrl_core::analysis::{SweepGrid, SweepParameter};
use sdrl_core::divergence::CostSpec;
use sdrl_core::envs::{chain_mdp, gridworld_mdp, three_state_mdp, ChainRewards, GridSpec, Policy, TabularMdp};
use sdrl_core::sinkhorn::SinkhornConfig;

use crate::error::{CliError, Result};

const TOP_KEYS: &[&str] = &["seed", "mdp", "agent", "divergence", "exploration", "evaluation", "sweep"];
const MDP_KEYS: &[&str] = &[
    "kind",
    "gamma",
    "n_states",
    "slip",
    "terminal_reward",
    "step_reward",
    "width",
    "height",
    "noise",
    "reward_map",
    "terminals",
    "path",
];
const AGENT_KEYS: &[&str] = &[
    "n_particles",
    "learning_rate",
    "final_learning_rate",
    "target_sync_period",
    "buffer_capacity",
    "batch_size",
    "total_steps",
    "eval_interval",
    "eval_episodes",
    "max_episode_steps",
    "init_spread",
    "optimizer",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
];
const DIVERGENCE_KEYS: &[&str] = &[
    "kind",
    "epsilon",
    "iterations",
    "alpha",
    "log_domain",
    "tolerance",
    "include_entropy",
    "epsilon_scaling",
    "bandwidths",
];
const EXPLORATION_KEYS: &[&str] = &["eps_start", "eps_end", "decay_fraction"];
const EVALUATION_KEYS: &[&str] = &["policy"];
const SWEEP_KEYS: &[&str] = &["parameter", "values", "replications", "threshold"];

/// Every key of `table` not in the schema, as dotted paths.
pub fn unknown_keys(table: &toml::Table) -> Vec<String> {
    let mut out = Vec::new();
    for (key, value) in table {
        let section = match key.as_str() {
            "mdp" => MDP_KEYS,
            "agent" => AGENT_KEYS,
            "divergence" => DIVERGENCE_KEYS,
            "exploration" => EXPLORATION_KEYS,
            "evaluation" => EVALUATION_KEYS,
            "sweep" => SWEEP_KEYS,
            k if TOP_KEYS.contains(&k) => continue,
            _ => {
                out.push(key.clone());
                continue;
            }
        };
        match value.as_table() {
            Some(t) => out.extend(t.keys().filter(|k| !section.contains(&k.as_str())).map(|k| format!("{key}.{k}"))),
            None => out.push(format!("{key} (expected a table)")),
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSection {
    pub kind: Option<String>,
    pub gamma: Option<f64>,
    pub n_states: Option<usize>,
    pub slip: Option<f64>,
    pub terminal_reward: Option<f64>,
    pub step_reward: Option<f64>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub noise: Option<f64>,
    pub reward_map: Option<Vec<Vec<f64>>>,
    pub terminals: Option<Vec<usize>>,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSection {
    pub n_particles: Option<usize>,
    pub learning_rate: Option<f64>,
    pub final_learning_rate: Option<f64>,
    pub target_sync_period: Option<usize>,
    pub buffer_capacity: Option<usize>,
    pub batch_size: Option<usize>,
    pub total_steps: Option<usize>,
    pub eval_interval: Option<usize>,
    pub eval_episodes: Option<usize>,
    pub max_episode_steps: Option<usize>,
    pub init_spread: Option<f64>,
    pub optimizer: Option<String>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_epsilon: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceSection {
    pub kind: Option<String>,
    pub epsilon: Option<f64>,
    pub iterations: Option<usize>,
    pub alpha: Option<f64>,
    pub log_domain: Option<bool>,
    pub tolerance: Option<f64>,
    pub include_entropy: Option<bool>,
    pub epsilon_scaling: Option<f64>,
    pub bandwidths: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplorationSection {
    pub eps_start: Option<f64>,
    pub eps_end: Option<f64>,
    pub decay_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyValue {
    Named(String),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub policy: PolicyValue,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: Option<String>,
    pub values: Option<Vec<f64>>,
    pub replications: Option<usize>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub mdp: MdpSection,
    #[serde(default)]
    pub agent: AgentSection,
    #[serde(default)]
    pub divergence: DivergenceSection,
    #[serde(default)]
    pub exploration: ExplorationSection,
    pub evaluation: Option<EvaluationSection>,
    pub sweep: Option<SweepSection>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        let unknown = unknown_keys(&table);
        if !unknown.is_empty() {
            return Err(config_err(format!("unknown keys: {}", unknown.join(", "))));
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        if cfg.mdp.gamma.is_none() {
            return Err(config_err("missing key: mdp.gamma"));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.mdp.gamma.expect("checked at parse time")
    }

    /// Builds the MDP; relative `path`s resolve against `base_dir`.
    pub fn build_mdp(&self, base_dir: &Path) -> Result<TabularMdp> {
        let m = &self.mdp;
        let gamma = self.gamma();
        let kind = m.kind.as_deref().unwrap_or("chain");
        let only = |allowed: &[&str]| -> Result<()> {
            let set = [
                ("n_states", m.n_states.is_some()),
                ("slip", m.slip.is_some()),
                ("terminal_reward", m.terminal_reward.is_some()),
                ("step_reward", m.step_reward.is_some()),
                ("width", m.width.is_some()),
                ("height", m.height.is_some()),
                ("noise", m.noise.is_some()),
                ("reward_map", m.reward_map.is_some()),
                ("terminals", m.terminals.is_some()),
                ("path", m.path.is_some()),
            ];
            let bad: Vec<&str> = set
                .iter()
                .filter(|(k, present)| *present && !allowed.contains(k))
                .map(|(k, _)| *k)
                .collect();
            if bad.is_empty() {
                Ok(())
            } else {
                Err(config_err(format!("keys not valid for mdp.kind = \"{kind}\": mdp.{}", bad.join(", mdp."))))
            }
        };
        let mdp = match kind {
            "chain" => {
                only(&["n_states", "slip", "terminal_reward", "step_reward"])?;
                let defaults = ChainRewards::default();
                chain_mdp(
                    m.n_states.unwrap_or(5),
                    m.slip.unwrap_or(0.1),
                    ChainRewards {
                        terminal: m.terminal_reward.unwrap_or(defaults.terminal),
                        step: m.step_reward.unwrap_or(defaults.step),
                    },
                    gamma,
                )?
            }
            "grid" => {
                only(&["width", "height", "noise", "reward_map", "terminals"])?;
                let spec = GridSpec {
                    width: m.width.ok_or_else(|| config_err("missing key: mdp.width"))?,
                    height: m.height.ok_or_else(|| config_err("missing key: mdp.height"))?,
                    noise: m.noise.unwrap_or(0.0),
                    reward_map: m.reward_map.clone().ok_or_else(|| config_err("missing key: mdp.reward_map"))?,
                    terminals: m.terminals.clone().unwrap_or_default(),
                    gamma,
                };
                gridworld_mdp(&spec)?
            }
            "three_state" => {
                only(&[])?;
                three_state_mdp(gamma)?
            }
            "file" => {
                only(&["path"])?;
                let p = m.path.as_ref().ok_or_else(|| config_err("missing key: mdp.path"))?;
                let full = base_dir.join(p);
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| config_err(format!("cannot read {}: {e}", full.display())))?;
                let mdp = TabularMdp::from_json(&text)?;
                if mdp.gamma() != gamma {
                    return Err(config_err(format!(
                        "mdp.gamma = {gamma} but {} has gamma = {}",
                        full.display(),
                        mdp.gamma()
                    )));
                }
                mdp
            }
            other => return Err(config_err(format!("unknown mdp.kind \"{other}\""))),
        };
        Ok(mdp)
    }

    pub fn divergence(&self) -> Result<DivergenceSpec> {
        let d = &self.divergence;
        let kind = d.kind.as_deref().unwrap_or("sinkhorn");
        let reject = |keys: &[(&str, bool)]| -> Result<()> {
            let bad: Vec<&str> = keys.iter().filter(|(_, p)| *p).map(|(k, _)| *k).collect();
            if bad.is_empty() {
                Ok(())
            } else {
                Err(config_err(format!(
                    "keys not valid for divergence.kind = \"{kind}\": divergence.{}",
                    bad.join(", divergence.")
                )))
            }
        };
        let solver_keys = [
            ("epsilon", d.epsilon.is_some()),
            ("iterations", d.iterations.is_some()),
            ("log_domain", d.log_domain.is_some()),
            ("tolerance", d.tolerance.is_some()),
            ("include_entropy", d.include_entropy.is_some()),
            ("epsilon_scaling", d.epsilon_scaling.is_some()),
        ];
        let cost = || -> Result<CostSpec> {
            match (&d.bandwidths, d.alpha) {
                (Some(_), Some(_)) => Err(config_err("set either divergence.alpha or divergence.bandwidths, not both")),
                (Some(b), None) => Ok(CostSpec::gaussian(b.clone())),
                (None, a) => Ok(CostSpec::power(a.unwrap_or(2.0))),
            }
        };
        let spec = match kind {
            "sinkhorn" => {
                let base = SinkhornConfig::default();
                DivergenceSpec::Sinkhorn {
                    config: SinkhornConfig {
                        epsilon: d.epsilon.unwrap_or(base.epsilon),
                        max_iterations: d.iterations.unwrap_or(base.max_iterations),
                        tolerance: d.tolerance.unwrap_or(base.tolerance),
                        log_domain: d.log_domain.unwrap_or(base.log_domain),
                        include_entropy: d.include_entropy.unwrap_or(base.include_entropy),
                        epsilon_scaling: d.epsilon_scaling,
                    },
                    cost: cost()?,
                }
            }
            "mmd" => {
                reject(&solver_keys)?;
                DivergenceSpec::Mmd { kernel: cost()? }
            }
            "energy" => {
                reject(&solver_keys)?;
                reject(&[("alpha", d.alpha.is_some()), ("bandwidths", d.bandwidths.is_some())])?;
                DivergenceSpec::Energy
            }
            other => return Err(config_err(format!("unknown divergence.kind \"{other}\""))),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Resolves the agent configuration against `mdp`; `seed` overrides the file.
    pub fn agent_config(&self, mdp: &TabularMdp, seed: Option<u64>) -> Result<AgentConfig> {
        let a = &self.agent;
        let reference = AgentConfig::reference();
        let total_steps = a.total_steps.unwrap_or(reference.total_steps);
        let e = &self.exploration;
        let decay_fraction = e.decay_fraction.unwrap_or(0.5);
        if !(0.0..=1.0).contains(&decay_fraction) {
            return Err(config_err("exploration.decay_fraction must lie in [0, 1]"));
        }
        let optimizer = match a.optimizer.as_deref().unwrap_or("adam") {
            "sgd" => {
                if a.adam_beta1.or(a.adam_beta2).or(a.adam_epsilon).is_some() {
                    return Err(config_err("agent.adam_* keys need agent.optimizer = \"adam\""));
                }
                Optimizer::Sgd
            }
            "adam" => Optimizer::Adam {
                beta1: a.adam_beta1.unwrap_or(0.9),
                beta2: a.adam_beta2.unwrap_or(0.999),
                epsilon: a.adam_epsilon.unwrap_or(REFERENCE_ADAM_EPSILON),
            },
            other => return Err(config_err(format!("unknown agent.optimizer \"{other}\""))),
        };
        let mode = match &self.evaluation {
            None => TrainingMode::Control,
            Some(ev) => {
                let policy = match &ev.policy {
                    PolicyValue::Named(n) if n == "uniform" => Policy::uniform(mdp.n_states(), mdp.n_actions()),
                    PolicyValue::Named(n) => {
                        return Err(config_err(format!("unknown evaluation.policy \"{n}\"; use \"uniform\" or rows")))
                    }
                    PolicyValue::Rows(rows) => Policy::new(rows.clone())?,
                };
                TrainingMode::Evaluation { policy }
            }
        };
        let cfg = AgentConfig {
            n_particles: a.n_particles.unwrap_or(reference.n_particles),
            divergence: self.divergence()?,
            learning_rate: a.learning_rate.unwrap_or(reference.learning_rate),
            final_learning_rate: a.final_learning_rate,
            gamma: self.gamma(),
            target_sync_period: a.target_sync_period.unwrap_or(reference.target_sync_period),
            buffer_capacity: a.buffer_capacity.unwrap_or(reference.buffer_capacity),
            batch_size: a.batch_size.unwrap_or(reference.batch_size),
            exploration: Exploration {
                eps_start: e.eps_start.unwrap_or(1.0),
                eps_end: e.eps_end.unwrap_or(0.05),
                decay_steps: (decay_fraction * total_steps as f64).round() as usize,
            },
            total_steps,
            seed: seed.or(self.seed).unwrap_or(0),
            eval_interval: a.eval_interval.unwrap_or(reference.eval_interval),
            eval_episodes: a.eval_episodes.unwrap_or(reference.eval_episodes),
            max_episode_steps: a.max_episode_steps.unwrap_or(reference.max_episode_steps),
            init_spread: a.init_spread.unwrap_or(reference.init_spread),
            optimizer,
            mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sweep grid from the `[sweep]` table, with command-line overrides.
    pub fn sweep_grid(
        &self,
        parameter: Option<&str>,
        values: Option<Vec<f64>>,
        replications: Option<usize>,
    ) -> Result<SweepGrid> {
        let s = self.sweep.clone().unwrap_or_default();
        let name = parameter
            .map(str::to_string)
            .or(s.parameter)
            .ok_or_else(|| config_err("no sweep parameter; pass --param or set sweep.parameter"))?;
        let parameter = parse_parameter(&name)?;
        let grid = SweepGrid {
            parameter,
            values: values
                .or(s.values)
                .ok_or_else(|| config_err("no sweep values; pass --values or set sweep.values"))?,
            replications: replications.or(s.replications).unwrap_or(1),
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn sweep_threshold(&self, flag: Option<f64>) -> f64 {
        flag.or(self.sweep.as_ref().and_then(|s| s.threshold)).unwrap_or(0.05)
    }
}

pub fn parse_parameter(name: &str) -> Result<SweepParameter> {
    match name {
        "epsilon" | "eps" => Ok(SweepParameter::Epsilon),
        "iterations" | "L" => Ok(SweepParameter::Iterations),
        "particles" | "N" | "n_particles" => Ok(SweepParameter::Particles),
        "learning_rate" | "lr" => Ok(SweepParameter::LearningRate),
        other => Err(config_err(format!(
            "unknown sweep parameter \"{other}\"; expected epsilon, iterations, particles or learning_rate"
        ))),
    }
}
