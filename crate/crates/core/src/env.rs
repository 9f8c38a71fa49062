//! Episodic chain MDP with analytic values.
//!
//! States sit on a ring. Action 0 advances to the next state, every other
//! action stays put. With the default `advance_unit` reward (1 for advancing,
//! 0 otherwise) a policy that advances with probability `q` in every state has
//! value exactly `T·q`, so skill levels translate linearly into values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TabularPolicy;

/// Probability clamp applied when turning a skill level into logits.
pub const SKILL_PROB_CLAMP: f64 = 1e-6;
/// Largest `S·A·T` accepted by exact evaluation.
pub const MAX_EXACT_ENTRIES: usize = 1_000_000;

pub const ADVANCE: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    AdvanceUnit,
}

/// Serializable environment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub reward: RewardKind,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            states: 8,
            actions: 2,
            horizon: 20,
            reward: RewardKind::AdvanceUnit,
        }
    }
}

impl EnvSpec {
    pub fn build(&self) -> Result<ChainEnv> {
        match self.reward {
            RewardKind::AdvanceUnit => ChainEnv::advance_unit(self.states, self.actions, self.horizon),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `(s_t, a_t)` for `t = 0..T`.
    pub steps: Vec<(usize, usize)>,
    pub cumulative_reward: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn start_state(&self) -> Option<usize> {
        self.steps.first().map(|&(s, _)| s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ValueMode {
    Exact,
    MonteCarlo { episodes: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueEstimate {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainEnv {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    /// r(s, a), row-major.
    reward: Vec<f64>,
    /// Start-state distribution μ.
    start: Vec<f64>,
}

impl ChainEnv {
    pub fn new(num_states: usize, num_actions: usize, horizon: usize, reward: Vec<f64>) -> Result<Self> {
        let mut problems = Vec::new();
        if num_states == 0 {
            problems.push("states must be positive".to_string());
        }
        if num_actions == 0 {
            problems.push("actions must be positive".to_string());
        }
        if horizon == 0 {
            problems.push("horizon must be at least 1".to_string());
        }
        if reward.len() != num_states * num_actions {
            problems.push(format!("reward table needs {} entries", num_states * num_actions));
        }
        if reward.iter().any(|r| !(0.0..=1.0).contains(r)) {
            problems.push("rewards must lie in [0, 1]".to_string());
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            reward,
            start: vec![1.0 / num_states as f64; num_states],
        })
    }

    /// Reward 1 for advancing, 0 otherwise.
    pub fn advance_unit(num_states: usize, num_actions: usize, horizon: usize) -> Result<Self> {
        let reward = (0..num_states * num_actions)
            .map(|i| if i % num_actions.max(1) == ADVANCE { 1.0 } else { 0.0 })
            .collect();
        Self::new(num_states, num_actions, horizon, reward)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn start_distribution(&self) -> &[f64] {
        &self.start
    }

    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.reward[state * self.num_actions + action]
    }

    pub fn next_state(&self, state: usize, action: usize) -> usize {
        if action == ADVANCE {
            (state + 1) % self.num_states
        } else {
            state
        }
    }

    pub fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.num_states() != self.num_states || policy.num_actions() != self.num_actions {
            return Err(Error::Config(format!(
                "policy shape {}x{} does not match environment {}x{}",
                policy.num_states(),
                policy.num_actions(),
                self.num_states,
                self.num_actions
            )));
        }
        Ok(())
    }

    /// s0 ~ μ.
    pub fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.start, rng)
    }

    /// Rolls out `policy` for exactly `T` steps from `s0`.
    pub fn sample_trajectory<R: Rng + ?Sized>(
        &self,
        policy: &TabularPolicy,
        s0: usize,
        rng: &mut R,
    ) -> Result<Trajectory> {
        self.check_policy(policy)?;
        if s0 >= self.num_states {
            return Err(Error::Config(format!("start state {s0} out of range")));
        }
        let dists: Vec<Vec<f64>> = (0..self.num_states)
            .map(|s| policy.distribution(s).probs().to_vec())
            .collect();
        let mut steps = Vec::with_capacity(self.horizon);
        let mut total = 0.0;
        let mut s = s0;
        for _ in 0..self.horizon {
            let a = sample_index(&dists[s], rng);
            steps.push((s, a));
            total += self.reward(s, a);
            s = self.next_state(s, a);
        }
        Ok(Trajectory {
            steps,
            cumulative_reward: total,
        })
    }

    /// Σ_t r(s_t, a_t) of a recorded trajectory.
    pub fn trajectory_reward(&self, traj: &Trajectory) -> f64 {
        traj.steps.iter().map(|&(s, a)| self.reward(s, a)).sum()
    }

    /// Expected cumulative reward of `policy` under μ.
    pub fn policy_value(&self, policy: &TabularPolicy, mode: ValueMode) -> Result<ValueEstimate> {
        self.check_policy(policy)?;
        match mode {
            ValueMode::Exact => {
                let entries = self.num_states * self.num_actions * self.horizon;
                if entries > MAX_EXACT_ENTRIES {
                    return Err(Error::Config(format!(
                        "exact evaluation over {entries} entries exceeds {MAX_EXACT_ENTRIES}"
                    )));
                }
                let v = self.state_values(policy);
                let mean = v.iter().zip(&self.start).map(|(v, m)| v * m).sum();
                Ok(ValueEstimate { mean, stderr: 0.0 })
            }
            ValueMode::MonteCarlo { episodes, seed } => {
                if episodes == 0 {
                    return Err(Error::Config(
                        "Monte Carlo evaluation needs at least one episode".into(),
                    ));
                }
                let mut rng = crate::rng::stream(seed, "policy-value", &[]);
                let returns: Vec<f64> = (0..episodes)
                    .map(|_| {
                        let s0 = self.sample_start(&mut rng);
                        self.sample_trajectory(policy, s0, &mut rng)
                            .map(|t| t.cumulative_reward)
                    })
                    .collect::<Result<_>>()?;
                Ok(mean_and_stderr(&returns))
            }
        }
    }

    /// Finite-horizon values V_0(s) by backward induction.
    pub fn state_values(&self, policy: &TabularPolicy) -> Vec<f64> {
        let dists: Vec<Vec<f64>> = (0..self.num_states)
            .map(|s| policy.distribution(s).probs().to_vec())
            .collect();
        let mut next = vec![0.0; self.num_states];
        for _ in 0..self.horizon {
            next = (0..self.num_states)
                .map(|s| {
                    (0..self.num_actions)
                        .map(|a| dists[s][a] * (self.reward(s, a) + next[self.next_state(s, a)]))
                        .sum()
                })
                .collect();
        }
        next
    }

    /// Policy that advances with probability `skill` in every state.
    pub fn make_reference_policy(&self, skill: f64) -> Result<TabularPolicy> {
        if !(0.0..=1.0).contains(&skill) {
            return Err(Error::Config(format!("skill must lie in [0, 1], got {skill}")));
        }
        if self.num_actions == 1 {
            return Ok(TabularPolicy::uniform(self.num_states, 1));
        }
        let p = skill.clamp(SKILL_PROB_CLAMP, 1.0 - SKILL_PROB_CLAMP);
        let rest = (1.0 - p) / (self.num_actions - 1) as f64;
        let row: Vec<f64> = (0..self.num_actions)
            .map(|a| if a == ADVANCE { p } else { rest })
            .collect();
        TabularPolicy::from_probabilities(&vec![row; self.num_states])
    }
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the last cumulative sum.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Sample mean and standard error (n − 1 denominator).
pub fn mean_and_stderr(xs: &[f64]) -> ValueEstimate {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return ValueEstimate { mean, stderr: 0.0 };
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    ValueEstimate {
        mean,
        stderr: (var / n).sqrt(),
    }
}
