//! Tabular softmax policies and trajectory probabilities.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::potential::SimplexPoint;

/// Standard deviation of the "from scratch" logit initialization.
pub const INIT_LOGIT_STD: f64 = 0.01;

const CHECKPOINT_MAGIC: &str = "# tabular-policy";
const CHECKPOINT_VERSION: u32 = 1;

/// How trajectory probabilities are fed to ψ and φ⁻¹.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbNormalization {
    /// Per-step geometric mean `exp(log π(τ) / T)`.
    #[default]
    GeometricMean,
    /// The raw product `π(τ)`.
    Raw,
}

impl ProbNormalization {
    /// Log of the normalized probability given `log π(τ)` and `T`.
    pub fn apply(self, log_prob: f64, horizon: usize) -> f64 {
        match self {
            ProbNormalization::GeometricMean => log_prob / horizon as f64,
            ProbNormalization::Raw => log_prob,
        }
    }

    pub fn scale(self, horizon: usize) -> f64 {
        match self {
            ProbNormalization::GeometricMean => 1.0 / horizon as f64,
            ProbNormalization::Raw => 1.0,
        }
    }
}

/// Per-state action logits; `π(·|s) = softmax(logits[s])`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    num_states: usize,
    num_actions: usize,
    logits: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(num_states: usize, num_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::Config("policy needs at least one state and one action".into()));
        }
        if logits.len() != num_states * num_actions {
            return Err(Error::Config(format!(
                "expected {} logits for {num_states}x{num_actions}, got {}",
                num_states * num_actions,
                logits.len()
            )));
        }
        if let Some(l) = logits.iter().find(|l| !l.is_finite()) {
            return Err(Error::Config(format!("non-finite logit {l}")));
        }
        Ok(Self {
            num_states,
            num_actions,
            logits,
        })
    }

    /// Uniform policy.
    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            logits: vec![0.0; num_states * num_actions],
        }
    }

    /// i.i.d. `N(0, 0.01)` logits.
    pub fn random_init<R: Rng + ?Sized>(rng: &mut R, num_states: usize, num_actions: usize) -> Self {
        let normal = Normal::new(0.0, INIT_LOGIT_STD).expect("valid std");
        Self {
            num_states,
            num_actions,
            logits: (0..num_states * num_actions).map(|_| normal.sample(rng)).collect(),
        }
    }

    /// Policy with the given per-state action probabilities (all positive).
    pub fn from_probabilities(rows: &[Vec<f64>]) -> Result<Self> {
        let num_actions = rows.first().map_or(0, Vec::len);
        let mut logits = Vec::with_capacity(rows.len() * num_actions);
        for row in rows {
            if row.len() != num_actions || row.iter().any(|&p| p <= 0.0) {
                return Err(Error::Config(
                    "probability rows must be positive and equally sized".into(),
                ));
            }
            logits.extend(row.iter().map(|p| p.ln()));
        }
        Self::new(rows.len(), num_actions, logits)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn row(&self, state: usize) -> &[f64] {
        &self.logits[state * self.num_actions..(state + 1) * self.num_actions]
    }

    /// π(·|s).
    pub fn distribution(&self, state: usize) -> SimplexPoint {
        SimplexPoint::from_logits(self.row(state))
    }

    /// log π(·|s), computed stably.
    pub fn log_probs(&self, state: usize) -> Vec<f64> {
        let row = self.row(state);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        row.iter().map(|l| l - lse).collect()
    }

    /// Full table of log π(a|s), row-major.
    pub fn log_prob_table(&self) -> Vec<f64> {
        (0..self.num_states).flat_map(|s| self.log_probs(s)).collect()
    }

    fn check(&self, traj: &Trajectory) -> Result<()> {
        for &(s, a) in &traj.steps {
            if s >= self.num_states || a >= self.num_actions {
                return Err(Error::Config(format!(
                    "step ({s}, {a}) outside policy of shape {}x{}",
                    self.num_states, self.num_actions
                )));
            }
        }
        Ok(())
    }

    /// log π(τ) = Σ_t log π(a_t|s_t).
    pub fn log_prob(&self, traj: &Trajectory) -> Result<f64> {
        self.check(traj)?;
        let table = self.log_prob_table();
        Ok(traj.steps.iter().map(|&(s, a)| table[s * self.num_actions + a]).sum())
    }

    /// exp(log π(τ) / T): per-step geometric-mean probability.
    pub fn seq_prob(&self, traj: &Trajectory) -> Result<f64> {
        Ok((self.log_prob(traj)? / traj.len() as f64).exp())
    }

    /// ∂ log π(τ) / ∂ logits in closed form: `n(s, a) − n(s) π(a|s)`.
    pub fn log_prob_gradient(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        self.check(traj)?;
        let mut grad = vec![0.0; self.logits.len()];
        for &(s, a) in &traj.steps {
            grad[s * self.num_actions + a] += 1.0;
            let dist = self.distribution(s);
            for (b, p) in dist.probs().iter().enumerate() {
                grad[s * self.num_actions + b] -= p;
            }
        }
        Ok(grad)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} states={} actions={}\n",
            self.num_states, self.num_actions
        );
        for l in &self.logits {
            writeln!(s, "{l}").expect("write to string");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(1, "empty policy checkpoint"))?;
        let rest = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| Error::parse(1, "missing policy header"))?;
        let (mut version, mut states, mut actions) = (None, None, None);
        for field in rest.split_whitespace() {
            if let Some(v) = field.strip_prefix('v').and_then(|v| v.parse::<u32>().ok()) {
                version = Some(v);
            } else if let Some(v) = field.strip_prefix("states=") {
                states = v.parse::<usize>().ok();
            } else if let Some(v) = field.strip_prefix("actions=") {
                actions = v.parse::<usize>().ok();
            } else {
                return Err(Error::parse(1, format!("unknown header field {field:?}")));
            }
        }
        if version != Some(CHECKPOINT_VERSION) {
            return Err(Error::parse(1, format!("unsupported policy version {version:?}")));
        }
        let (states, actions) = match (states, actions) {
            (Some(s), Some(a)) => (s, a),
            _ => return Err(Error::parse(1, "policy header needs states= and actions=")),
        };
        let mut logits = Vec::with_capacity(states * actions);
        for (i, line) in lines.enumerate() {
            logits.push(
                line.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(i + 2, format!("{e}: {line:?}")))?,
            );
        }
        if logits.len() != states * actions {
            return Err(Error::parse(
                logits.len() + 2,
                format!("expected {} logits, found {}", states * actions, logits.len()),
            ));
        }
        Self::new(states, actions, logits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Taped log π(a|s) table built from logit variables (row-major).
pub fn log_softmax_on_tape<'t>(tape: &'t Tape, logits: &[Var<'t>], num_actions: usize) -> Vec<Var<'t>> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(num_actions) {
        // The shift is a constant: it leaves both value and derivative of the
        // log-sum-exp unchanged while preventing overflow.
        let m = row.iter().map(|v| v.value()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<Var<'t>> = row.iter().map(|&l| (l - m).exp()).collect();
        let lse = tape.sum(&exps).ln() + m;
        out.extend(row.iter().map(|&l| l - lse));
    }
    out
}

/// Sparse `(table index, visit count)` list of a trajectory.
pub fn visit_counts(traj: &Trajectory, num_actions: usize) -> Vec<(usize, f64)> {
    let mut counts: Vec<(usize, f64)> = Vec::new();
    for &(s, a) in &traj.steps {
        let idx = s * num_actions + a;
        match counts.iter_mut().find(|(i, _)| *i == idx) {
            Some((_, c)) => *c += 1.0,
            None => counts.push((idx, 1.0)),
        }
    }
    counts.sort_by_key(|&(i, _)| i);
    counts
}

/// Taped `log π(τ)` as one linear node over the log-probability table.
pub fn log_prob_on_tape<'t>(tape: &'t Tape, log_table: &[Var<'t>], counts: &[(usize, f64)]) -> Var<'t> {
    let terms: Vec<(Var<'t>, f64)> = counts.iter().map(|&(i, c)| (log_table[i], c)).collect();
    tape.linear(&terms)
}
