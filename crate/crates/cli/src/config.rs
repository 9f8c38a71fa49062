//! Experiment configuration: one TOML document with a section per module.

use std::path::Path;

use mirror_po::analysis::GridSpec;
use mirror_po::data::{DatasetMode, JudgeConfig};
use mirror_po::env::{ChainEnv, EnvSpec, RewardKind, ValueMode};
use mirror_po::es::{EsConfig, FitnessShaping, FitnessSpec};
use mirror_po::policy::ProbNormalization;
use mirror_po::trainer::TrainerHyper;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Root of every derived random stream.
    pub seed: u64,
    pub output_dir: String,
    pub env: EnvSpec,
    pub policies: PolicySkills,
    pub judge: JudgeSpec,
    pub dataset: DatasetSpec,
    pub objective: ObjectiveConfig,
    pub trainer: TrainerConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub es: Option<EsSection>,
    pub landscape: LandscapeConfig,
    pub verify: VerifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: "out".into(),
            env: EnvSpec::default(),
            policies: PolicySkills::default(),
            judge: JudgeSpec::default(),
            dataset: DatasetSpec::default(),
            objective: ObjectiveConfig::default(),
            trainer: TrainerConfig::default(),
            es: None,
            landscape: LandscapeConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

/// Skill `q` of the two data-generating policies (probability of advancing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySkills {
    pub expert_skill: f64,
    pub reference_skill: f64,
}

impl Default for PolicySkills {
    fn default() -> Self {
        Self {
            expert_skill: 1.0,
            reference_skill: 0.43,
        }
    }
}

/// Either an explicit temperature or a target accuracy at a reward gap.
/// Without a gap the exact expert/reference value gap is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap: Option<f64>,
}

pub const DEFAULT_JUDGE_ACCURACY: f64 = 0.95;

impl JudgeSpec {
    /// Parses `q` or `q@gap`.
    pub fn from_accuracy_flag(s: &str) -> CliResult<Self> {
        let bad = || CliError::Usage(format!("--judge-accuracy expects q or q@gap, got {s:?}"));
        let (q, gap) = match s.split_once('@') {
            Some((q, g)) => (q, Some(g.trim().parse::<f64>().map_err(|_| bad())?)),
            None => (s, None),
        };
        let q = q.trim().parse::<f64>().map_err(|_| bad())?;
        Ok(Self {
            eta: None,
            accuracy: Some(q),
            gap,
        })
    }

    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.eta.is_some() && (self.accuracy.is_some() || self.gap.is_some()) {
            out.push("judge.eta excludes judge.accuracy and judge.gap".to_string());
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                out.push(format!("judge.eta must be positive and finite, got {eta}"));
            }
        }
        if let Some(q) = self.accuracy {
            if !(q > 0.5 && q < 1.0) {
                out.push(format!("judge.accuracy must lie in (0.5, 1), got {q}"));
            }
        }
        if let Some(gap) = self.gap {
            if !(gap > 0.0 && gap.is_finite()) {
                out.push(format!("judge.gap must be positive and finite, got {gap}"));
            }
        }
        out
    }

    /// Temperature given the exact values of the two policies.
    pub fn resolve(&self, expert_value: f64, reference_value: f64) -> CliResult<JudgeConfig> {
        if let Some(eta) = self.eta {
            return Ok(JudgeConfig::new(eta)?);
        }
        let gap = self.gap.unwrap_or(expert_value - reference_value);
        Ok(JudgeConfig::from_accuracy(
            self.accuracy.unwrap_or(DEFAULT_JUDGE_ACCURACY),
            gap,
        )?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub mode: DatasetMode,
    pub size: usize,
    /// Fraction of rows whose ranking is flipped after generation.
    pub noise: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            mode: DatasetMode::Base,
            size: mirror_po::data::DEFAULT_SIZE,
            noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// `orpo`, `dpo`, `gen_orpo:<path>` or `gen_dpo:<path | potential>`.
    pub spec: String,
    /// β of DPO-family objectives.
    pub beta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temporal: Option<bool>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            spec: "orpo".into(),
            beta: 0.1,
            temporal: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub lambda: f64,
    pub normalization: ProbNormalization,
    /// Independent training runs reported by `train`.
    pub seeds: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let h = TrainerHyper::default();
        Self {
            epochs: h.epochs,
            minibatch: h.minibatch,
            learning_rate: h.learning_rate,
            max_grad_norm: h.max_grad_norm,
            lambda: h.lambda,
            normalization: h.normalization,
            seeds: 25,
        }
    }
}

impl TrainerConfig {
    pub fn hyper(&self, seed: u64) -> TrainerHyper {
        TrainerHyper {
            epochs: self.epochs,
            minibatch: self.minibatch,
            learning_rate: self.learning_rate,
            max_grad_norm: self.max_grad_norm,
            lambda: self.lambda,
            seed,
            normalization: self.normalization,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNetInit {
    /// Zero kernels and unit residuals: exactly ORPO.
    #[default]
    Orpo,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsSection {
    pub population: usize,
    pub generations: usize,
    pub sigma_init: f64,
    pub sigma_decay: f64,
    pub learning_rate: f64,
    pub shaping: FitnessShaping,
    pub inner_seeds: usize,
    pub eval_episodes: usize,
    pub exact: bool,
    pub init: LossNetInit,
}

impl Default for EsSection {
    fn default() -> Self {
        let es = EsConfig::default();
        let fit = FitnessSpec::default();
        Self {
            population: es.population,
            generations: es.generations,
            sigma_init: es.sigma_init,
            sigma_decay: es.sigma_decay,
            learning_rate: es.learning_rate,
            shaping: es.shaping,
            inner_seeds: fit.inner_seeds,
            eval_episodes: fit.eval_episodes,
            exact: fit.exact,
            init: LossNetInit::Orpo,
        }
    }
}

impl EsSection {
    pub fn es_config(&self, seed: u64) -> EsConfig {
        EsConfig {
            population: self.population,
            generations: self.generations,
            sigma_init: self.sigma_init,
            sigma_decay: self.sigma_decay,
            learning_rate: self.learning_rate,
            shaping: self.shaping,
            seed,
        }
    }

    pub fn fitness_spec(&self) -> FitnessSpec {
        FitnessSpec {
            inner_seeds: self.inner_seeds,
            eval_episodes: self.eval_episodes,
            exact: self.exact,
        }
    }

    fn violations(&self) -> Vec<String> {
        let mut out = self.es_config(0).violations();
        if self.inner_seeds == 0 {
            out.push("es.inner_seeds must be positive".into());
        }
        if !self.exact && self.eval_episodes < 2 {
            out.push(format!(
                "es.eval_episodes must be at least 2, got {}",
                self.eval_episodes
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeConfig {
    pub points: usize,
    pub lo: f64,
    pub hi: f64,
    /// Training progress fed to temporal objectives.
    pub t: f64,
    /// Reference log-probabilities used by DPO-family objectives.
    pub reference_log_p_w: f64,
    pub reference_log_p_l: f64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        let g = GridSpec::default();
        Self {
            points: g.points,
            lo: g.lo,
            hi: g.hi,
            t: 0.0,
            reference_log_p_w: 0.5f64.ln(),
            reference_log_p_l: 0.5f64.ln(),
        }
    }
}

impl LandscapeConfig {
    pub fn grid(&self) -> GridSpec {
        GridSpec {
            points: self.points,
            lo: self.lo,
            hi: self.hi,
        }
    }
}

/// Tiny environment and regularization for the mirror-solution check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// `neg_entropy`, `euclidean`, `log_odds` or `learned:<path>`.
    pub potential: String,
    pub beta: f64,
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub reference_skill: f64,
    pub tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            potential: "neg_entropy".into(),
            beta: 1.0,
            states: 2,
            actions: 2,
            horizon: 2,
            reference_skill: 0.5,
            tolerance: 1e-4,
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "version",
    "seed",
    "output_dir",
    "env",
    "policies",
    "judge",
    "dataset",
    "objective",
    "trainer",
    "es",
    "landscape",
    "verify",
];

fn section_keys(section: &str) -> Option<&'static [&'static str]> {
    Some(match section {
        "env" => &["states", "actions", "horizon", "reward"],
        "policies" => &["expert_skill", "reference_skill"],
        "judge" => &["eta", "accuracy", "gap"],
        "dataset" => &["mode", "size", "noise"],
        "objective" => &["spec", "beta", "temporal"],
        "trainer" => &[
            "epochs",
            "minibatch",
            "learning_rate",
            "max_grad_norm",
            "lambda",
            "normalization",
            "seeds",
        ],
        "es" => &[
            "population",
            "generations",
            "sigma_init",
            "sigma_decay",
            "learning_rate",
            "shaping",
            "inner_seeds",
            "eval_episodes",
            "exact",
            "init",
        ],
        "landscape" => &["points", "lo", "hi", "t", "reference_log_p_w", "reference_log_p_l"],
        "verify" => &[
            "potential",
            "beta",
            "states",
            "actions",
            "horizon",
            "reference_skill",
            "tolerance",
        ],
        _ => return None,
    })
}

fn known_objective_head(spec: &str) -> bool {
    match spec.split_once(':') {
        None => matches!(spec, "orpo" | "dpo"),
        Some((head, arg)) => matches!(head, "gen_orpo" | "gen_dpo") && !arg.is_empty(),
    }
}

impl ExperimentConfig {
    /// Parses TOML, reporting every unknown key, type error and constraint
    /// violation together.
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(vec![format!("invalid TOML: {}", e.message())]))?;
        let mut problems = Vec::new();
        for (key, value) in &table {
            if !TOP_KEYS.contains(&key.as_str()) {
                problems.push(format!("unknown key `{key}`"));
                continue;
            }
            if let (Some(allowed), Some(inner)) = (section_keys(key), value.as_table()) {
                for k in inner.keys() {
                    if !allowed.contains(&k.as_str()) {
                        problems.push(format!("unknown key `{key}.{k}`"));
                    }
                }
            }
        }
        if !problems.is_empty() {
            return Err(CliError::Config(problems));
        }
        let mut cfg = ExperimentConfig::default();
        let mut section = |name: &str, apply: &mut dyn FnMut(toml::Value) -> Result<(), String>| {
            if let Some(v) = table.get(name) {
                if let Err(e) = apply(v.clone()) {
                    problems.push(format!("{name}: {e}"));
                }
            }
        };
        macro_rules! field {
            ($name:literal, $slot:expr) => {
                section($name, &mut |v| {
                    $slot = v
                        .try_into()
                        .map_err(|e: toml::de::Error| e.message().to_string())?;
                    Ok(())
                })
            };
        }
        field!("version", cfg.version);
        field!("seed", cfg.seed);
        field!("output_dir", cfg.output_dir);
        field!("policies", cfg.policies);
        field!("judge", cfg.judge);
        field!("dataset", cfg.dataset);
        field!("objective", cfg.objective);
        field!("trainer", cfg.trainer);
        field!("landscape", cfg.landscape);
        field!("verify", cfg.verify);
        section("env", &mut |v| {
            let mut t = toml::Table::try_from(EnvSpec::default()).map_err(|e| e.to_string())?;
            if let toml::Value::Table(given) = v {
                t.extend(given);
            }
            cfg.env = toml::Value::Table(t)
                .try_into()
                .map_err(|e: toml::de::Error| e.message().to_string())?;
            Ok(())
        });
        section("es", &mut |v| {
            cfg.es = Some(v.try_into().map_err(|e: toml::de::Error| e.message().to_string())?);
            Ok(())
        });
        problems.extend(cfg.violations());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(problems))
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Every violated constraint across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.version != CONFIG_VERSION {
            out.push(format!("version must be {CONFIG_VERSION}, got {}", self.version));
        }
        let env = &self.env;
        if env.states == 0 || env.actions < 2 || env.horizon == 0 {
            out.push(format!(
                "env needs states >= 1, actions >= 2 and horizon >= 1, got {}/{}/{}",
                env.states, env.actions, env.horizon
            ));
        }
        let RewardKind::AdvanceUnit = env.reward;
        for (name, q) in [
            ("policies.expert_skill", self.policies.expert_skill),
            ("policies.reference_skill", self.policies.reference_skill),
        ] {
            if !(0.0..=1.0).contains(&q) {
                out.push(format!("{name} must lie in [0, 1], got {q}"));
            }
        }
        out.extend(self.judge.violations());
        if self.judge.eta.is_none()
            && self.judge.gap.is_none()
            && self.policies.expert_skill <= self.policies.reference_skill
        {
            out.push(
                "judge calibration by accuracy needs expert_skill > reference_skill or an explicit judge.gap".into(),
            );
        }
        let d = &self.dataset;
        if d.size == 0 {
            out.push("dataset.size must be positive".into());
        } else if d.mode == DatasetMode::Shuffled && !d.size.is_multiple_of(4) {
            out.push(format!(
                "dataset.size must be divisible by 4 in shuffled mode, got {}",
                d.size
            ));
        }
        if !(0.0..=1.0).contains(&d.noise) {
            out.push(format!("dataset.noise must lie in [0, 1], got {}", d.noise));
        }
        if !known_objective_head(&self.objective.spec) {
            out.push(format!(
                "objective.spec must be orpo, dpo, gen_orpo:<path> or gen_dpo:<path>, got {:?}",
                self.objective.spec
            ));
        }
        if !(self.objective.beta > 0.0) {
            out.push(format!("objective.beta must be positive, got {}", self.objective.beta));
        }
        out.extend(self.trainer.hyper(0).violations());
        if self.trainer.seeds == 0 {
            out.push("trainer.seeds must be positive".into());
        }
        if let Some(es) = &self.es {
            out.extend(es.violations());
        }
        if let Err(e) = self.landscape.grid().validate() {
            out.push(format!("landscape: {e}"));
        }
        if !(0.0..=1.0).contains(&self.landscape.t) {
            out.push(format!("landscape.t must lie in [0, 1], got {}", self.landscape.t));
        }
        for (name, lp) in [
            ("landscape.reference_log_p_w", self.landscape.reference_log_p_w),
            ("landscape.reference_log_p_l", self.landscape.reference_log_p_l),
        ] {
            if !(lp < 0.0 && lp.is_finite()) {
                out.push(format!("{name} must be a finite negative log-probability, got {lp}"));
            }
        }
        let v = &self.verify;
        if !(v.beta > 0.0) {
            out.push(format!("verify.beta must be positive, got {}", v.beta));
        }
        if v.states == 0 || v.actions < 2 || v.horizon == 0 {
            out.push(format!(
                "verify needs states >= 1, actions >= 2 and horizon >= 1, got {}/{}/{}",
                v.states, v.actions, v.horizon
            ));
        }
        if !(v.reference_skill > 0.0 && v.reference_skill < 1.0) {
            out.push(format!(
                "verify.reference_skill must lie in (0, 1) so the reference is strictly positive, got {}",
                v.reference_skill
            ));
        }
        if !(v.tolerance > 0.0) {
            out.push(format!("verify.tolerance must be positive, got {}", v.tolerance));
        }
        out
    }

    pub fn validate(&self) -> CliResult<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(v))
        }
    }

    /// Exact values of the configured expert and reference policies.
    pub fn policy_values(&self, env: &ChainEnv) -> CliResult<(f64, f64)> {
        let value = |q| -> CliResult<f64> {
            let p = env.make_reference_policy(q)?;
            Ok(env.policy_value(&p, ValueMode::Exact)?.mean)
        };
        Ok((
            value(self.policies.expert_skill)?,
            value(self.policies.reference_skill)?,
        ))
    }
}
