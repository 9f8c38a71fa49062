//! Command implementations. Each command turns an [`Invocation`] into
//! in-memory artifacts; [`crate::manifest`] persists them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mirror_po::analysis::{asymmetry_fraction, landscape, landscape_csv, trace_csv, verify_mirror_solution};
use mirror_po::data::{self, corrupt_noise, generate_dataset, GenerationRequest, PreferenceDataset};
use mirror_po::env::{mean_and_stderr, ChainEnv, ValueMode};
use mirror_po::es::{evolve_loss_net, PreferenceFitness};
use mirror_po::loss_net::LossNetParams;
use mirror_po::objective::ObjectiveSpec;
use mirror_po::policy::TabularPolicy;
use mirror_po::potential::OmegaPotential;
use mirror_po::rng::{derive_seed, stream};
use mirror_po::trainer::{replay_trace, train};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, LossNetInit};
use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    GenData,
    Train,
    Evolve,
    Landscape,
    VerifyTheorem,
    Eval,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::GenData => "gen-data",
            CommandKind::Train => "train",
            CommandKind::Evolve => "evolve",
            CommandKind::Landscape => "landscape",
            CommandKind::VerifyTheorem => "verify-theorem",
            CommandKind::Eval => "eval",
        }
    }
}

/// A fully resolved command: everything needed to regenerate its artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Invocation {
    pub command: CommandKind,
    /// Input dataset of `train`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Policy checkpoint of `eval`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
    /// Monte Carlo episodes of `eval`; 0 selects the exact value.
    #[serde(default)]
    pub episodes: usize,
    pub config: ExperimentConfig,
}

impl Invocation {
    pub fn new(command: CommandKind, config: ExperimentConfig) -> Self {
        Self {
            command,
            data: None,
            policy: None,
            episodes: 0,
            config,
        }
    }

    /// Files read by the command, labelled for the manifest.
    pub fn input_files(&self) -> Vec<(String, PathBuf)> {
        let mut out = Vec::new();
        if let Some(p) = &self.data {
            out.push(("data".into(), p.clone()));
        }
        if let Some(p) = &self.policy {
            out.push(("policy".into(), p.clone()));
        }
        let uses_objective = matches!(self.command, CommandKind::Train | CommandKind::Landscape);
        if uses_objective {
            if let Some(path) = objective_file(&self.config.objective.spec) {
                out.push(("objective".into(), path));
            }
        }
        if self.command == CommandKind::VerifyTheorem {
            if let Some(path) = self.config.verify.potential.strip_prefix("learned:") {
                out.push(("potential".into(), PathBuf::from(path)));
            }
        }
        out
    }
}

fn objective_file(spec: &str) -> Option<PathBuf> {
    let (head, arg) = spec.split_once(':')?;
    match head {
        "gen_orpo" => Some(PathBuf::from(arg)),
        "gen_dpo" if OmegaPotential::from_name(arg).is_err() => Some(PathBuf::from(arg)),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    /// Path relative to the output directory.
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    fn text(name: impl Into<String>, text: String) -> Self {
        Self {
            name: name.into(),
            bytes: text.into_bytes(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub artifacts: Vec<Artifact>,
    /// Every derived seed, by stream name.
    pub seeds: BTreeMap<String, u64>,
    /// Human-readable `key=value` summary printed on success.
    pub summary: String,
    /// A numerical check that did not meet its tolerance.
    pub failed_check: Option<String>,
}

/// Default artifact names of single-file commands.
pub const DATASET_FILE: &str = "dataset.txt";
pub const LANDSCAPE_FILE: &str = "landscape.csv";

pub fn execute(inv: &Invocation) -> CliResult<RunOutput> {
    inv.config.validate()?;
    match inv.command {
        CommandKind::GenData => gen_data(&inv.config),
        CommandKind::Train => {
            let path = inv
                .data
                .as_deref()
                .ok_or_else(|| CliError::Usage("train needs --data".into()))?;
            run_train(&inv.config, path)
        }
        CommandKind::Evolve => run_evolve(&inv.config),
        CommandKind::Landscape => run_landscape(&inv.config),
        CommandKind::VerifyTheorem => run_verify(&inv.config),
        CommandKind::Eval => {
            let path = inv
                .policy
                .as_deref()
                .ok_or_else(|| CliError::Usage("eval needs --policy".into()))?;
            run_eval(&inv.config, path, inv.episodes)
        }
    }
}

/// Dataset described by the `[env]`, `[policies]`, `[judge]` and `[dataset]`
/// sections, with noise applied.
pub fn build_dataset(cfg: &ExperimentConfig, seeds: &mut BTreeMap<String, u64>) -> CliResult<PreferenceDataset> {
    let env = cfg.env.build()?;
    let expert = env.make_reference_policy(cfg.policies.expert_skill)?;
    let reference = env.make_reference_policy(cfg.policies.reference_skill)?;
    let (ve, vr) = cfg.policy_values(&env)?;
    let judge = cfg.judge.resolve(ve, vr)?;
    let seed = derive_seed(cfg.seed, "dataset", &[]);
    seeds.insert("dataset".into(), seed);
    let d = generate_dataset(&GenerationRequest {
        env_spec: &cfg.env,
        expert: &expert,
        expert_skill: Some(cfg.policies.expert_skill),
        reference: &reference,
        reference_skill: Some(cfg.policies.reference_skill),
        size: cfg.dataset.size,
        mode: cfg.dataset.mode,
        judge,
        seed,
    })?;
    if cfg.dataset.noise > 0.0 {
        let noise_seed = derive_seed(cfg.seed, "noise", &[]);
        seeds.insert("noise".into(), noise_seed);
        return Ok(corrupt_noise(&d, cfg.dataset.noise, noise_seed)?);
    }
    Ok(d)
}

fn gen_data(cfg: &ExperimentConfig) -> CliResult<RunOutput> {
    let mut out = RunOutput::default();
    let d = build_dataset(cfg, &mut out.seeds)?;
    let (ee, er, rr) = d.source_pair_counts();
    out.summary = format!(
        "rows={} expert_expert={ee} expert_reference={er} reference_reference={rr} flipped={} eta={}",
        d.len(),
        d.flipped_count(),
        d.provenance.eta
    );
    out.artifacts.push(Artifact::text(DATASET_FILE, data::to_text(&d)?));
    Ok(out)
}

fn objective(cfg: &ExperimentConfig) -> CliResult<ObjectiveSpec> {
    Ok(ObjectiveSpec::parse(
        &cfg.objective.spec,
        cfg.objective.beta,
        cfg.trainer.lambda,
        cfg.objective.temporal,
    )?)
}

struct SeedRun {
    index: usize,
    run_seed: u64,
    value: f64,
    policy: TabularPolicy,
    trace: Vec<(f64, f64, f64)>,
}

fn run_train(cfg: &ExperimentConfig, data_path: &Path) -> CliResult<RunOutput> {
    let d = data::load(data_path)?;
    let env = d.provenance.env.build()?;
    let reference = TabularPolicy::new(
        env.num_states(),
        env.num_actions(),
        d.provenance.reference.logits.clone(),
    )?;
    let obj = objective(cfg)?;
    let reference = obj.requires_reference().then_some(&reference);
    let runs: Vec<SeedRun> = (0..cfg.trainer.seeds)
        .into_par_iter()
        .map(|index| {
            let run_seed = derive_seed(cfg.seed, "train", &[index as u64]);
            let init = TabularPolicy::random_init(
                &mut stream(run_seed, "policy-init", &[]),
                env.num_states(),
                env.num_actions(),
            );
            let (policy, trace) = train(&d, &obj, &cfg.trainer.hyper(run_seed), &init, reference)?;
            let value = env.policy_value(&policy, ValueMode::Exact)?.mean;
            Ok(SeedRun {
                index,
                run_seed,
                value,
                policy,
                trace: replay_trace(&trace)?,
            })
        })
        .collect::<mirror_po::Result<_>>()?;

    let mut out = RunOutput::default();
    let mut csv = String::from("seed,run_seed,final_value\n");
    for r in &runs {
        out.seeds.insert(format!("train.{}", r.index), r.run_seed);
        writeln!(csv, "{},{},{}", r.index, r.run_seed, r.value).expect("write to string");
        out.artifacts.push(Artifact::text(
            format!("policies/policy-{:03}.txt", r.index),
            r.policy.to_text(),
        ));
        out.artifacts.push(Artifact::text(
            format!("traces/trace-{:03}.csv", r.index),
            trace_csv(&r.trace),
        ));
    }
    let values: Vec<f64> = runs.iter().map(|r| r.value).collect();
    let stats = mean_and_stderr(&values);
    writeln!(csv, "mean,,{}", stats.mean).expect("write to string");
    writeln!(csv, "stderr,,{}", stats.stderr).expect("write to string");
    out.artifacts.insert(0, Artifact::text("summary.csv", csv));
    out.summary = format!(
        "objective={} seeds={} mean={} stderr={}",
        obj.id(),
        runs.len(),
        stats.mean,
        stats.stderr
    );
    Ok(out)
}

fn run_evolve(cfg: &ExperimentConfig) -> CliResult<RunOutput> {
    let es = cfg
        .es
        .as_ref()
        .ok_or_else(|| CliError::Config(vec!["evolve needs an [es] section".into()]))?;
    let mut out = RunOutput::default();
    let d = build_dataset(cfg, &mut out.seeds)?;
    let env = cfg.env.build()?;
    let temporal = cfg.objective.temporal.unwrap_or(false);
    let zeta0 = match es.init {
        LossNetInit::Orpo => LossNetParams::orpo_equivalent(temporal),
        LossNetInit::Random => {
            let seed = derive_seed(cfg.seed, "loss-net-init", &[]);
            out.seeds.insert("loss-net-init".into(), seed);
            LossNetParams::init(&mut stream(seed, "loss-net", &[]), temporal)
        }
    };
    let es_seed = derive_seed(cfg.seed, "es", &[]);
    out.seeds.insert("es".into(), es_seed);
    let fitness = PreferenceFitness {
        dataset: Arc::new(d.clone()),
        env,
        hyper: cfg.trainer.hyper(0),
        spec: es.fitness_spec(),
        temporal,
    };
    let (best, outcome) = evolve_loss_net(&es.es_config(es_seed), &zeta0, &fitness)?;
    let mut csv = String::from("generation,sigma,best_fitness,mean_fitness,fitness_stderr,non_finite\n");
    for r in &outcome.state.history {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.generation, r.sigma, r.best_fitness, r.mean_fitness, r.fitness_stderr, r.non_finite
        )
        .expect("write to string");
    }
    let mean = LossNetParams::from_flat(temporal, &outcome.state.mean)?;
    out.artifacts.push(Artifact::text(DATASET_FILE, data::to_text(&d)?));
    out.artifacts.push(Artifact::text("generations.csv", csv));
    out.artifacts.push(Artifact::text("best.lossnet", best.to_text()));
    out.artifacts.push(Artifact::text("mean.lossnet", mean.to_text()));
    let best_fitness = outcome.best_fitness.map_or("none".to_string(), |f| f.to_string());
    out.summary = format!(
        "generations={} best_fitness={best_fitness}",
        outcome.state.history.len()
    );
    Ok(out)
}

fn run_landscape(cfg: &ExperimentConfig) -> CliResult<RunOutput> {
    let obj = objective(cfg)?;
    let l = &cfg.landscape;
    let reference = obj
        .requires_reference()
        .then_some((l.reference_log_p_w, l.reference_log_p_l));
    let grid = landscape(&obj, &l.grid(), l.t, reference)?;
    Ok(RunOutput {
        summary: format!(
            "objective={} points={} asymmetry={}",
            obj.id(),
            l.points,
            asymmetry_fraction(&grid)?
        ),
        artifacts: vec![Artifact::text(LANDSCAPE_FILE, landscape_csv(&grid))],
        ..RunOutput::default()
    })
}

pub fn parse_potential(name: &str) -> CliResult<OmegaPotential> {
    match name.strip_prefix("learned:") {
        Some(path) => {
            let params = LossNetParams::load(Path::new(path))?;
            Ok(OmegaPotential::learned(Arc::new(params.phi_inv)))
        }
        None => Ok(OmegaPotential::from_name(name)?),
    }
}

fn run_verify(cfg: &ExperimentConfig) -> CliResult<RunOutput> {
    let v = &cfg.verify;
    let env = ChainEnv::advance_unit(v.states, v.actions, v.horizon)?;
    let reference = env.make_reference_policy(v.reference_skill)?;
    let potential = parse_potential(&v.potential)?;
    let report = verify_mirror_solution(&env, &potential, v.beta, &reference)?;
    let mut csv = String::from("s0,constant,spread,iterations\n");
    for s in &report.starts {
        writeln!(csv, "{},{},{},{}", s.s0, s.constant, s.spread, s.iterations).expect("write to string");
    }
    let mut out = RunOutput {
        summary: format!(
            "potential={} max_spread={} tolerance={}",
            v.potential, report.max_spread, v.tolerance
        ),
        ..RunOutput::default()
    };
    if !(report.max_spread <= v.tolerance) {
        out.failed_check = Some(format!(
            "residual spread {} exceeds tolerance {}",
            report.max_spread, v.tolerance
        ));
    }
    out.artifacts.push(Artifact::text("report.csv", csv));
    Ok(out)
}

fn run_eval(cfg: &ExperimentConfig, policy_path: &Path, episodes: usize) -> CliResult<RunOutput> {
    let policy = TabularPolicy::load(policy_path)?;
    let env = cfg.env.build()?;
    let mut out = RunOutput::default();
    let mode = if episodes == 0 {
        ValueMode::Exact
    } else {
        let seed = derive_seed(cfg.seed, "evaluation", &[]);
        out.seeds.insert("evaluation".into(), seed);
        ValueMode::MonteCarlo { episodes, seed }
    };
    let v = env.policy_value(&policy, mode)?;
    let mode_name = if episodes == 0 {
        "exact".to_string()
    } else {
        format!("monte_carlo:{episodes}")
    };
    out.summary = format!("value={} stderr={} mode={mode_name}", v.mean, v.stderr);
    out.artifacts.push(Artifact::text(
        "eval.csv",
        format!("value,stderr,mode\n{},{},{mode_name}\n", v.mean, v.stderr),
    ));
    Ok(out)
}
