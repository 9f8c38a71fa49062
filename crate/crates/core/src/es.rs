//! OpenAI-style evolution strategy over flat parameter vectors, and the
//! preference-training fitness used to search loss networks.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PreferenceDataset;
use crate::env::{mean_and_stderr, ChainEnv, ValueMode};
use crate::error::{Error, Result};
use crate::loss_net::LossNetParams;
use crate::objective::ObjectiveSpec;
use crate::optim::Adam;
use crate::policy::TabularPolicy;
use crate::rng::{derive_seed, stream};
use crate::trainer::{train, TrainerHyper};

/// Floor on the population standard deviation used for shaping.
pub const SHAPING_STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitnessShaping {
    /// Subtract the generation mean and divide by its standard deviation.
    #[default]
    Standardized,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsConfig {
    pub population: usize,
    pub generations: usize,
    pub sigma_init: f64,
    pub sigma_decay: f64,
    pub learning_rate: f64,
    pub shaping: FitnessShaping,
    pub seed: u64,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self {
            population: 256,
            generations: 128,
            sigma_init: 0.03,
            sigma_decay: 0.999,
            learning_rate: 0.02,
            shaping: FitnessShaping::Standardized,
            seed: 0,
        }
    }
}

impl EsConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.population == 0 || !self.population.is_multiple_of(2) {
            out.push(format!(
                "es.population must be positive and even, got {}",
                self.population
            ));
        }
        if !(self.sigma_init > 0.0) {
            out.push(format!("es.sigma_init must be positive, got {}", self.sigma_init));
        }
        if !(self.sigma_decay > 0.0 && self.sigma_decay <= 1.0) {
            out.push(format!("es.sigma_decay must lie in (0, 1], got {}", self.sigma_decay));
        }
        if !(self.learning_rate > 0.0) {
            out.push(format!("es.learning_rate must be positive, got {}", self.learning_rate));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// σ at generation `g`.
    pub fn sigma_at(&self, generation: usize) -> f64 {
        self.sigma_init * self.sigma_decay.powi(i32::try_from(generation).unwrap_or(i32::MAX))
    }
}

/// Identifies one fitness evaluation. Both members of an antithetic pair
/// share `seed`, so inner randomness cancels in their difference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalContext {
    pub generation: usize,
    pub pair: usize,
    /// +1 for `ζ + σε`, −1 for `ζ − σε`.
    pub sign: i8,
    pub seed: u64,
}

pub trait Fitness: Sync {
    fn evaluate(&self, candidate: &[f64], ctx: &EvalContext) -> f64;
}

impl<F: Fn(&[f64], &EvalContext) -> f64 + Sync> Fitness for F {
    fn evaluate(&self, candidate: &[f64], ctx: &EvalContext) -> f64 {
        self(candidate, ctx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    pub sigma: f64,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    /// Standard error of the mean over finite candidate fitnesses.
    pub fitness_stderr: f64,
    pub non_finite: usize,
}

#[derive(Clone, Debug)]
pub struct EsState {
    pub mean: Vec<f64>,
    pub sigma: f64,
    pub optimizer: Adam,
    pub generation: usize,
    pub history: Vec<GenerationRecord>,
}

#[derive(Clone, Debug)]
pub struct EsOutcome {
    /// Highest-fitness candidate seen (already projected), or `ζ0` when no
    /// generation ran.
    pub best: Vec<f64>,
    pub best_fitness: Option<f64>,
    pub state: EsState,
}

/// `n` standard-normal directions of dimension `dim`.
pub fn sample_perturbations<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Mean over pairs of `ε_i/(2σ)·(f⁺_i − f⁻_i)`. A pair with a non-finite
/// member contributes zero; the number of such pairs is returned.
pub fn antithetic_estimate(eps: &[Vec<f64>], f_plus: &[f64], f_minus: &[f64], sigma: f64) -> (Vec<f64>, usize) {
    let dim = eps.first().map_or(0, Vec::len);
    let mut grad = vec![0.0; dim];
    let mut skipped = 0;
    for ((e, &fp), &fm) in eps.iter().zip(f_plus).zip(f_minus) {
        let diff = fp - fm;
        if !diff.is_finite() {
            skipped += 1;
            continue;
        }
        let w = diff / (2.0 * sigma);
        for (g, x) in grad.iter_mut().zip(e) {
            *g += w * x;
        }
    }
    let n = eps.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (grad, skipped)
}

/// Standardizes the finite entries; non-finite entries stay non-finite.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return values.to_vec();
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(SHAPING_STD_FLOOR);
    values.iter().map(|v| (v - mean) / std).collect()
}

/// One antithetic gradient estimate of `fitness` at `zeta` with raw
/// fitness values.
pub fn es_gradient_estimate<F: Fn(&[f64]) -> f64>(
    zeta: &[f64],
    fitness: F,
    sigma: f64,
    population: usize,
    seed: u64,
) -> Result<(Vec<f64>, usize)> {
    if population == 0 || !population.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "population must be positive and even, got {population}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("σ must be positive, got {sigma}")));
    }
    let eps = sample_perturbations(&mut stream(seed, "es-noise", &[]), population / 2, zeta.len());
    let shifted = |e: &[f64], s: f64| -> Vec<f64> { zeta.iter().zip(e).map(|(z, x)| z + s * sigma * x).collect() };
    let f_plus: Vec<f64> = eps.iter().map(|e| fitness(&shifted(e, 1.0))).collect();
    let f_minus: Vec<f64> = eps.iter().map(|e| fitness(&shifted(e, -1.0))).collect();
    Ok(antithetic_estimate(&eps, &f_plus, &f_minus, sigma))
}

/// Maximizes `fitness`. Candidates `ζ ± σε` are passed through `project`
/// before evaluation; the estimator uses the raw ε.
pub fn evolve<P, F>(cfg: &EsConfig, zeta0: &[f64], project: P, fitness: &F) -> Result<EsOutcome>
where
    P: Fn(&[f64]) -> Vec<f64> + Sync,
    F: Fitness,
{
    cfg.validate()?;
    let dim = zeta0.len();
    let pairs = cfg.population / 2;
    let mut state = EsState {
        mean: zeta0.to_vec(),
        sigma: cfg.sigma_at(0),
        optimizer: Adam::new(dim, cfg.learning_rate),
        generation: 0,
        history: Vec::with_capacity(cfg.generations),
    };
    let mut best: Option<(Vec<f64>, f64)> = None;

    for g in 0..cfg.generations {
        let sigma = cfg.sigma_at(g);
        state.sigma = sigma;
        let eps = sample_perturbations(&mut stream(cfg.seed, "es-noise", &[g as u64]), pairs, dim);
        let jobs: Vec<(usize, i8)> = (0..pairs).flat_map(|i| [(i, 1i8), (i, -1i8)]).collect();
        let evaluated: Vec<(Vec<f64>, f64)> = jobs
            .par_iter()
            .map(|&(i, sign)| {
                let raw: Vec<f64> = state
                    .mean
                    .iter()
                    .zip(&eps[i])
                    .map(|(m, e)| m + f64::from(sign) * sigma * e)
                    .collect();
                let candidate = project(&raw);
                let ctx = EvalContext {
                    generation: g,
                    pair: i,
                    sign,
                    seed: derive_seed(cfg.seed, "es-fitness", &[g as u64, i as u64]),
                };
                let f = fitness.evaluate(&candidate, &ctx);
                (candidate, f)
            })
            .collect();

        let values: Vec<f64> = evaluated.iter().map(|(_, f)| *f).collect();
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let summary = if finite.is_empty() {
            None
        } else {
            Some(mean_and_stderr(&finite))
        };
        for (candidate, f) in &evaluated {
            if f.is_finite() && best.as_ref().is_none_or(|(_, b)| f > b) {
                best = Some((candidate.clone(), *f));
            }
        }
        let shaped = match cfg.shaping {
            FitnessShaping::Standardized => standardize(&values),
            FitnessShaping::Raw => values.clone(),
        };
        let f_plus: Vec<f64> = shaped.iter().step_by(2).copied().collect();
        let f_minus: Vec<f64> = shaped.iter().skip(1).step_by(2).copied().collect();
        let (grad, _) = antithetic_estimate(&eps, &f_plus, &f_minus, sigma);
        state.optimizer.ascend(&mut state.mean, &grad);
        state.history.push(GenerationRecord {
            generation: g,
            sigma,
            best_fitness: finite.iter().copied().fold(f64::NAN, f64::max),
            mean_fitness: summary.map_or(f64::NAN, |s| s.mean),
            fitness_stderr: summary.map_or(f64::NAN, |s| s.stderr),
            non_finite: values.len() - finite.len(),
        });
        state.generation = g + 1;
        state.sigma = cfg.sigma_at(g + 1);
    }

    let (best, best_fitness) = match best {
        Some((c, f)) => (c, Some(f)),
        None => (zeta0.to_vec(), None),
    };
    Ok(EsOutcome {
        best,
        best_fitness,
        state,
    })
}

/// How one fitness value is obtained from a candidate loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitnessSpec {
    /// Independent inner training runs averaged per candidate.
    pub inner_seeds: usize,
    /// Monte Carlo episodes per value estimate when `exact` is false.
    pub eval_episodes: usize,
    /// Use the dynamic-programming value instead of sampled episodes.
    pub exact: bool,
}

impl Default for FitnessSpec {
    fn default() -> Self {
        Self {
            inner_seeds: 3,
            eval_episodes: 512,
            exact: true,
        }
    }
}

/// Value of a policy trained from scratch with a candidate objective.
#[derive(Clone, Debug)]
pub struct PreferenceFitness {
    pub dataset: Arc<PreferenceDataset>,
    pub env: ChainEnv,
    pub hyper: TrainerHyper,
    pub spec: FitnessSpec,
    pub temporal: bool,
}

impl PreferenceFitness {
    /// Mean value over `inner_seeds` training runs whose seeds descend from `seed`.
    pub fn evaluate_objective(&self, obj: &ObjectiveSpec, seed: u64) -> Result<f64> {
        if self.spec.inner_seeds == 0 {
            return Err(Error::Config("fitness needs at least one inner seed".into()));
        }
        let mut total = 0.0;
        for k in 0..self.spec.inner_seeds {
            let run_seed = derive_seed(seed, "inner-run", &[k as u64]);
            let init = TabularPolicy::random_init(
                &mut stream(run_seed, "policy-init", &[]),
                self.env.num_states(),
                self.env.num_actions(),
            );
            let hyper = TrainerHyper {
                seed: run_seed,
                ..self.hyper.clone()
            };
            let (policy, _) = train(&self.dataset, obj, &hyper, &init, None)?;
            let mode = if self.spec.exact {
                ValueMode::Exact
            } else {
                ValueMode::MonteCarlo {
                    episodes: self.spec.eval_episodes,
                    seed: derive_seed(run_seed, "evaluation", &[]),
                }
            };
            total += self.env.policy_value(&policy, mode)?.mean;
        }
        Ok(total / self.spec.inner_seeds as f64)
    }

    pub fn evaluate_params(&self, params: &LossNetParams, seed: u64) -> Result<f64> {
        let obj = ObjectiveSpec::from_loss_net(params, self.hyper.lambda).with_temporal(self.temporal);
        self.evaluate_objective(&obj, seed)
    }
}

impl Fitness for PreferenceFitness {
    fn evaluate(&self, candidate: &[f64], ctx: &EvalContext) -> f64 {
        LossNetParams::from_flat(self.temporal, candidate)
            .and_then(|p| self.evaluate_params(&p, ctx.seed))
            .unwrap_or(f64::NAN)
    }
}

/// ES over loss-network parameters with feasibility projection.
pub fn evolve_loss_net(
    cfg: &EsConfig,
    zeta0: &LossNetParams,
    fitness: &PreferenceFitness,
) -> Result<(LossNetParams, EsOutcome)> {
    let temporal = zeta0.temporal;
    let project = move |flat: &[f64]| {
        LossNetParams::from_flat(temporal, flat)
            .map(|p| p.project().to_flat())
            .unwrap_or_else(|_| flat.to_vec())
    };
    let outcome = evolve(cfg, &zeta0.to_flat(), project, fitness)?;
    let best = LossNetParams::from_flat(temporal, &outcome.best)?;
    Ok((best, outcome))
}
