use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use mirror_po::analysis::{asymmetry_fraction, landscape, verify_mirror_solution, GridSpec};
use mirror_po::autodiff::gradient;
use mirror_po::data::{
    corrupt_noise, generate_dataset, DatasetMode, GenerationRequest, JudgeConfig, PreferenceDataset,
};
use mirror_po::env::{mean_and_stderr, ChainEnv, EnvSpec, ValueMode};
use mirror_po::es::{
    evolve, evolve_loss_net, sample_perturbations, EsConfig, EvalContext, FitnessSpec, PreferenceFitness,
};
use mirror_po::loss_net::{forward_generic, Activation, LossNetParams, LossNetwork, ACTIVATION_EPS, HIDDEN_UNITS};
use mirror_po::objective::{ObjectiveSpec, SftMap};
use mirror_po::policy::TabularPolicy;
use mirror_po::potential::{bregman, OmegaPotential, SimplexPoint};
use mirror_po::rng::{derive_seed, stream};
use mirror_po::trainer::{train, TrainerHyper};
use mirror_po_cli::manifest::Manifest;
use rand::Rng;
use rayon::prelude::*;

/// Set to make any failing criterion fail the process.
const STRICT_ENV: &str = "ACCEPTANCE_STRICT";

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn within_fd(a: f64, b: f64) -> bool {
    (a - b).abs() <= (1e-4 * a.abs().max(b.abs())).max(1e-7)
}

fn random_feasible<R: Rng>(rng: &mut R, temporal: bool, scale: f64) -> LossNetParams {
    let flat: Vec<f64> = (0..LossNetParams::dimension(temporal))
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    LossNetParams::from_flat(temporal, &flat).unwrap().project()
}

// 1. Recovery identities against hand-written ORPO and DPO formulas.
fn recovery() -> Outcome {
    let mut rng = stream(1, "acceptance-recovery", &[]);
    let log_psi = Arc::new(LossNetParams::orpo_equivalent(false).psi);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (p_w, p_l): (f64, f64) = (rng.random_range(1e-3..0.999), rng.random_range(1e-3..0.999));
        let (r_w, r_l): (f64, f64) = (rng.random_range(1e-3..0.999), rng.random_range(1e-3..0.999));
        let lambda = rng.random_range(0.0..2.0);
        let beta = rng.random_range(0.01..5.0);
        let (lw, ll, reference) = (p_w.ln(), p_l.ln(), Some((r_w.ln(), r_l.ln())));

        let logit = |p: f64| p.ln() - (1.0 - p).ln();
        let orpo_oracle = -(p_w.ln() + lambda * log_sigmoid(logit(p_w) - logit(p_l)));
        let orpo = ObjectiveSpec::orpo(lambda).loss(lw, ll, None, 0.0).unwrap();
        let gen_orpo = ObjectiveSpec::gen_orpo(SftMap::Log, OmegaPotential::log_odds(), lambda)
            .loss(lw, ll, None, 0.0)
            .unwrap();

        let dpo_oracle = -log_sigmoid(beta * ((p_w / r_w).ln() - (p_l / r_l).ln()));
        let dpo = ObjectiveSpec::dpo(beta).loss(lw, ll, reference, 0.0).unwrap();
        let gen_dpo_log = ObjectiveSpec::gen_dpo(OmegaPotential::learned(log_psi.clone()), beta)
            .loss(lw, ll, reference, 0.0)
            .unwrap();
        let gen_dpo_ent = ObjectiveSpec::gen_dpo(OmegaPotential::neg_entropy(), beta)
            .loss(lw, ll, reference, 0.0)
            .unwrap();

        for e in [
            rel(gen_orpo, orpo),
            rel(orpo, orpo_oracle),
            rel(gen_orpo, orpo_oracle),
            rel(gen_dpo_log, dpo),
            rel(gen_dpo_ent, dpo),
            rel(dpo, dpo_oracle),
            rel(gen_dpo_log, dpo_oracle),
        ] {
            worst = worst.max(e);
        }
    }
    Outcome::new(worst <= 1e-12, format!("inputs=1000 max_rel_err={worst:.3e} tol=1e-12"))
}

// 2. Bregman divergences of the closed-form potentials.
fn bregman_equivalences() -> Outcome {
    let mut rng = stream(2, "acceptance-bregman", &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..8);
        let x = SimplexPoint::random(&mut rng, n);
        let y = SimplexPoint::random(&mut rng, n);
        let kl: f64 = x
            .probs()
            .iter()
            .zip(y.probs())
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, b)| a * (a / b).ln())
            .sum();
        let sq: f64 = x.probs().iter().zip(y.probs()).map(|(a, b)| (a - b) * (a - b)).sum();
        worst = worst.max(rel(bregman(&OmegaPotential::neg_entropy(), &x, &y).unwrap(), kl));
        worst = worst.max(rel(bregman(&OmegaPotential::euclidean(), &x, &y).unwrap(), sq));
    }
    Outcome::new(worst <= 1e-9, format!("pairs=1000 max_rel_err={worst:.3e} tol=1e-9"))
}

struct TrajectoryOracle {
    rewards: Vec<f64>,
    reference: Vec<f64>,
}

fn enumerate(env: &ChainEnv, policy: &TabularPolicy, s0: usize, actions: &[Vec<usize>]) -> TrajectoryOracle {
    let mut rewards = Vec::new();
    let mut reference = Vec::new();
    for seq in actions {
        let (mut s, mut r, mut p) = (s0, 0.0, 1.0);
        for &a in seq {
            r += env.reward(s, a);
            p *= policy.distribution(s).probs()[a];
            s = env.next_state(s, a);
        }
        rewards.push(r);
        reference.push(p);
    }
    TrajectoryOracle { rewards, reference }
}

// 3. Regularized optima on tiny random MDPs.
fn mirror_solution() -> Outcome {
    let mut rng = stream(3, "acceptance-theorem", &[]);
    let mut spread: f64 = 0.0;
    let mut softmax_err: f64 = 0.0;
    let mut quadratic_err: f64 = 0.0;
    for _ in 0..5 {
        let states = rng.random_range(1..=2);
        let horizon = rng.random_range(1..=2);
        let rewards: Vec<f64> = (0..states * 2).map(|_| rng.random_range(0.0..1.0)).collect();
        let env = ChainEnv::new(states, 2, horizon, rewards).unwrap();
        let rows: Vec<Vec<f64>> = (0..states)
            .map(|_| {
                let p = rng.random_range(0.3..0.7);
                vec![p, 1.0 - p]
            })
            .collect();
        let reference = TabularPolicy::from_probabilities(&rows).unwrap();

        let beta = rng.random_range(0.5..2.0);
        let report = verify_mirror_solution(&env, &OmegaPotential::neg_entropy(), beta, &reference).unwrap();
        spread = spread.max(report.max_spread);
        for start in &report.starts {
            let o = enumerate(&env, &reference, start.s0, &start.actions);
            let weights: Vec<f64> = o
                .reference
                .iter()
                .zip(&o.rewards)
                .map(|(q, r)| q * (r / beta).exp())
                .collect();
            let z: f64 = weights.iter().sum();
            for (w, p) in weights.iter().zip(&start.solution) {
                softmax_err = softmax_err.max((w / z - p).abs());
            }
        }

        let beta = rng.random_range(15.0..20.0);
        let report = verify_mirror_solution(&env, &OmegaPotential::euclidean(), beta, &reference).unwrap();
        spread = spread.max(report.max_spread);
        for start in &report.starts {
            let o = enumerate(&env, &reference, start.s0, &start.actions);
            let mean_r = o.rewards.iter().sum::<f64>() / o.rewards.len() as f64;
            for ((q, r), p) in o.reference.iter().zip(&o.rewards).zip(&start.solution) {
                quadratic_err = quadratic_err.max((q + (r - mean_r) / (2.0 * beta) - p).abs());
            }
        }
    }
    Outcome::new(
        spread <= 1e-4 && softmax_err <= 1e-6 && quadratic_err <= 1e-6,
        format!("mdps=5 max_spread={spread:.3e} softmax_err={softmax_err:.3e} quadratic_err={quadratic_err:.3e}"),
    )
}

/// Smallest distance, in pre-activation units, from any active kinked unit to its kink.
fn pre_activation_kink_gap(net: &LossNetwork, x: f64, t: f64) -> f64 {
    let mut best = f64::INFINITY;
    for u in 0..HIDDEN_UNITS {
        if net.output_weights[u] == 0.0 {
            continue;
        }
        let kinks: &[f64] = match Activation::of_unit(u) {
            Activation::SquarePos | Activation::SqrtPos | Activation::CbrtPos => &[0.0],
            Activation::LogPos => &[ACTIVATION_EPS],
            Activation::LogitClip => &[ACTIVATION_EPS, 1.0 - ACTIVATION_EPS],
            _ => &[],
        };
        let z = net.input_weights[u] * x + net.progress_weights[u] * x * t + net.biases[u];
        for k in kinks {
            best = best.min((z - k).abs());
        }
    }
    best
}

fn flat_net(net: &LossNetwork) -> Vec<f64> {
    let mut v = vec![net.residual_coef];
    v.extend(&net.input_weights);
    v.extend(&net.progress_weights);
    v.extend(&net.output_weights);
    v.extend(&net.biases);
    v
}

// 4. Gradients against central differences.
fn gradients() -> Outcome {
    const H: f64 = 1e-5;
    let mut rng = stream(4, "acceptance-gradients", &[]);
    let (mut checked, mut resampled, mut failures) = (0usize, 0usize, Vec::new());
    let mut point = 0usize;
    while point < 1000 {
        let params = random_feasible(&mut rng, true, 0.5);
        let lambda = rng.random_range(0.1..1.0);
        let beta = rng.random_range(0.05..2.0);
        let objectives = [
            ObjectiveSpec::orpo(lambda),
            ObjectiveSpec::dpo(beta),
            ObjectiveSpec::gen_dpo(OmegaPotential::neg_entropy(), beta),
            ObjectiveSpec::gen_dpo(OmegaPotential::euclidean(), beta),
            ObjectiveSpec::gen_dpo(OmegaPotential::learned(Arc::new(params.phi_inv.clone())), beta).with_temporal(true),
            ObjectiveSpec::from_loss_net(&params, lambda).with_temporal(true),
        ];
        let (lw, ll): (f64, f64) = (rng.random_range(-6.0..-0.01), rng.random_range(-6.0..-0.01));
        let reference = Some((rng.random_range(-4.0..-0.05), rng.random_range(-4.0..-0.05)));
        let t: f64 = rng.random_range(0.0..1.0);
        let x: f64 = rng.random_range(0.02..0.98);

        let near_kink = [lw, ll, x.ln()].iter().any(|lp| {
            [&params.psi, &params.phi_inv]
                .iter()
                .any(|n| n.kink_distance(lp.exp(), t) < 1e-3 * lp.exp())
        }) || [&params.psi, &params.phi_inv]
            .iter()
            .any(|n| pre_activation_kink_gap(n, x, t) < 1e-3);
        if near_kink {
            resampled += 1;
            continue;
        }
        point += 1;

        for obj in &objectives {
            let (_, gw, gl) = obj.loss_and_log_gradient(lw, ll, reference, t).unwrap();
            let f = |a: f64, b: f64| obj.loss(a, b, reference, t).unwrap();
            let fw = (f(lw + H, ll) - f(lw - H, ll)) / (2.0 * H);
            let fl = (f(lw, ll + H) - f(lw, ll - H)) / (2.0 * H);
            checked += 2;
            if !within_fd(gw, fw) || !within_fd(gl, fl) {
                failures.push(format!(
                    "{} at ({lw:.4}, {ll:.4}, t={t:.3}): ({gw}, {gl}) vs ({fw}, {fl})",
                    obj.id()
                ));
            }
        }

        for net in [&params.psi, &params.phi_inv] {
            let (_, d) = net.value_and_derivative(x, t);
            let fd = (net.apply(x + H, t) - net.apply(x - H, t)) / (2.0 * H);
            checked += 1;
            if !within_fd(d, fd) {
                failures.push(format!("d/dx at x={x}: {d} vs {fd}"));
            }

            let h = HIDDEN_UNITS;
            let flat = flat_net(net);
            let eval = |v: &[f64]| {
                forward_generic(
                    net.residual,
                    v[0],
                    &v[1..1 + h],
                    &v[1 + h..1 + 2 * h],
                    &v[1 + 2 * h..1 + 3 * h],
                    &v[1 + 3 * h..],
                    x,
                    t,
                )
            };
            let (_, g) = gradient(&flat, |v| {
                let tape = v[0].tape();
                forward_generic(
                    net.residual,
                    v[0],
                    &v[1..1 + h],
                    &v[1 + h..1 + 2 * h],
                    &v[1 + 2 * h..1 + 3 * h],
                    &v[1 + 3 * h..],
                    tape.constant(x),
                    tape.constant(t),
                )
            });
            let mut probe = flat.clone();
            for (i, gi) in g.iter().enumerate() {
                probe[i] = flat[i] + H;
                let up = eval(&probe);
                probe[i] = flat[i] - H;
                let down = eval(&probe);
                probe[i] = flat[i];
                let fd = (up - down) / (2.0 * H);
                checked += 1;
                if !within_fd(*gi, fd) {
                    failures.push(format!("d/dζ[{i}] at x={x}: {gi} vs {fd}"));
                }
            }
        }
    }
    let mut detail = format!(
        "points=1000 comparisons={checked} resampled_near_kinks={resampled} failures={}",
        failures.len()
    );
    if let Some(first) = failures.first() {
        detail.push_str(&format!(" first: {first}"));
    }
    Outcome::new(failures.is_empty(), detail)
}

// 5. Monotone networks and the feasibility projection.
fn monotonicity() -> Outcome {
    let grid: Vec<f64> = (0..24).map(|i| 1e-4 + (1.0 - 2e-4) * i as f64 / 23.0).collect();
    let violations: usize = (0..10_000u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(5, "acceptance-monotone", &[k]);
            let params = if k % 2 == 0 {
                random_feasible(&mut rng, true, 1.0)
            } else {
                LossNetParams::init(&mut rng, true)
            };
            let mut bad = 0;
            for net in [&params.psi, &params.phi_inv] {
                for t in [0.0, 0.5, 1.0] {
                    let values: Vec<f64> = grid.iter().map(|&x| net.apply(x, t)).collect();
                    bad += values.windows(2).filter(|w| w[1] < w[0]).count();
                    bad += grid.iter().filter(|&&x| net.value_and_derivative(x, t).1 < 0.0).count();
                }
            }
            bad
        })
        .sum();

    let projection_failures: usize = (0..10_000u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(5, "acceptance-projection", &[k]);
            let temporal = k % 2 == 0;
            let flat = sample_perturbations(&mut rng, 1, LossNetParams::dimension(temporal)).remove(0);
            let raw = LossNetParams::from_flat(temporal, &flat).unwrap();
            let once = raw.project();
            usize::from(raw.is_feasible() || !once.is_feasible() || once.project() != once)
        })
        .sum();
    Outcome::new(
        violations == 0 && projection_failures == 0,
        format!("nets=10000 monotonicity_violations={violations} projection_failures={projection_failures}/10000"),
    )
}

// 6. Judge temperatures and empirical preference rates.
fn judge_calibration() -> Outcome {
    const GAP: f64 = 300.0;
    const SAMPLES: usize = 20_000;
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, (accuracy, eta_expected)) in [(0.95, 101.89), (0.85, 172.95), (0.75, 273.07)].into_iter().enumerate() {
        let judge = JudgeConfig::from_accuracy(accuracy, GAP).unwrap();
        pass &= (judge.eta - eta_expected).abs() <= 0.01;
        let mut rng = stream(6, "acceptance-judge", &[k as u64]);
        let mut worst_z: f64 = 0.0;
        for gap in [0.0, 50.0, 150.0, 300.0] {
            let p = sigmoid(gap / judge.eta);
            let hits = (0..SAMPLES).filter(|_| judge.prefers(gap, 0.0, &mut rng)).count();
            let rate = hits as f64 / SAMPLES as f64;
            let se = (p * (1.0 - p) / SAMPLES as f64).sqrt();
            let z = (rate - p).abs() / se;
            worst_z = worst_z.max(z);
            pass &= z <= 3.0;
        }
        parts.push(format!("eta={:.2} max_z={worst_z:.2}", judge.eta));
    }
    Outcome::new(pass, parts.join(" "))
}

// 7. ES on the sphere.
fn es_sphere() -> Outcome {
    let mut norms = Vec::new();
    for seed in 0..10u64 {
        let cfg = EsConfig {
            population: 64,
            generations: 200,
            seed,
            ..EsConfig::default()
        };
        let v = sample_perturbations(&mut stream(seed, "acceptance-sphere", &[]), 1, 10).remove(0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let start: Vec<f64> = v.iter().map(|x| x / n).collect();
        let sphere = |z: &[f64], _: &EvalContext| -z.iter().map(|x| x * x).sum::<f64>();
        let out = evolve(&cfg, &start, |z| z.to_vec(), &sphere).unwrap();
        norms.push(out.state.mean.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    let good = norms.iter().filter(|&&n| n <= 0.1).count();
    let worst = norms.iter().copied().fold(0.0, f64::max);
    Outcome::new(good >= 9, format!("seeds_within_0.1={good}/10 worst_norm={worst:.4}"))
}

struct ChainSetup {
    spec: EnvSpec,
    env: ChainEnv,
    expert: TabularPolicy,
    reference: TabularPolicy,
    expert_value: f64,
    judge: JudgeConfig,
}

fn chain_setup() -> ChainSetup {
    let spec = EnvSpec::default();
    let env = spec.build().unwrap();
    let expert = env.make_reference_policy(1.0).unwrap();
    let reference = env.make_reference_policy(0.43).unwrap();
    let expert_value = env.policy_value(&expert, ValueMode::Exact).unwrap().mean;
    let reference_value = env.policy_value(&reference, ValueMode::Exact).unwrap().mean;
    let judge = JudgeConfig::from_accuracy(0.95, expert_value - reference_value).unwrap();
    ChainSetup {
        spec,
        env,
        expert,
        reference,
        expert_value,
        judge,
    }
}

fn chain_dataset(c: &ChainSetup, mode: DatasetMode, seed: u64) -> PreferenceDataset {
    generate_dataset(&GenerationRequest {
        env_spec: &c.spec,
        expert: &c.expert,
        expert_skill: Some(1.0),
        reference: &c.reference,
        reference_skill: Some(0.43),
        size: 512,
        mode,
        judge: c.judge,
        seed,
    })
    .unwrap()
}

// 8. Clean, noisy and shuffled ORPO runs on the chain.
fn trend_replication() -> Outcome {
    const ROOT: u64 = 0;
    let c = chain_setup();
    let runs: Vec<[f64; 3]> = (0..25u64)
        .into_par_iter()
        .map(|i| {
            let data_seed = derive_seed(ROOT, "dataset", &[i]);
            let clean = chain_dataset(&c, DatasetMode::Base, data_seed);
            let noisy = corrupt_noise(&clean, 0.3, derive_seed(ROOT, "noise", &[i])).unwrap();
            let shuffled = chain_dataset(&c, DatasetMode::Shuffled, data_seed);
            let run_seed = derive_seed(ROOT, "train", &[i]);
            let init = TabularPolicy::random_init(&mut stream(run_seed, "policy-init", &[]), c.env.num_states(), 2);
            let hyper = TrainerHyper {
                seed: run_seed,
                ..TrainerHyper::default()
            };
            let value = |d: &PreferenceDataset| {
                let (policy, _) = train(d, &ObjectiveSpec::orpo(hyper.lambda), &hyper, &init, None).unwrap();
                c.env.policy_value(&policy, ValueMode::Exact).unwrap().mean
            };
            [value(&clean), value(&noisy), value(&shuffled)]
        })
        .collect();
    let column = |k: usize| mean_and_stderr(&runs.iter().map(|r| r[k]).collect::<Vec<_>>());
    let (clean, noisy, shuffled) = (column(0), column(1), column(2));
    let reach = clean.mean / c.expert_value;
    let degradation = 1.0 - noisy.mean / clean.mean;
    let separated = shuffled.mean + 2.0 * shuffled.stderr < clean.mean - 2.0 * clean.stderr
        || shuffled.mean - 2.0 * shuffled.stderr > clean.mean + 2.0 * clean.stderr;
    let (a, b) = (reach >= 0.95, degradation >= 0.20);
    let mark = |ok: bool| if ok { "pass" } else { "fail" };
    Outcome::new(
        a && b && separated,
        format!(
            "(a) clean={:.3}±{:.3} expert={:.5} reach={:.1}% [{}] (b) noisy={:.3}±{:.3} degradation={:.1}% [{}] (c) shuffled={:.3}±{:.3} [{}]",
            clean.mean,
            clean.stderr,
            c.expert_value,
            100.0 * reach,
            mark(a),
            noisy.mean,
            noisy.stderr,
            100.0 * degradation,
            mark(b),
            shuffled.mean,
            shuffled.stderr,
            mark(separated),
        ),
    )
}

// 9. Short loss-network search from the ORPO-equivalent start.
fn discovery_smoke() -> Outcome {
    let c = chain_setup();
    let fitness = PreferenceFitness {
        dataset: Arc::new(chain_dataset(&c, DatasetMode::Shuffled, 0)),
        env: c.env.clone(),
        hyper: TrainerHyper::default(),
        spec: FitnessSpec::default(),
        temporal: false,
    };
    let baseline: Vec<f64> = (0..16u64)
        .into_par_iter()
        .map(|s| fitness.evaluate_objective(&ObjectiveSpec::orpo(0.5), s).unwrap())
        .collect();
    let base = mean_and_stderr(&baseline);
    let cfg = EsConfig {
        population: 16,
        generations: 20,
        seed: 0,
        ..EsConfig::default()
    };
    let (_, outcome) = evolve_loss_net(&cfg, &LossNetParams::orpo_equivalent(false), &fitness).unwrap();
    let best = outcome.best_fitness.unwrap();
    let g0 = &outcome.state.history[0];
    let se = (base.stderr.powi(2) + g0.fitness_stderr.powi(2)).sqrt();
    let z = (g0.mean_fitness - base.mean) / se;
    let best_ok = best >= base.mean - base.stderr;
    let g0_ok = z.abs() <= 2.0;
    Outcome::new(
        best_ok && g0_ok,
        format!(
            "baseline={:.4}±{:.4} best={best:.4} [{}] gen0_mean={:.4}±{:.4} z={z:.2} [{}]",
            base.mean,
            base.stderr,
            if best_ok { "pass" } else { "fail" },
            g0.mean_fitness,
            g0.fitness_stderr,
            if g0_ok { "pass" } else { "fail" },
        ),
    )
}

// 10. ORPO gradient landscape.
fn landscape_asymmetry() -> Outcome {
    const H: f64 = 1e-5;
    let obj = ObjectiveSpec::orpo(0.5);
    let grid = landscape(&obj, &GridSpec::default(), 0.0, None).unwrap();
    let fraction = asymmetry_fraction(&grid).unwrap();
    let f = |a: f64, b: f64| obj.loss(a, b, None, 0.0).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &lw) in grid.axis_w.iter().enumerate() {
        for (j, &ll) in grid.axis_l.iter().enumerate() {
            let fw = ((f(lw + H, ll) - f(lw - H, ll)) / (2.0 * H)).abs();
            let fl = ((f(lw, ll + H) - f(lw, ll - H)) / (2.0 * H)).abs();
            worst = worst.max((grid.grad_w[i][j] - fw).abs() / fw.max(1.0));
            worst = worst.max((grid.grad_l[i][j] - fl).abs() / fl.max(1.0));
        }
    }
    Outcome::new(
        fraction >= 0.95 && worst <= 1e-4,
        format!("asymmetric_pairs={:.2}% max_fd_err={worst:.3e}", 100.0 * fraction),
    )
}

fn mirror_po(args: &[&str], cwd: &Path, workers: Option<&str>) -> Result<String, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mirror-po"));
    cmd.args(args).current_dir(cwd);
    if let Some(w) = workers {
        cmd.env(mirror_po_cli::WORKERS_ENV, w);
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

const SMALL_CONFIG: &str = "seed = 7
[env]
states = 4
horizon = 8
[dataset]
size = 64
[trainer]
epochs = 2
seeds = 3
[es]
population = 4
generations = 2
inner_seeds = 1
";

// 11. Every command re-run from its manifest.
fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("small.toml"), SMALL_CONFIG).unwrap();
    let commands: [(&str, &[&str]); 10] = [
        (
            "data.txt.manifest.toml",
            &[
                "gen-data",
                "--config",
                "small.toml",
                "--noise",
                "0.3",
                "--out",
                "data.txt",
            ],
        ),
        (
            "shuf.txt.manifest.toml",
            &[
                "gen-data",
                "--config",
                "small.toml",
                "--mode",
                "shuffled",
                "--out",
                "shuf.txt",
            ],
        ),
        (
            "train/manifest.toml",
            &[
                "train",
                "--config",
                "small.toml",
                "--data",
                "data.txt",
                "--out",
                "train",
            ],
        ),
        (
            "dpo/manifest.toml",
            &[
                "train",
                "--config",
                "small.toml",
                "--data",
                "shuf.txt",
                "--objective",
                "dpo",
                "--out",
                "dpo",
            ],
        ),
        (
            "evolve/manifest.toml",
            &["evolve", "--config", "small.toml", "--out", "evolve"],
        ),
        (
            "learned/manifest.toml",
            &[
                "train",
                "--config",
                "small.toml",
                "--data",
                "data.txt",
                "--objective",
                "gen_orpo:evolve/best.lossnet",
                "--out",
                "learned",
            ],
        ),
        (
            "land.csv.manifest.toml",
            &["landscape", "--t", "0.5", "--points", "21", "--out", "land.csv"],
        ),
        (
            "verify/manifest.toml",
            &[
                "verify-theorem",
                "--potential",
                "euclidean",
                "--beta",
                "16",
                "--out",
                "verify",
            ],
        ),
        (
            "eval/manifest.toml",
            &[
                "eval",
                "--config",
                "small.toml",
                "--policy",
                "train/policies/policy-000.txt",
                "--out",
                "eval",
            ],
        ),
        (
            "eval-mc/manifest.toml",
            &[
                "eval",
                "--config",
                "small.toml",
                "--policy",
                "train/policies/policy-000.txt",
                "--episodes",
                "200",
                "--out",
                "eval-mc",
            ],
        ),
    ];
    let mut problems = Vec::new();
    let mut compared = 0usize;
    for (k, (manifest, args)) in commands.iter().enumerate() {
        if let Err(e) = mirror_po(args, p, None) {
            problems.push(e);
            continue;
        }
        let manifest_path = p.join(manifest);
        let rerun_dir = p.join(format!("rerun-{k}"));
        let rerun_arg = rerun_dir.display().to_string();
        // Reruns use a single worker to show the pool size does not matter.
        if let Err(e) = mirror_po(&["rerun", "--manifest", manifest, "--out", &rerun_arg], p, Some("1")) {
            problems.push(e);
            continue;
        }
        let recorded = Manifest::load(&manifest_path).unwrap();
        let origin: PathBuf = manifest_path.parent().unwrap().to_path_buf();
        for a in &recorded.artifacts {
            let before = std::fs::read(origin.join(&a.name)).unwrap();
            let after = std::fs::read(rerun_dir.join(&a.name)).unwrap();
            compared += 1;
            if before != after {
                problems.push(format!("{manifest}: {} differs", a.name));
            }
        }
    }
    let mut detail = format!(
        "commands={} artifacts_compared={compared} problems={}",
        commands.len(),
        problems.len()
    );
    if let Some(first) = problems.first() {
        detail.push_str(&format!(" first: {first}"));
    }
    Outcome::new(problems.is_empty(), detail)
}

fn main() -> ExitCode {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check, Option<Duration>); 11] = [
        ("recovery_identities", recovery, Some(Duration::from_secs(1))),
        (
            "bregman_equivalences",
            bregman_equivalences,
            Some(Duration::from_secs(1)),
        ),
        ("mirror_solution_oracle", mirror_solution, Some(Duration::from_secs(10))),
        ("gradient_correctness", gradients, Some(Duration::from_secs(10))),
        ("monotonicity_suite", monotonicity, Some(Duration::from_secs(30))),
        ("judge_calibration", judge_calibration, Some(Duration::from_secs(10))),
        ("es_sphere", es_sphere, Some(Duration::from_secs(60))),
        ("trend_replication", trend_replication, Some(Duration::from_secs(600))),
        ("discovery_smoke", discovery_smoke, Some(Duration::from_secs(1800))),
        (
            "landscape_asymmetry",
            landscape_asymmetry,
            Some(Duration::from_secs(10)),
        ),
        ("reproducibility", reproducibility, None),
    ];
    let mut failed = 0;
    for (k, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = budget.is_none_or(|b| elapsed <= b);
        let pass = outcome.pass && in_time;
        failed += usize::from(!pass);
        let budget = budget.map_or("none".to_string(), |b| format!("{}s", b.as_secs()));
        println!(
            "criterion {:>2} {name}: {} {} time={:.2}s budget={budget}",
            k + 1,
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64(),
        );
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 && std::env::var_os(STRICT_ENV).is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
