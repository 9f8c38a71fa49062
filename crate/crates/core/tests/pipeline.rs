use std::sync::Arc;

use mirror_po::analysis::{landscape, GridSpec};
use mirror_po::data::{self, generate_dataset, DatasetMode, GenerationRequest, JudgeConfig, PreferenceDataset};
use mirror_po::env::{EnvSpec, ValueMode};
use mirror_po::es::{evolve_loss_net, EsConfig, FitnessSpec, PreferenceFitness};
use mirror_po::loss_net::LossNetParams;
use mirror_po::objective::ObjectiveSpec;
use mirror_po::policy::TabularPolicy;
use mirror_po::rng::stream;
use mirror_po::trainer::{replay_trace, train, TrainerHyper};

fn spec() -> EnvSpec {
    EnvSpec {
        states: 4,
        horizon: 8,
        ..EnvSpec::default()
    }
}

fn dataset(mode: DatasetMode, seed: u64) -> PreferenceDataset {
    let spec = spec();
    let env = spec.build().unwrap();
    let expert = env.make_reference_policy(1.0).unwrap();
    let reference = env.make_reference_policy(0.43).unwrap();
    let gap = 8.0 * (1.0 - 0.43);
    generate_dataset(&GenerationRequest {
        env_spec: &spec,
        expert: &expert,
        expert_skill: Some(1.0),
        reference: &reference,
        reference_skill: Some(0.43),
        size: 128,
        mode,
        judge: JudgeConfig::from_accuracy(0.95, gap).unwrap(),
        seed,
    })
    .unwrap()
}

#[test]
fn saved_dataset_trains_every_objective_kind() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.txt");
    data::save(&dataset(DatasetMode::Base, 1), &path).unwrap();
    let d = data::load(&path).unwrap();
    let env = d.provenance.env.build().unwrap();
    let reference = TabularPolicy::new(4, 2, d.provenance.reference.logits.clone()).unwrap();
    let init = TabularPolicy::random_init(&mut stream(3, "init", &[]), 4, 2);
    let start = env.policy_value(&init, ValueMode::Exact).unwrap().mean;

    let net_path = dir.path().join("orpo.lossnet");
    LossNetParams::orpo_equivalent(false).save(&net_path).unwrap();
    let specs = [
        "orpo".to_string(),
        "dpo".to_string(),
        format!("gen_orpo:{}", net_path.display()),
        "gen_dpo:euclidean".to_string(),
    ];
    let hyper = TrainerHyper::default();
    let mut values = Vec::new();
    for s in &specs {
        let obj = ObjectiveSpec::parse(s, 0.1, hyper.lambda, None).unwrap();
        let (policy, trace) = train(&d, &obj, &hyper, &init, Some(&reference)).unwrap();
        let v = env.policy_value(&policy, ValueMode::Exact).unwrap().mean;
        assert!(v > start + 1.0, "{s}: {start} -> {v}");
        assert_eq!(trace.points.len(), 12 * 64 * 2);
        values.push(v);
    }
    // The loss-net checkpoint with zero kernels trains like ORPO.
    assert!((values[0] - values[2]).abs() < 1e-9, "{values:?}");
}

#[test]
fn replayed_trace_lies_inside_the_default_grid() {
    let d = dataset(DatasetMode::Base, 2);
    let init = TabularPolicy::random_init(&mut stream(0, "init", &[]), 4, 2);
    let (_, trace) = train(&d, &ObjectiveSpec::orpo(0.5), &TrainerHyper::default(), &init, None).unwrap();
    let points = replay_trace(&trace).unwrap();
    assert!(points.len() <= 1000);
    assert!(points.windows(2).all(|w| w[0].2 <= w[1].2));
    let grid = GridSpec::default();
    assert!(points
        .iter()
        .all(|&(w, l, _)| w >= grid.lo && w <= grid.hi && l >= grid.lo && l <= grid.hi));
    let g = landscape(&ObjectiveSpec::orpo(0.5), &grid, 0.0, None).unwrap();
    assert!(g.grad_w.iter().flatten().all(|v| v.is_finite() && *v >= 0.0));
}

fn fitness() -> PreferenceFitness {
    PreferenceFitness {
        dataset: Arc::new(dataset(DatasetMode::Shuffled, 4)),
        env: spec().build().unwrap(),
        hyper: TrainerHyper {
            epochs: 2,
            ..TrainerHyper::default()
        },
        spec: FitnessSpec {
            inner_seeds: 1,
            ..FitnessSpec::default()
        },
        temporal: false,
    }
}

#[test]
fn evolution_does_not_depend_on_the_worker_count() {
    let cfg = EsConfig {
        population: 4,
        generations: 2,
        seed: 9,
        ..EsConfig::default()
    };
    let f = fitness();
    let z0 = LossNetParams::orpo_equivalent(false);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| evolve_loss_net(&cfg, &z0, &f).unwrap())
    };
    let (best_a, a) = run(1);
    let (best_b, b) = run(3);
    assert_eq!(best_a, best_b);
    assert_eq!(a.state.mean, b.state.mean);
    let fits = |o: &mirror_po::es::EsOutcome| {
        o.state
            .history
            .iter()
            .map(|r| (r.best_fitness.to_bits(), r.mean_fitness.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(fits(&a), fits(&b));
    assert!(best_a.is_feasible());
}

#[test]
fn orpo_equivalent_fitness_matches_orpo() {
    let f = fitness();
    let orpo = f.evaluate_objective(&ObjectiveSpec::orpo(0.5), 11).unwrap();
    let learned = f.evaluate_params(&LossNetParams::orpo_equivalent(false), 11).unwrap();
    assert!((orpo - learned).abs() < 1e-9, "{orpo} vs {learned}");
}
