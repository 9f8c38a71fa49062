use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mirror_po::data::DatasetMode;
use mirror_po::policy::ProbNormalization;
use mirror_po_cli::commands::{execute, CommandKind, Invocation, DATASET_FILE, LANDSCAPE_FILE};
use mirror_po_cli::config::{ExperimentConfig, JudgeSpec};
use mirror_po_cli::manifest::{persist, rerun, OutputTarget};
use mirror_po_cli::{init_workers, CliError, CliResult};

/// Preference optimization with learned mirror maps on a chain environment.
#[derive(Debug, Parser)]
#[command(name = "mirror-po", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a preference dataset.
    GenData(GenDataArgs),
    /// Train policies on a dataset, one run per seed.
    Train(TrainArgs),
    /// Search loss-network parameters with evolution strategies.
    Evolve(EvolveArgs),
    /// Export the absolute loss-gradient grid of an objective.
    Landscape(LandscapeArgs),
    /// Check that regularized optima have a constant implicit reward per start state.
    VerifyTheorem(VerifyArgs),
    /// Value of a policy checkpoint.
    Eval(EvalArgs),
    /// Re-run a manifest and confirm its artifacts are reproduced byte for byte.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// base or shuffled.
    #[arg(long)]
    mode: Option<String>,
    /// Fraction of rankings to flip.
    #[arg(long)]
    noise: Option<f64>,
    /// Judge accuracy `q` at reward gap `gap`, written `q@gap`.
    #[arg(long, value_name = "Q@GAP")]
    judge_accuracy: Option<String>,
    /// Judge temperature, instead of an accuracy.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    expert_skill: Option<f64>,
    #[arg(long)]
    reference_skill: Option<f64>,
    /// Dataset file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ObjectiveArgs {
    /// orpo, dpo, gen_orpo:<path> or gen_dpo:<path | potential>.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Feed training progress to learned objectives.
    #[arg(long)]
    temporal: Option<bool>,
}

impl ObjectiveArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(o) = &self.objective {
            cfg.objective.spec = o.clone();
        }
        if let Some(b) = self.beta {
            cfg.objective.beta = b;
        }
        if let Some(l) = self.lambda {
            cfg.trainer.lambda = l;
        }
        if let Some(t) = self.temporal {
            cfg.objective.temporal = Some(t);
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    objective: ObjectiveArgs,
    #[arg(long)]
    data: PathBuf,
    /// Number of independent runs.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Feed raw trajectory probabilities instead of per-step geometric means.
    #[arg(long)]
    raw_prob: bool,
    /// Output directory (defaults to the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvolveArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory (defaults to the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LandscapeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    objective: ObjectiveArgs,
    /// Training progress in [0, 1].
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lo: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    hi: Option<f64>,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// neg_entropy, euclidean, log_odds or learned:<path>.
    #[arg(long)]
    potential: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    reference_skill: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Directory for the per-start report and manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    policy: PathBuf,
    /// Monte Carlo episodes; 0 computes the exact value.
    #[arg(long, default_value_t = 0)]
    episodes: usize,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Directory for the value report and manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RerunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory receiving the regenerated artifacts.
    #[arg(long)]
    out: PathBuf,
}

fn run_and_persist(inv: &Invocation, target: Option<OutputTarget>) -> CliResult<()> {
    let run = execute(inv)?;
    if let Some(target) = target {
        let manifest = persist(inv, &run, &target)?;
        println!(
            "{} manifest={}",
            run.summary,
            target.dir.join(&manifest.file_name).display()
        );
    } else {
        println!("{}", run.summary);
    }
    match run.failed_check {
        Some(msg) => Err(CliError::Check(msg)),
        None => Ok(()),
    }
}

fn out_dir(out: Option<PathBuf>, cfg: &ExperimentConfig) -> OutputTarget {
    OutputTarget::directory(out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir)))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => {
            let mut cfg = a.common.load()?;
            if let Some(m) = &a.mode {
                cfg.dataset.mode = DatasetMode::parse(m)?;
            }
            if let Some(n) = a.noise {
                cfg.dataset.noise = n;
            }
            if let Some(s) = a.size {
                cfg.dataset.size = s;
            }
            if let Some(q) = &a.judge_accuracy {
                cfg.judge = JudgeSpec::from_accuracy_flag(q)?;
            }
            if let Some(eta) = a.eta {
                cfg.judge = JudgeSpec {
                    eta: Some(eta),
                    ..Default::default()
                };
            }
            if let Some(q) = a.expert_skill {
                cfg.policies.expert_skill = q;
            }
            if let Some(q) = a.reference_skill {
                cfg.policies.reference_skill = q;
            }
            let inv = Invocation::new(CommandKind::GenData, cfg);
            run_and_persist(&inv, Some(OutputTarget::file(&a.out, DATASET_FILE)?))
        }
        Command::Train(a) => {
            let mut cfg = a.common.load()?;
            a.objective.apply(&mut cfg);
            if let Some(s) = a.seeds {
                cfg.trainer.seeds = s;
            }
            if let Some(e) = a.epochs {
                cfg.trainer.epochs = e;
            }
            if a.raw_prob {
                cfg.trainer.normalization = ProbNormalization::Raw;
            }
            let target = out_dir(a.out, &cfg);
            let mut inv = Invocation::new(CommandKind::Train, cfg);
            inv.data = Some(absolute(&a.data));
            run_and_persist(&inv, Some(target))
        }
        Command::Evolve(a) => {
            let cfg = a.common.load()?;
            let target = out_dir(a.out, &cfg);
            run_and_persist(&Invocation::new(CommandKind::Evolve, cfg), Some(target))
        }
        Command::Landscape(a) => {
            let mut cfg = a.common.load()?;
            a.objective.apply(&mut cfg);
            let l = &mut cfg.landscape;
            if let Some(t) = a.t {
                l.t = t;
            }
            if let Some(p) = a.points {
                l.points = p;
            }
            if let Some(lo) = a.lo {
                l.lo = lo;
            }
            if let Some(hi) = a.hi {
                l.hi = hi;
            }
            let target = OutputTarget::file(&a.out, LANDSCAPE_FILE)?;
            run_and_persist(&Invocation::new(CommandKind::Landscape, cfg), Some(target))
        }
        Command::VerifyTheorem(a) => {
            let mut cfg = a.common.load()?;
            let v = &mut cfg.verify;
            if let Some(p) = a.potential {
                v.potential = p;
            }
            if let Some(b) = a.beta {
                v.beta = b;
            }
            if let Some(s) = a.states {
                v.states = s;
            }
            if let Some(x) = a.actions {
                v.actions = x;
            }
            if let Some(h) = a.horizon {
                v.horizon = h;
            }
            if let Some(q) = a.reference_skill {
                v.reference_skill = q;
            }
            if let Some(t) = a.tolerance {
                v.tolerance = t;
            }
            let target = a.out.map(OutputTarget::directory);
            run_and_persist(&Invocation::new(CommandKind::VerifyTheorem, cfg), target)
        }
        Command::Eval(a) => {
            let mut cfg = a.common.load()?;
            if let Some(s) = a.states {
                cfg.env.states = s;
            }
            if let Some(h) = a.horizon {
                cfg.env.horizon = h;
            }
            let target = a.out.map(OutputTarget::directory);
            let mut inv = Invocation::new(CommandKind::Eval, cfg);
            inv.policy = Some(absolute(&a.policy));
            inv.episodes = a.episodes;
            run_and_persist(&inv, target)
        }
        Command::Rerun(a) => {
            let (manifest, run) = rerun(&a.manifest, &a.out)?;
            println!(
                "reproduced={} command={} {}",
                manifest.artifacts.len(),
                manifest.invocation.command.name(),
                run.summary
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            let err = CliError::Usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{}", err.one_line());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    let result = init_workers().and_then(|()| dispatch(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.one_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
