//! Bradley–Terry judging, preference dataset protocols and dataset files.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::stable_sigmoid;
use crate::env::{ChainEnv, EnvSpec, Trajectory};
use crate::error::{Error, Result};
use crate::policy::TabularPolicy;

/// Desk-scale dataset size for from-scratch training.
pub const DEFAULT_SIZE: usize = 512;
/// Desk-scale dataset size for fine-tuning.
pub const FINETUNE_SIZE: usize = 128;

const FILE_MAGIC: &str = "# preference-dataset";
const FILE_VERSION: u32 = 1;
const REWARD_DIGITS: usize = 12;

/// Stochastic ranker with temperature `η`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub eta: f64,
}

impl JudgeConfig {
    pub fn new(eta: f64) -> Result<Self> {
        if eta > 0.0 && eta.is_finite() {
            Ok(Self { eta })
        } else {
            Err(Error::Config(format!(
                "judge temperature must be positive and finite, got {eta}"
            )))
        }
    }

    /// Temperature under which a reward gap of `gap` is ranked correctly
    /// with probability `accuracy`: `η = gap / logit(accuracy)`.
    pub fn from_accuracy(accuracy: f64, gap: f64) -> Result<Self> {
        if !(accuracy > 0.5 && accuracy < 1.0) {
            return Err(Error::Config(format!(
                "judge accuracy must lie in (0.5, 1), got {accuracy}"
            )));
        }
        if !(gap > 0.0 && gap.is_finite()) {
            return Err(Error::Config(format!(
                "judge reference gap must be positive, got {gap}"
            )));
        }
        Self::new(gap / (accuracy / (1.0 - accuracy)).ln())
    }

    /// P(a preferred over b) = σ((r_a − r_b)/η).
    pub fn preference_probability(&self, r_a: f64, r_b: f64) -> f64 {
        stable_sigmoid((r_a - r_b) / self.eta)
    }

    /// Samples whether `a` is preferred.
    pub fn prefers<R: Rng + ?Sized>(&self, r_a: f64, r_b: f64, rng: &mut R) -> bool {
        rng.random::<f64>() < self.preference_probability(r_a, r_b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    /// Every row compares an expert rollout with a reference rollout.
    Base,
    /// 25% expert/expert, 50% expert/reference, 25% reference/reference.
    Shuffled,
}

impl DatasetMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "shuffled" => Ok(Self::Shuffled),
            other => Err(Error::Config(format!(
                "unknown dataset mode {other:?} (expected base or shuffled)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Shuffled => "shuffled",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Expert,
    Reference,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Self::Expert => "expert",
            Self::Reference => "reference",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "expert" => Some(Self::Expert),
            "reference" => Some(Self::Reference),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowMeta {
    pub chosen_source: Source,
    pub rejected_source: Source,
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceRow {
    pub s0: usize,
    pub chosen: Trajectory,
    pub rejected: Trajectory,
    pub meta: RowMeta,
}

impl PreferenceRow {
    fn swap(&mut self) {
        std::mem::swap(&mut self.chosen, &mut self.rejected);
        std::mem::swap(&mut self.meta.chosen_source, &mut self.meta.rejected_source);
        self.meta.flipped = !self.meta.flipped;
    }
}

/// A generating policy: its skill level when it has one, and its logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub skill: Option<f64>,
    pub logits: Vec<f64>,
}

impl PolicyRecord {
    pub fn of(policy: &TabularPolicy, skill: Option<f64>) -> Self {
        Self {
            skill,
            logits: policy.logits().to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub env: EnvSpec,
    pub expert: PolicyRecord,
    pub reference: PolicyRecord,
    pub eta: f64,
    pub mode: DatasetMode,
    pub size: usize,
    pub seed: u64,
    /// Label-noise passes applied after generation, in order.
    pub corruptions: Vec<Corruption>,
}

impl Provenance {
    /// Noise fraction of the most recent corruption pass, or 0.
    pub fn noise(&self) -> f64 {
        self.corruptions.last().map_or(0.0, |c| c.noise)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceDataset {
    pub rows: Vec<PreferenceRow>,
    pub provenance: Provenance,
}

impl PreferenceDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Counts of rows by unordered source pair: (expert/expert, mixed, reference/reference).
    pub fn source_pair_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for r in &self.rows {
            match (r.meta.chosen_source, r.meta.rejected_source) {
                (Source::Expert, Source::Expert) => counts.0 += 1,
                (Source::Reference, Source::Reference) => counts.2 += 1,
                _ => counts.1 += 1,
            }
        }
        counts
    }

    pub fn flipped_count(&self) -> usize {
        self.rows.iter().filter(|r| r.meta.flipped).count()
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug)]
pub struct GenerationRequest<'a> {
    pub env_spec: &'a EnvSpec,
    pub expert: &'a TabularPolicy,
    pub expert_skill: Option<f64>,
    pub reference: &'a TabularPolicy,
    pub reference_skill: Option<f64>,
    pub size: usize,
    pub mode: DatasetMode,
    pub judge: JudgeConfig,
    pub seed: u64,
}

/// Rolls out pairs of trajectories from a shared start state and lets the
/// judge orient each pair.
pub fn generate_dataset(req: &GenerationRequest<'_>) -> Result<PreferenceDataset> {
    let env = req.env_spec.build()?;
    env.check_policy(req.expert)?;
    env.check_policy(req.reference)?;
    if req.size == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    let mut rng = crate::rng::stream(req.seed, "dataset", &[]);
    let pairs: Vec<(Source, Source)> = match req.mode {
        DatasetMode::Base => vec![(Source::Expert, Source::Reference); req.size],
        DatasetMode::Shuffled => {
            if !req.size.is_multiple_of(4) {
                return Err(Error::Config(format!(
                    "shuffled datasets need a size divisible by 4, got {}",
                    req.size
                )));
            }
            let q = req.size / 4;
            let mut pairs = Vec::with_capacity(req.size);
            pairs.extend(std::iter::repeat_n((Source::Expert, Source::Expert), q));
            pairs.extend(std::iter::repeat_n((Source::Expert, Source::Reference), 2 * q));
            pairs.extend(std::iter::repeat_n((Source::Reference, Source::Reference), q));
            pairs.shuffle(&mut rng);
            pairs
        }
    };
    let policy_of = |s: Source| match s {
        Source::Expert => req.expert,
        Source::Reference => req.reference,
    };
    let mut rows = Vec::with_capacity(req.size);
    for (a_src, b_src) in pairs {
        let s0 = env.sample_start(&mut rng);
        let a = env.sample_trajectory(policy_of(a_src), s0, &mut rng)?;
        let b = env.sample_trajectory(policy_of(b_src), s0, &mut rng)?;
        let a_wins = req.judge.prefers(a.cumulative_reward, b.cumulative_reward, &mut rng);
        let (chosen, rejected, chosen_source, rejected_source) = if a_wins {
            (a, b, a_src, b_src)
        } else {
            (b, a, b_src, a_src)
        };
        rows.push(PreferenceRow {
            s0,
            chosen,
            rejected,
            meta: RowMeta {
                chosen_source,
                rejected_source,
                flipped: false,
            },
        });
    }
    Ok(PreferenceDataset {
        rows,
        provenance: Provenance {
            env: req.env_spec.clone(),
            expert: PolicyRecord::of(req.expert, req.expert_skill),
            reference: PolicyRecord::of(req.reference, req.reference_skill),
            eta: req.judge.eta,
            mode: req.mode,
            size: req.size,
            seed: req.seed,
            corruptions: Vec::new(),
        },
    })
}

/// Swaps chosen and rejected on exactly `round(p·n)` rows drawn without
/// replacement.
pub fn corrupt_noise(d: &PreferenceDataset, p: f64, seed: u64) -> Result<PreferenceDataset> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("noise fraction must lie in [0, 1], got {p}")));
    }
    let mut out = d.clone();
    let n = out.rows.len();
    let k = ((p * n as f64).round() as usize).min(n);
    let mut rng = crate::rng::stream(seed, "noise", &[out.provenance.corruptions.len() as u64]);
    for i in index::sample(&mut rng, n, k) {
        out.rows[i].swap();
    }
    if p > 0.0 {
        out.provenance.corruptions.push(Corruption { noise: p, seed });
    }
    Ok(out)
}

/// Rounds to 12 significant digits and prints the shortest decimal form.
fn format_reward(r: f64) -> String {
    let rounded: f64 = format!("{:.*e}", REWARD_DIGITS - 1, r).parse().expect("float text");
    format!("{rounded}")
}

fn format_steps(t: &Trajectory) -> String {
    let mut s = String::with_capacity(t.len() * 4);
    for (i, (st, a)) in t.steps.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{st}:{a}").expect("write to string");
    }
    s
}

fn parse_steps(field: &str, line: usize) -> Result<Vec<(usize, usize)>> {
    field
        .split(',')
        .map(|step| {
            let (s, a) = step
                .split_once(':')
                .ok_or_else(|| Error::parse(line, format!("malformed step {step:?}")))?;
            let s = s
                .parse()
                .map_err(|_| Error::parse(line, format!("bad state in {step:?}")))?;
            let a = a
                .parse()
                .map_err(|_| Error::parse(line, format!("bad action in {step:?}")))?;
            Ok((s, a))
        })
        .collect()
}

pub fn to_text(d: &PreferenceDataset) -> Result<String> {
    let provenance =
        serde_json::to_string(&d.provenance).map_err(|e| Error::Config(format!("cannot serialize provenance: {e}")))?;
    let mut s = format!("{FILE_MAGIC} v{FILE_VERSION} {provenance}\n");
    s.push_str(
        "# s0\tchosen_source\trejected_source\tflipped\tchosen_reward\trejected_reward\tchosen_steps\trejected_steps\n",
    );
    for r in &d.rows {
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.s0,
            r.meta.chosen_source.name(),
            r.meta.rejected_source.name(),
            u8::from(r.meta.flipped),
            format_reward(r.chosen.cumulative_reward),
            format_reward(r.rejected.cumulative_reward),
            format_steps(&r.chosen),
            format_steps(&r.rejected),
        )
        .expect("write to string");
    }
    Ok(s)
}

fn parse_header(line: &str) -> Result<Provenance> {
    let rest = line
        .strip_prefix(FILE_MAGIC)
        .ok_or_else(|| Error::parse(1, "missing preference-dataset header"))?
        .trim_start();
    let (version, json) = rest
        .split_once(' ')
        .ok_or_else(|| Error::parse(1, "header lacks version or provenance"))?;
    if version != format!("v{FILE_VERSION}") {
        return Err(Error::parse(1, format!("unsupported dataset version {version:?}")));
    }
    serde_json::from_str(json).map_err(|e| Error::parse(1, format!("bad provenance: {e}")))
}

/// Parses a dataset. Rewards are recomputed from the recorded environment,
/// and the printed values must agree with them.
pub fn from_text(text: &str) -> Result<PreferenceDataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty dataset file"))?;
    let provenance = parse_header(header)?;
    let env = provenance
        .env
        .build()
        .map_err(|e| Error::parse(1, format!("invalid environment: {e}")))?;
    let mut rows = Vec::with_capacity(provenance.size);
    for (no, line) in lines {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        rows.push(parse_row(line, no, &env)?);
    }
    if rows.len() != provenance.size {
        return Err(Error::parse(
            text.lines().count(),
            format!("expected {} rows, found {}", provenance.size, rows.len()),
        ));
    }
    Ok(PreferenceDataset { rows, provenance })
}

fn parse_row(line: &str, no: usize, env: &ChainEnv) -> Result<PreferenceRow> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 8 {
        return Err(Error::parse(
            no,
            format!("expected 8 tab-separated fields, found {}", fields.len()),
        ));
    }
    let s0: usize = fields[0].parse().map_err(|_| Error::parse(no, "bad start state"))?;
    let source = |f: &str| Source::parse(f).ok_or_else(|| Error::parse(no, format!("unknown source {f:?}")));
    let flipped = match fields[3] {
        "0" => false,
        "1" => true,
        f => return Err(Error::parse(no, format!("bad flipped flag {f:?}"))),
    };
    let traj = |steps_field: &str, reward_field: &str| -> Result<Trajectory> {
        let steps = parse_steps(steps_field, no)?;
        if steps.len() != env.horizon() {
            return Err(Error::parse(
                no,
                format!("trajectory has {} steps, expected {}", steps.len(), env.horizon()),
            ));
        }
        if steps
            .iter()
            .any(|&(s, a)| s >= env.num_states() || a >= env.num_actions())
        {
            return Err(Error::parse(no, "step outside the environment"));
        }
        if steps[0].0 != s0 {
            return Err(Error::parse(no, "trajectory does not start at s0"));
        }
        let mut t = Trajectory {
            steps,
            cumulative_reward: 0.0,
        };
        t.cumulative_reward = env.trajectory_reward(&t);
        if format_reward(t.cumulative_reward) != reward_field {
            return Err(Error::parse(
                no,
                format!("reward {reward_field} disagrees with trajectory"),
            ));
        }
        Ok(t)
    };
    let chosen = traj(fields[6], fields[4])?;
    let rejected = traj(fields[7], fields[5])?;
    Ok(PreferenceRow {
        s0,
        chosen,
        rejected,
        meta: RowMeta {
            chosen_source: source(fields[1])?,
            rejected_source: source(fields[2])?,
            flipped,
        },
    })
}

pub fn save(d: &PreferenceDataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(d)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PreferenceDataset> {
    from_text(&std::fs::read_to_string(path)?)
}

/// Reads only the header line.
pub fn read_provenance(path: &Path) -> Result<Provenance> {
    use std::io::BufRead;
    let mut line = String::new();
    std::io::BufReader::new(std::fs::File::open(path)?).read_line(&mut line)?;
    parse_header(line.trim_end_matches(['\n', '\r']))
}
