//! Gradient landscapes of preference losses and a brute-force check of the
//! optimality conditions of Bregman-regularized reward maximization.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::env::ChainEnv;
use crate::error::{Error, Result};
use crate::objective::ObjectiveSpec;
use crate::policy::TabularPolicy;
use crate::potential::{OmegaPotential, LOG_ODDS_EPS};

/// Regular grid over log-probabilities, shared by both axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub points: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points: 64,
            lo: -8.0,
            hi: -0.02,
        }
    }
}

impl GridSpec {
    pub fn axis(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.lo];
        }
        let step = (self.hi - self.lo) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.lo + step * i as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (min, max) = (LOG_ODDS_EPS.ln(), (1.0 - LOG_ODDS_EPS).ln());
        if self.points == 0 || !(self.lo < self.hi || self.points == 1) || self.lo < min || self.hi > max {
            return Err(Error::Config(format!(
                "grid needs points > 0 and {min} <= lo < hi <= {max}, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeGrid {
    pub axis_w: Vec<f64>,
    pub axis_l: Vec<f64>,
    /// `grad_w[i][j] = |∂L/∂log p_w|` at `(axis_w[i], axis_l[j])`.
    pub grad_w: Vec<Vec<f64>>,
    pub grad_l: Vec<Vec<f64>>,
    pub t: f64,
    pub objective: String,
    pub lambda: Option<f64>,
}

/// Absolute loss gradients over a grid of `(log p_w, log p_l)`.
pub fn landscape(obj: &ObjectiveSpec, grid: &GridSpec, t: f64, reference: Option<(f64, f64)>) -> Result<LandscapeGrid> {
    grid.validate()?;
    let axis = grid.axis();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = axis
        .par_iter()
        .map(|&lw| {
            let mut gw = Vec::with_capacity(axis.len());
            let mut gl = Vec::with_capacity(axis.len());
            for &ll in &axis {
                let (_, dw, dl) = obj.loss_and_log_gradient(lw, ll, reference, t)?;
                if !(dw.is_finite() && dl.is_finite()) {
                    return Err(Error::Numerical {
                        message: format!("non-finite gradient at ({lw}, {ll})"),
                        residual: f64::NAN,
                    });
                }
                gw.push(dw.abs());
                gl.push(dl.abs());
            }
            Ok((gw, gl))
        })
        .collect::<Result<_>>()?;
    let (grad_w, grad_l) = rows.into_iter().unzip();
    Ok(LandscapeGrid {
        axis_w: axis.clone(),
        axis_l: axis,
        grad_w,
        grad_l,
        t,
        objective: obj.id().to_string(),
        lambda: obj.lambda(),
    })
}

/// Fraction of off-diagonal pairs `(i, j)` with `log p_w < log p_l` whose
/// `|∂L/∂log p_w|` exceeds the value at the mirrored point.
pub fn asymmetry_fraction(grid: &LandscapeGrid) -> Result<f64> {
    if grid.axis_w != grid.axis_l {
        return Err(Error::Config("asymmetry needs identical axes".into()));
    }
    let n = grid.axis_w.len();
    let (mut hits, mut total) = (0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            if grid.axis_w[i] < grid.axis_l[j] {
                total += 1;
                if grid.grad_w[i][j] > grid.grad_w[j][i] {
                    hits += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Config("grid has no off-diagonal pairs".into()));
    }
    Ok(hits as f64 / total as f64)
}

pub fn landscape_csv(grid: &LandscapeGrid) -> String {
    let lambda = grid.lambda.map_or(String::new(), |l| l.to_string());
    let mut s = format!("t,lambda,objective\n{},{},{}\n", grid.t, lambda, grid.objective);
    s.push_str("log_p_w,log_p_l,grad_w_abs,grad_l_abs\n");
    for (i, lw) in grid.axis_w.iter().enumerate() {
        for (j, ll) in grid.axis_l.iter().enumerate() {
            writeln!(s, "{lw},{ll},{},{}", grid.grad_w[i][j], grid.grad_l[i][j]).expect("write to string");
        }
    }
    s
}

/// Trace overlay rows `(step, log_p_w, log_p_l, t)`.
pub fn trace_csv(points: &[(f64, f64, f64)]) -> String {
    let mut s = String::from("step,log_p_w,log_p_l,t\n");
    for (i, (w, l, t)) in points.iter().enumerate() {
        writeln!(s, "{i},{w},{l},{t}").expect("write to string");
    }
    s
}

/// Largest trajectory space enumerated by [`verify_mirror_solution`].
pub const MAX_TRAJECTORIES: usize = 4096;
pub const SOLVER_TOLERANCE: f64 = 1e-10;
pub const SOLVER_MAX_ITERATIONS: usize = 200_000;

/// Optimum and residuals for one start state.
#[derive(Clone, Debug, PartialEq)]
pub struct StartReport {
    pub s0: usize,
    /// Action sequence of every trajectory, in lexicographic order.
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub reference: Vec<f64>,
    pub solution: Vec<f64>,
    /// `r(τ) − β[φ⁻¹(π*(τ)) − φ⁻¹(π_ref(τ))]`.
    pub residuals: Vec<f64>,
    /// Mean residual, the normalization constant of the start state.
    pub constant: f64,
    pub spread: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MirrorReport {
    pub max_spread: f64,
    pub starts: Vec<StartReport>,
}

/// Maximizes `E_p[r] − β·D_h(p, π_ref)` over trajectory distributions for
/// every start state and measures how far `r − β[φ⁻¹(p*) − φ⁻¹(π_ref)]` is
/// from constant in τ.
pub fn verify_mirror_solution(
    env: &ChainEnv,
    potential: &OmegaPotential,
    beta: f64,
    reference: &TabularPolicy,
) -> Result<MirrorReport> {
    env.check_policy(reference)?;
    if !(beta > 0.0) {
        return Err(Error::Config(format!("β must be positive, got {beta}")));
    }
    let count = (env.num_actions() as f64).powi(env.horizon() as i32);
    if count > MAX_TRAJECTORIES as f64 {
        return Err(Error::Config(format!(
            "{count} trajectories per start state exceed the limit of {MAX_TRAJECTORIES}"
        )));
    }
    let ref_table: Vec<Vec<f64>> = (0..env.num_states())
        .map(|s| reference.distribution(s).probs().to_vec())
        .collect();
    if ref_table.iter().flatten().any(|&p| p <= 0.0) {
        return Err(Error::Domain("reference policy must be strictly positive".into()));
    }
    let floor = if potential.omega().is_finite() { 1e-14 } else { 0.0 };
    let mut starts = Vec::with_capacity(env.num_states());
    for s0 in 0..env.num_states() {
        let (actions, rewards, q) = enumerate(env, &ref_table, s0);
        let (p, iterations) = solve(potential, beta, &rewards, &q, floor)?;
        let residuals: Vec<f64> = (0..p.len())
            .map(|i| rewards[i] - beta * (potential.inverse_scalar(p[i]) - potential.inverse_scalar(q[i])))
            .collect();
        let max = residuals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = residuals.iter().copied().fold(f64::INFINITY, f64::min);
        starts.push(StartReport {
            s0,
            actions,
            rewards,
            reference: q,
            constant: residuals.iter().sum::<f64>() / residuals.len() as f64,
            solution: p,
            residuals,
            spread: max - min,
            iterations,
        });
    }
    Ok(MirrorReport {
        max_spread: starts.iter().map(|s| s.spread).fold(0.0, f64::max),
        starts,
    })
}

type Enumeration = (Vec<Vec<usize>>, Vec<f64>, Vec<f64>);

fn enumerate(env: &ChainEnv, ref_table: &[Vec<f64>], s0: usize) -> Enumeration {
    let (a, t) = (env.num_actions(), env.horizon());
    let total = a.pow(t as u32);
    let mut actions = Vec::with_capacity(total);
    let mut rewards = Vec::with_capacity(total);
    let mut probs = Vec::with_capacity(total);
    for code in 0..total {
        let seq: Vec<usize> = (0..t).map(|k| (code / a.pow((t - 1 - k) as u32)) % a).collect();
        let (mut s, mut r, mut p) = (s0, 0.0, 1.0);
        for &act in &seq {
            r += env.reward(s, act);
            p *= ref_table[s][act];
            s = env.next_state(s, act);
        }
        actions.push(seq);
        rewards.push(r);
        probs.push(p);
    }
    (actions, rewards, probs)
}

/// Objective gradient with its mean removed. Simplex projections are
/// invariant to constant shifts, and removing the (often large) common
/// component keeps directional derivatives along the simplex accurate.
fn gradient(potential: &OmegaPotential, beta: f64, r: &[f64], q: &[f64], p: &[f64]) -> Vec<f64> {
    let g: Vec<f64> = (0..p.len())
        .map(|i| r[i] - beta * (potential.inverse_scalar(p[i]) - potential.inverse_scalar(q[i])))
        .collect();
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    g.iter().map(|x| x - mean).collect()
}

/// Euclidean projection onto `{p ≥ floor, Σ p = 1}`.
pub fn project_simplex(v: &[f64], floor: f64) -> Vec<f64> {
    let n = v.len();
    let mass = 1.0 - floor * n as f64;
    let shifted: Vec<f64> = v.iter().map(|x| x - floor).collect();
    let mut sorted = shifted.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - mass) / (k + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    shifted.iter().map(|x| (x - theta).max(0.0) + floor).collect()
}

/// Projected gradient ascent, stopped when the unit-step gradient mapping
/// falls below [`SOLVER_TOLERANCE`].
///
/// The step search needs no objective values: along a feasible segment a
/// concave objective whose directional derivative is still non-negative at
/// the far end has increased over the whole segment. Comparing gradients
/// keeps the search accurate long after value differences drop below
/// rounding.
fn solve(potential: &OmegaPotential, beta: f64, r: &[f64], q: &[f64], floor: f64) -> Result<(Vec<f64>, usize)> {
    let mapping = |p: &[f64], g: &[f64], step: f64| {
        project_simplex(&p.iter().zip(g).map(|(x, d)| x + step * d).collect::<Vec<_>>(), floor)
    };
    let mut p = project_simplex(q, floor);
    let mut step: f64 = 1.0;
    let mut residual = f64::INFINITY;
    for it in 0..SOLVER_MAX_ITERATIONS {
        let g = gradient(potential, beta, r, q, &p);
        residual = p
            .iter()
            .zip(&mapping(&p, &g, 1.0))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if residual <= SOLVER_TOLERANCE {
            return Ok((p, it));
        }
        step = (step * 2.0).min(1e12);
        let trial = loop {
            let trial = mapping(&p, &g, step);
            let g_trial = gradient(potential, beta, r, q, &trial);
            let slope: f64 = trial.iter().zip(&p).zip(&g_trial).map(|((a, b), d)| (a - b) * d).sum();
            if slope >= 0.0 || step < 1e-300 {
                break trial;
            }
            step *= 0.5;
        };
        if trial == p {
            return Err(Error::NonConvergence {
                iterations: it,
                grad_norm: residual,
            });
        }
        p = trial;
    }
    Err(Error::NonConvergence {
        iterations: SOLVER_MAX_ITERATIONS,
        grad_norm: residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::central_difference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_step() -> ChainEnv {
        ChainEnv::advance_unit(1, 2, 1).unwrap()
    }

    #[test]
    fn orpo_gradient_at_the_center() {
        let obj = ObjectiveSpec::orpo(0.5);
        let grid = GridSpec {
            points: 1,
            lo: 0.5f64.ln(),
            hi: 0.5f64.ln(),
        };
        let g = landscape(&obj, &grid, 0.0, None).unwrap();
        assert!((g.grad_w[0][0] - 1.5).abs() < 1e-12);
        let fd = central_difference(|x| obj.loss(x[0], x[1], None, 0.0).unwrap(), &[0.5f64.ln(); 2], 1e-5);
        assert!((fd[0].abs() - 1.5).abs() < 1e-6);
    }

    #[test]
    fn orpo_grid_is_asymmetric_and_matches_differences() {
        let obj = ObjectiveSpec::orpo(0.5);
        let grid = GridSpec {
            points: 24,
            ..GridSpec::default()
        };
        let g = landscape(&obj, &grid, 0.0, None).unwrap();
        assert_eq!(asymmetry_fraction(&g).unwrap(), 1.0);
        for (i, lw) in g.axis_w.iter().enumerate() {
            for (j, ll) in g.axis_l.iter().enumerate() {
                let fd = central_difference(|x| obj.loss(x[0], x[1], None, 0.0).unwrap(), &[*lw, *ll], 1e-5);
                assert!((g.grad_w[i][j] - fd[0].abs()).abs() <= 1e-4 * fd[0].abs());
                assert!((g.grad_l[i][j] - fd[1].abs()).abs() <= (1e-4 * fd[1].abs()).max(1e-7));
            }
        }
    }

    #[test]
    fn zero_temporal_weights_make_progress_irrelevant() {
        let params = crate::loss_net::LossNetParams::init(&mut ChaCha8Rng::seed_from_u64(1), true);
        let obj = ObjectiveSpec::from_loss_net(&params, 0.5);
        let grid = GridSpec {
            points: 8,
            ..GridSpec::default()
        };
        assert_eq!(
            landscape(&obj, &grid, 0.0, None).unwrap().grad_w,
            landscape(&obj, &grid, 1.0, None).unwrap().grad_w
        );
    }

    #[test]
    fn csv_layout() {
        let g = landscape(
            &ObjectiveSpec::orpo(0.5),
            &GridSpec {
                points: 3,
                ..GridSpec::default()
            },
            0.25,
            None,
        )
        .unwrap();
        let csv = landscape_csv(&g);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,lambda,objective");
        assert_eq!(lines[1], "0.25,0.5,orpo");
        assert_eq!(lines[2], "log_p_w,log_p_l,grad_w_abs,grad_l_abs");
        assert_eq!(lines.len(), 3 + 9);
        assert_eq!(trace_csv(&[(-1.0, -2.0, 0.5)]), "step,log_p_w,log_p_l,t\n0,-1,-2,0.5\n");
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec {
            points: 4,
            lo: -40.0,
            hi: -1.0
        }
        .validate()
        .is_err());
        assert!(GridSpec {
            points: 4,
            lo: -2.0,
            hi: 0.5
        }
        .validate()
        .is_err());
        assert!(GridSpec::default().validate().is_ok());
    }

    #[test]
    fn simplex_projection() {
        assert_eq!(project_simplex(&[0.2, 0.8], 0.0), vec![0.2, 0.8]);
        let p = project_simplex(&[2.0, 0.0, -1.0], 0.0);
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        let p = project_simplex(&[1.0, -5.0], 0.01);
        assert!((p[1] - 0.01).abs() < 1e-15 && (p[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn neg_entropy_softmax_solution() {
        let r = verify_mirror_solution(
            &one_step(),
            &OmegaPotential::neg_entropy(),
            1.0,
            &TabularPolicy::uniform(1, 2),
        )
        .unwrap();
        let s = &r.starts[0];
        let e = std::f64::consts::E;
        assert!((s.solution[0] - e / (1.0 + e)).abs() < 1e-9);
        assert!((s.solution[0] - 0.7311).abs() < 1e-4 && (s.solution[1] - 0.2689).abs() < 1e-4);
        assert!(r.max_spread <= 1e-4);
        assert!((s.constant - ((1.0 + e) / 2.0).ln()).abs() < 1e-8);
        assert!((s.constant - 0.6201).abs() < 1e-4);
    }

    #[test]
    fn euclidean_quadratic_solution() {
        let r = verify_mirror_solution(
            &one_step(),
            &OmegaPotential::euclidean(),
            1.0,
            &TabularPolicy::uniform(1, 2),
        )
        .unwrap();
        assert!((r.starts[0].solution[0] - 0.75).abs() < 1e-9);
        assert!(r.max_spread <= 1e-4);
    }

    #[test]
    fn strong_regularization_stays_at_the_reference() {
        let reference = TabularPolicy::from_probabilities(&[vec![0.3, 0.7]]).unwrap();
        let r = verify_mirror_solution(&one_step(), &OmegaPotential::neg_entropy(), 1e3, &reference).unwrap();
        let s = &r.starts[0];
        let tv: f64 = s
            .solution
            .iter()
            .zip(&s.reference)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 1e-3);
    }

    #[test]
    fn random_tiny_environments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let states = rng.random_range(1..=2);
            let horizon = rng.random_range(1..=2);
            let rewards: Vec<f64> = (0..states * 2).map(|_| rng.random_range(0.0..1.0)).collect();
            let env = ChainEnv::new(states, 2, horizon, rewards).unwrap();
            let probs: Vec<Vec<f64>> = (0..states)
                .map(|_| {
                    let a = rng.random_range(0.3..0.7);
                    vec![a, 1.0 - a]
                })
                .collect();
            let reference = TabularPolicy::from_probabilities(&probs).unwrap();
            let ne = verify_mirror_solution(
                &env,
                &OmegaPotential::neg_entropy(),
                rng.random_range(0.5..2.0),
                &reference,
            )
            .unwrap();
            assert!(ne.max_spread <= 1e-4, "{}", ne.max_spread);
            let eu = verify_mirror_solution(
                &env,
                &OmegaPotential::euclidean(),
                rng.random_range(15.0..20.0),
                &reference,
            )
            .unwrap();
            assert!(eu.max_spread <= 1e-4, "{}", eu.max_spread);
            assert!(eu.starts.iter().all(|s| s.solution.iter().all(|&p| p > 0.0)));
        }
    }

    #[test]
    fn oversized_trajectory_spaces_are_rejected() {
        let env = ChainEnv::advance_unit(2, 2, 13).unwrap();
        assert!(
            verify_mirror_solution(&env, &OmegaPotential::neg_entropy(), 1.0, &TabularPolicy::uniform(2, 2)).is_err()
        );
    }
}
