//! ω-potentials, the mirror maps they generate and their Bregman divergences.
//!
//! An ω-potential is an increasing diffeomorphism φ : (−∞, u) → (ω, +∞). It
//! generates the separable mirror map
//!
//! ```text
//! h_φ(π) = Σ_a ∫_1^{π_a} φ⁻¹(x) dx
//! ```
//!
//! and through it the Bregman divergence
//! `D(x, y) = h(x) − h(y) − ⟨∇h(y), x − y⟩`, with `∇h(y)_a = φ⁻¹(y_a)`.
//!
//! Closed-form kinds integrate φ⁻¹ analytically. The learned kind integrates
//! its residual term analytically and the network kernels with adaptive
//! trapezoid quadrature.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::autodiff::{stable_sigmoid, Scalar};
use crate::error::{Error, Result};
use crate::loss_net::{LossNetwork, Residual};

/// Clamp for probabilities entering log-odds maps.
pub const LOG_ODDS_EPS: f64 = 1e-12;
/// Absolute error target of the adaptive quadrature.
pub const QUADRATURE_TOL: f64 = 1e-8;
const QUADRATURE_MAX_DEPTH: u32 = 48;
const SIMPLEX_TOL: f64 = 1e-12;

/// A probability vector over actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Domain("empty probability vector".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::Domain(format!("probability {p} is negative or not finite")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// Softmax of `logits`.
    pub fn from_logits(logits: &[f64]) -> Self {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        Self(e.into_iter().map(|x| x / z).collect())
    }

    /// Uniform draw from the simplex (flat Dirichlet).
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Self {
        let e: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
        let z: f64 = e.iter().sum();
        Self(e.into_iter().map(|x: f64| x / z).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// What to do with log-odds inputs outside `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DomainPolicy {
    /// Clamp to `[ε, 1 − ε]`.
    #[default]
    Clamp,
    /// Report a domain error.
    Error,
}

#[derive(Clone, Debug)]
pub enum PotentialKind {
    /// φ(y) = e^{y−1}, φ⁻¹(x) = log x + 1.
    NegEntropy,
    /// φ(y) = y/2, φ⁻¹(x) = 2x: the potential whose divergence is the squared
    /// Euclidean distance.
    Euclidean,
    /// φ = sigmoid, φ⁻¹(x) = log x − log(1 − x).
    LogOdds,
    /// φ⁻¹ given by a monotone loss network.
    Learned(Arc<LossNetwork>),
}

#[derive(Clone, Debug)]
pub struct OmegaPotential {
    kind: PotentialKind,
    domain: DomainPolicy,
    /// Training progress fed to a temporal learned network.
    progress: f64,
}

impl OmegaPotential {
    pub fn new(kind: PotentialKind) -> Self {
        Self {
            kind,
            domain: DomainPolicy::Clamp,
            progress: 0.0,
        }
    }

    pub fn neg_entropy() -> Self {
        Self::new(PotentialKind::NegEntropy)
    }

    pub fn euclidean() -> Self {
        Self::new(PotentialKind::Euclidean)
    }

    pub fn log_odds() -> Self {
        Self::new(PotentialKind::LogOdds)
    }

    pub fn learned(net: Arc<LossNetwork>) -> Self {
        Self::new(PotentialKind::Learned(net))
    }

    pub fn with_domain_policy(mut self, domain: DomainPolicy) -> Self {
        self.domain = domain;
        self
    }

    pub fn at_progress(mut self, t: f64) -> Self {
        self.progress = t;
        self
    }

    pub fn kind(&self) -> &PotentialKind {
        &self.kind
    }

    /// Config name: `neg_entropy`, `euclidean`, `log_odds` or `learned`.
    pub fn name(&self) -> &'static str {
        match self.kind {
            PotentialKind::NegEntropy => "neg_entropy",
            PotentialKind::Euclidean => "euclidean",
            PotentialKind::LogOdds => "log_odds",
            PotentialKind::Learned(_) => "learned",
        }
    }

    /// Closed-form kind by config name.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "neg_entropy" => Ok(Self::neg_entropy()),
            "euclidean" => Ok(Self::euclidean()),
            "log_odds" => Ok(Self::log_odds()),
            other => Err(Error::Config(format!(
                "unknown potential {other:?} (expected neg_entropy, euclidean, log_odds or learned:<path>)"
            ))),
        }
    }

    /// Lower limit ω of the range of φ.
    pub fn omega(&self) -> f64 {
        match self.kind {
            PotentialKind::Euclidean => f64::NEG_INFINITY,
            _ => 0.0,
        }
    }

    /// Upper end `u` of the domain of φ.
    pub fn domain_upper(&self) -> f64 {
        match &self.kind {
            PotentialKind::Learned(net) if net.residual != Residual::LogOdds || net.residual_coef == 0.0 => {
                net.apply(1.0, self.progress)
            }
            _ => f64::INFINITY,
        }
    }

    fn bounded_to_unit(&self) -> bool {
        matches!(self.kind, PotentialKind::LogOdds | PotentialKind::Learned(_))
    }

    /// φ(y).
    pub fn phi(&self, y: f64) -> f64 {
        match &self.kind {
            PotentialKind::NegEntropy => (y - 1.0).exp(),
            PotentialKind::Euclidean => 0.5 * y,
            PotentialKind::LogOdds => stable_sigmoid(y),
            PotentialKind::Learned(net) => invert_monotone(|x| net.apply(x, self.progress), y),
        }
    }

    /// φ⁻¹(x), checking that `x` lies in the image of φ.
    pub fn inverse(&self, x: f64) -> Result<f64> {
        if x.is_nan() {
            return Err(Error::Domain("φ⁻¹ evaluated at NaN".into()));
        }
        if self.bounded_to_unit() {
            if !(x > 0.0 && x < 1.0) && self.domain == DomainPolicy::Error {
                return Err(Error::Domain(format!(
                    "φ⁻¹ of {} requires x in (0, 1), got {x}",
                    self.name()
                )));
            }
        } else if x <= self.omega() {
            return Err(Error::Domain(format!(
                "φ⁻¹ of {} requires x > {}, got {x}",
                self.name(),
                self.omega()
            )));
        }
        Ok(self.inverse_scalar(x))
    }

    /// φ⁻¹ without domain checks; log-odds style inputs are clamped to
    /// `[ε, 1 − ε]`. Differentiable on the tape.
    pub fn inverse_scalar<S: Scalar>(&self, x: S) -> S {
        self.inverse_scalar_at(x, self.progress)
    }

    /// [`Self::inverse_scalar`] at an explicit training progress `t`.
    pub fn inverse_scalar_at<S: Scalar>(&self, x: S, t: f64) -> S {
        match &self.kind {
            PotentialKind::NegEntropy => x.ln() + 1.0,
            PotentialKind::Euclidean => x * 2.0,
            PotentialKind::LogOdds => {
                let c = x.clip(LOG_ODDS_EPS, 1.0 - LOG_ODDS_EPS);
                c.ln() - (-c + 1.0).ln()
            }
            PotentialKind::Learned(net) => net.apply_scalar(x.clip(LOG_ODDS_EPS, 1.0 - LOG_ODDS_EPS), t),
        }
    }

    /// `∫_1^p φ⁻¹(x) dx` for `p ∈ [0, 1]`.
    pub fn antiderivative(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("mirror map needs a probability, got {p}")));
        }
        Ok(match &self.kind {
            PotentialKind::NegEntropy => xlogx(p),
            PotentialKind::Euclidean => p * p - 1.0,
            PotentialKind::LogOdds => xlogx(p) + xlogx(1.0 - p),
            PotentialKind::Learned(net) => {
                let residual = match net.residual {
                    // ∫_1^p log x = p log p − p + 1
                    Residual::Log => xlogx(p) - p + 1.0,
                    Residual::LogOdds => xlogx(p) + xlogx(1.0 - p),
                };
                let t = self.progress;
                let kernels = adaptive_trapezoid(|x| net.kernel_value(x, t), 1.0, p, QUADRATURE_TOL)?;
                net.residual_coef * residual + kernels
            }
        })
    }
}

fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Solves `f(x) = y` on `(0, 1)` for non-decreasing `f` by bisection in logit space.
fn invert_monotone<F: Fn(f64) -> f64>(f: F, y: f64) -> f64 {
    let (mut lo, mut hi) = (-60.0f64, 60.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(stable_sigmoid(mid)) < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    stable_sigmoid(0.5 * (lo + hi))
}

/// `∫_a^b f` by recursive trapezoid refinement until the Richardson error
/// estimate falls below `tol`.
pub fn adaptive_trapezoid<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
        worst: &mut f64,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let fm = f(m);
        let h = 0.5 * (b - a);
        let left = 0.5 * h * (fa + fm);
        let right = 0.5 * h * (fm + fb);
        let refined = left + right;
        let err = (refined - whole).abs() / 3.0;
        if err <= tol || depth == 0 {
            if depth == 0 && err > tol {
                *worst = worst.max(err);
            }
            // Richardson extrapolation of the two trapezoid levels.
            return refined + (refined - whole) / 3.0;
        }
        recurse(f, a, m, fa, fm, left, 0.5 * tol, depth - 1, worst)
            + recurse(f, m, b, fm, fb, right, 0.5 * tol, depth - 1, worst)
    }

    if a == b {
        return Ok(0.0);
    }
    let mut worst = 0.0;
    // Force a few levels before trusting the error estimate.
    let n0 = 16;
    let mut total = 0.0;
    for i in 0..n0 {
        let x0 = a + (b - a) * i as f64 / n0 as f64;
        let x1 = a + (b - a) * (i + 1) as f64 / n0 as f64;
        let (f0, f1) = (f(x0), f(x1));
        let panel = 0.5 * (x1 - x0) * (f0 + f1);
        total += recurse(
            &f,
            x0,
            x1,
            f0,
            f1,
            panel,
            tol / n0 as f64,
            QUADRATURE_MAX_DEPTH,
            &mut worst,
        );
    }
    if !total.is_finite() || worst > tol {
        return Err(Error::Numerical {
            message: "adaptive quadrature did not reach its tolerance".into(),
            residual: if total.is_finite() { worst } else { f64::INFINITY },
        });
    }
    Ok(total)
}

/// h_φ(dist) = Σ_a ∫_1^{π_a} φ⁻¹.
pub fn mirror_map_value(p: &OmegaPotential, dist: &SimplexPoint) -> Result<f64> {
    dist.probs().iter().map(|&x| p.antiderivative(x)).sum()
}

/// D_{h_φ}(x, y) = h(x) − h(y) − ⟨∇h(y), x − y⟩, evaluated coordinate-wise.
pub fn bregman(p: &OmegaPotential, x: &SimplexPoint, y: &SimplexPoint) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Domain(format!(
            "simplex dimensions differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    // ∇h(y) = φ⁻¹(y) is undefined at 0 unless φ ranges down to −∞.
    if p.omega() > f64::NEG_INFINITY {
        if let Some(v) = y.probs().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!(
                "Bregman divergence of {} needs a strictly positive second argument, found {v}",
                p.name()
            )));
        }
    }
    let mut total = 0.0;
    for (&xa, &ya) in x.probs().iter().zip(y.probs()) {
        let grad = p.inverse(ya)?;
        total += p.antiderivative(xa)? - p.antiderivative(ya)? - grad * (xa - ya);
    }
    Ok(total)
}
