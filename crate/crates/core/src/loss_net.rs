//! Monotone one-layer networks parametrizing ψ and φ⁻¹.
//!
//! Each network maps a probability `x ∈ (0, 1)` (and optionally the training
//! progress `t ∈ [0, 1]`) to
//!
//! ```text
//! f(x, t) = Σ_i v_i · act_i(w1_i·x + w2_i·(x·t) + c_i) + residual(x)
//! ```
//!
//! with 126 hidden units split evenly over nine non-decreasing activation
//! families. Non-negative `w1`, `v`, residual coefficient and the bound
//! `w2 ≥ −w1` make `f` non-decreasing in `x` for every `t ∈ [0, 1]`, since the
//! effective input weight `w1 + w2·t ≥ w1·(1 − t) ≥ 0`.
//!
//! The residual is `a·log x` for the ψ-network and `b·(log x − log(1 − x))`
//! for the φ⁻¹-network; with zero kernels and `a = b = 1` the pair reproduces
//! the ORPO objective.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Scalar, POS_POW_EPS};
use crate::error::{Error, Result};

pub const HIDDEN_UNITS: usize = 126;
pub const UNITS_PER_ACTIVATION: usize = HIDDEN_UNITS / Activation::ALL.len();
/// Guard for `log((z)₊)` and the interior clamp of the logit activation.
pub const ACTIVATION_EPS: f64 = 1e-8;
/// Clamp applied to `x` inside the log-odds residual.
pub const RESIDUAL_EPS: f64 = 1e-12;
/// Standard deviation of the kernel initialization.
pub const INIT_STD: f64 = 0.05;

const CHECKPOINT_MAGIC: &str = "# loss-net";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    SquarePos,
    Cube,
    SqrtPos,
    CbrtPos,
    LogPos,
    Exp,
    Tanh,
    LogitClip,
}

impl Activation {
    pub const ALL: [Activation; 9] = [
        Activation::Identity,
        Activation::SquarePos,
        Activation::Cube,
        Activation::SqrtPos,
        Activation::CbrtPos,
        Activation::LogPos,
        Activation::Exp,
        Activation::Tanh,
        Activation::LogitClip,
    ];

    /// Activation family of hidden unit `unit` (fixed blocks of 14).
    pub fn of_unit(unit: usize) -> Activation {
        Self::ALL[unit / UNITS_PER_ACTIVATION]
    }

    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::SquarePos => {
                let p = z.max(0.0);
                p * p
            }
            Activation::Cube => z * z * z,
            Activation::SqrtPos => z.max(0.0).sqrt(),
            Activation::CbrtPos => z.max(0.0).cbrt(),
            Activation::LogPos => z.max(ACTIVATION_EPS).ln(),
            Activation::Exp => z.exp(),
            Activation::Tanh => z.tanh(),
            Activation::LogitClip => {
                let c = z.clamp(ACTIVATION_EPS, 1.0 - ACTIVATION_EPS);
                c.ln() - (1.0 - c).ln()
            }
        }
    }

    /// Derivative with the same subgradient conventions as the tape.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::SquarePos => 2.0 * z.max(0.0),
            Activation::Cube => 3.0 * z * z,
            Activation::SqrtPos => pos_pow_slope(z, 0.5),
            Activation::CbrtPos => pos_pow_slope(z, 1.0 / 3.0),
            Activation::LogPos => {
                if z > ACTIVATION_EPS {
                    1.0 / z
                } else {
                    0.0
                }
            }
            Activation::Exp => z.exp(),
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::LogitClip => {
                if z > ACTIVATION_EPS && z < 1.0 - ACTIVATION_EPS {
                    1.0 / (z * (1.0 - z))
                } else {
                    0.0
                }
            }
        }
    }

    /// Same function built from differentiable primitives.
    pub fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Identity => z,
            Activation::SquarePos => z.relu().powi(2),
            Activation::Cube => z.powi(3),
            Activation::SqrtPos => z.pos_pow(0.5),
            Activation::CbrtPos => z.pos_pow(1.0 / 3.0),
            Activation::LogPos => ((z - ACTIVATION_EPS).relu() + ACTIVATION_EPS).ln(),
            Activation::Exp => z.exp(),
            Activation::Tanh => z.tanh(),
            Activation::LogitClip => {
                let c = z.clip(ACTIVATION_EPS, 1.0 - ACTIVATION_EPS);
                c.ln() - (-c + 1.0).ln()
            }
        }
    }
}

fn pos_pow_slope(z: f64, p: f64) -> f64 {
    if z <= 0.0 {
        0.0
    } else {
        p * z.max(POS_POW_EPS).powf(p - 1.0)
    }
}

/// Which residual term a network carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Residual {
    /// `a·log x` (ψ-network).
    Log,
    /// `b·(log x − log(1 − x))` (φ⁻¹-network).
    LogOdds,
}

impl Residual {
    fn eval(self, x: f64) -> (f64, f64) {
        match self {
            Residual::Log => (x.ln(), 1.0 / x),
            Residual::LogOdds => {
                if x > RESIDUAL_EPS && x < 1.0 - RESIDUAL_EPS {
                    (x.ln() - (1.0 - x).ln(), 1.0 / (x * (1.0 - x)))
                } else {
                    let c = x.clamp(RESIDUAL_EPS, 1.0 - RESIDUAL_EPS);
                    (c.ln() - (1.0 - c).ln(), 0.0)
                }
            }
        }
    }

    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Residual::Log => x.ln(),
            Residual::LogOdds => {
                let c = x.clip(RESIDUAL_EPS, 1.0 - RESIDUAL_EPS);
                c.ln() - (-c + 1.0).ln()
            }
        }
    }
}

/// One constrained network (ψ or φ⁻¹).
#[derive(Clone, Debug, PartialEq)]
pub struct LossNetwork {
    pub residual: Residual,
    /// `a` for ψ, `b` for φ⁻¹.
    pub residual_coef: f64,
    /// `w1`, kernel of the probability input.
    pub input_weights: Vec<f64>,
    /// `w2`, kernel of the `x·t` input. All zero for non-temporal networks.
    pub progress_weights: Vec<f64>,
    /// `v`, output kernel.
    pub output_weights: Vec<f64>,
    /// `c`, hidden biases (shared by both input paths).
    pub biases: Vec<f64>,
}

impl LossNetwork {
    /// Zero kernels and unit residual.
    pub fn residual_only(residual: Residual) -> Self {
        Self {
            residual,
            residual_coef: 1.0,
            input_weights: vec![0.0; HIDDEN_UNITS],
            progress_weights: vec![0.0; HIDDEN_UNITS],
            output_weights: vec![0.0; HIDDEN_UNITS],
            biases: vec![0.0; HIDDEN_UNITS],
        }
    }

    fn pre_activation(&self, unit: usize, x: f64, t: f64) -> f64 {
        self.input_weights[unit] * x + self.progress_weights[unit] * (x * t) + self.biases[unit]
    }

    /// Network output at `(x, t)`.
    pub fn apply(&self, x: f64, t: f64) -> f64 {
        self.value_and_derivative(x, t).0
    }

    /// Output and its derivative with respect to `x`, in closed form.
    pub fn value_and_derivative(&self, x: f64, t: f64) -> (f64, f64) {
        let (r, dr) = self.residual.eval(x);
        let mut value = self.residual_coef * r;
        let mut slope = self.residual_coef * dr;
        for unit in 0..HIDDEN_UNITS {
            let v = self.output_weights[unit];
            if v == 0.0 {
                continue;
            }
            let act = Activation::of_unit(unit);
            let z = self.pre_activation(unit, x, t);
            let dz = self.input_weights[unit] + self.progress_weights[unit] * t;
            value += v * act.eval(z);
            slope += v * act.derivative(z) * dz;
        }
        (value, slope)
    }

    /// Taped evaluation with respect to `x` only, as one fused node.
    pub fn apply_scalar<S: Scalar>(&self, x: S, t: f64) -> S {
        let (value, slope) = self.value_and_derivative(x.value(), t);
        x.fused(value, slope)
    }

    /// Distance in `x` from `x` to the nearest point where some active unit
    /// switches branch (a clamp boundary or the origin of a positive-part
    /// activation). Finite differences straddling such a point are not
    /// derivatives.
    pub fn kink_distance(&self, x: f64, t: f64) -> f64 {
        let mut best = f64::INFINITY;
        for unit in 0..HIDDEN_UNITS {
            if self.output_weights[unit] == 0.0 {
                continue;
            }
            let kinks: &[f64] = match Activation::of_unit(unit) {
                Activation::SquarePos | Activation::SqrtPos | Activation::CbrtPos => &[0.0],
                Activation::LogPos => &[ACTIVATION_EPS],
                Activation::LogitClip => &[ACTIVATION_EPS, 1.0 - ACTIVATION_EPS],
                _ => &[],
            };
            let z = self.pre_activation(unit, x, t);
            let dz = (self.input_weights[unit] + self.progress_weights[unit] * t).abs();
            for k in kinks {
                best = best.min((z - k).abs() / dz.max(f64::MIN_POSITIVE));
            }
        }
        best
    }

    /// Kernel part only (everything except the residual term).
    pub fn kernel_value(&self, x: f64, t: f64) -> f64 {
        (0..HIDDEN_UNITS)
            .filter(|&u| self.output_weights[u] != 0.0)
            .map(|u| self.output_weights[u] * Activation::of_unit(u).eval(self.pre_activation(u, x, t)))
            .sum()
    }

    /// Non-decreasing in `x` for every `t ∈ [0, 1]`?
    pub fn is_feasible(&self) -> bool {
        self.residual_coef >= 0.0
            && self.input_weights.iter().all(|&w| w >= 0.0)
            && self.output_weights.iter().all(|&w| w >= 0.0)
            && self
                .progress_weights
                .iter()
                .zip(&self.input_weights)
                .all(|(&w2, &w1)| w2 >= -w1)
    }

    fn project(&mut self) {
        self.residual_coef = self.residual_coef.max(0.0);
        for w in &mut self.input_weights {
            *w = w.max(0.0);
        }
        for w in &mut self.output_weights {
            *w = w.max(0.0);
        }
        for (w2, &w1) in self.progress_weights.iter_mut().zip(&self.input_weights) {
            *w2 = w2.max(-w1);
        }
    }
}

/// Output of a network with *every* quantity on the same footing, so the
/// tape can differentiate with respect to parameters as well as `x` and `t`.
#[allow(clippy::too_many_arguments)]
pub fn forward_generic<S: Scalar>(
    residual: Residual,
    residual_coef: S,
    input_weights: &[S],
    progress_weights: &[S],
    output_weights: &[S],
    biases: &[S],
    x: S,
    t: S,
) -> S {
    let xt = x * t;
    let mut out = residual_coef * residual.apply(x);
    for unit in 0..HIDDEN_UNITS {
        let z = input_weights[unit] * x + progress_weights[unit] * xt + biases[unit];
        out = out + output_weights[unit] * Activation::of_unit(unit).apply(z);
    }
    out
}

/// The full parameter set ζ: a ψ-network followed by a φ⁻¹-network.
#[derive(Clone, Debug, PartialEq)]
pub struct LossNetParams {
    pub temporal: bool,
    pub psi: LossNetwork,
    pub phi_inv: LossNetwork,
}

impl LossNetParams {
    /// Zero kernels, `a = b = 1`: ψ = log, φ⁻¹ = logit, i.e. exactly ORPO.
    pub fn orpo_equivalent(temporal: bool) -> Self {
        Self {
            temporal,
            psi: LossNetwork::residual_only(Residual::Log),
            phi_inv: LossNetwork::residual_only(Residual::LogOdds),
        }
    }

    /// `a = b = 1`, `w1, v ~ |N(0, 0.05)|`, `c ~ N(0, 0.05)`, `w2 = 0`.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, temporal: bool) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut net = |residual| {
            let mut n = LossNetwork::residual_only(residual);
            for u in 0..HIDDEN_UNITS {
                n.input_weights[u] = normal.sample(rng).abs();
                n.output_weights[u] = normal.sample(rng).abs();
                n.biases[u] = normal.sample(rng);
            }
            n
        };
        let psi = net(Residual::Log);
        let phi_inv = net(Residual::LogOdds);
        Self { temporal, psi, phi_inv }
    }

    /// Length of the flat ζ vector.
    pub fn dimension(temporal: bool) -> usize {
        2 * Self::block_len(temporal)
    }

    fn block_len(temporal: bool) -> usize {
        let kernels = if temporal { 4 } else { 3 };
        kernels * HIDDEN_UNITS + 1
    }

    /// Flat layout per network: `w1, [w2 if temporal], v, c, coef`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::dimension(self.temporal));
        for net in [&self.psi, &self.phi_inv] {
            out.extend_from_slice(&net.input_weights);
            if self.temporal {
                out.extend_from_slice(&net.progress_weights);
            }
            out.extend_from_slice(&net.output_weights);
            out.extend_from_slice(&net.biases);
            out.push(net.residual_coef);
        }
        out
    }

    pub fn from_flat(temporal: bool, flat: &[f64]) -> Result<Self> {
        let expected = Self::dimension(temporal);
        if flat.len() != expected {
            return Err(Error::Config(format!(
                "loss-net parameter vector has length {}, expected {expected}",
                flat.len()
            )));
        }
        let block = Self::block_len(temporal);
        let read = |chunk: &[f64], residual| {
            let h = HIDDEN_UNITS;
            let mut net = LossNetwork::residual_only(residual);
            let mut at = 0;
            let mut take = |n: usize| {
                let s = &chunk[at..at + n];
                at += n;
                s.to_vec()
            };
            net.input_weights = take(h);
            if temporal {
                net.progress_weights = take(h);
            }
            net.output_weights = take(h);
            net.biases = take(h);
            net.residual_coef = take(1)[0];
            net
        };
        Ok(Self {
            temporal,
            psi: read(&flat[..block], Residual::Log),
            phi_inv: read(&flat[block..], Residual::LogOdds),
        })
    }

    pub fn is_feasible(&self) -> bool {
        self.psi.is_feasible() && self.phi_inv.is_feasible()
    }

    /// Nearest feasible parameters: `w1, v, a, b` clamped at 0 and `w2` at `−w1`.
    pub fn project(&self) -> Self {
        let mut out = self.clone();
        out.psi.project();
        out.phi_inv.project();
        out
    }

    pub fn to_text(&self) -> String {
        let flat = self.to_flat();
        let mut s = format!(
            "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} temporal={} dimension={}\n",
            self.temporal,
            flat.len()
        );
        for x in flat {
            writeln!(s, "{x}").expect("write to string");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(1, "empty checkpoint"))?;
        let rest = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| Error::parse(1, "missing loss-net header"))?;
        let mut version = None;
        let mut temporal = None;
        let mut dimension = None;
        for field in rest.split_whitespace() {
            if let Some(v) = field.strip_prefix('v').and_then(|v| v.parse::<u32>().ok()) {
                version = Some(v);
            } else if let Some(v) = field.strip_prefix("temporal=") {
                temporal = Some(v.parse::<bool>().map_err(|e| Error::parse(1, e.to_string()))?);
            } else if let Some(v) = field.strip_prefix("dimension=") {
                dimension = Some(v.parse::<usize>().map_err(|e| Error::parse(1, e.to_string()))?);
            } else {
                return Err(Error::parse(1, format!("unknown header field {field:?}")));
            }
        }
        if version != Some(CHECKPOINT_VERSION) {
            return Err(Error::parse(1, format!("unsupported loss-net version {version:?}")));
        }
        let temporal = temporal.ok_or_else(|| Error::parse(1, "missing temporal flag"))?;
        let dimension = dimension.ok_or_else(|| Error::parse(1, "missing dimension"))?;
        if dimension != Self::dimension(temporal) {
            return Err(Error::parse(
                1,
                format!("dimension {dimension} does not match temporal={temporal}"),
            ));
        }
        let mut flat = Vec::with_capacity(dimension);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let v = line
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(line_no, format!("{e}: {line:?}")))?;
            flat.push(v);
        }
        if flat.len() != dimension {
            return Err(Error::parse(
                flat.len() + 2,
                format!("expected {dimension} parameters, found {}", flat.len()),
            ));
        }
        Self::from_flat(temporal, &flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
