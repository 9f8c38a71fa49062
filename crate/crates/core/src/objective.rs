//! Preference losses: DPO, ORPO and their mirror-map generalizations.
//!
//! Every loss is written once over [`Scalar`], so the same code evaluates
//! plain values and builds tape nodes for training and landscapes. Inputs are
//! log-probabilities; the probabilities fed to ψ and φ⁻¹ are their
//! exponentials.

use std::path::Path;
use std::sync::Arc;

use crate::autodiff::{Scalar, Tape};
use crate::error::{Error, Result};
use crate::loss_net::{LossNetParams, LossNetwork};
use crate::potential::OmegaPotential;

/// The map applied to `p_w` in the SFT term of generalized ORPO.
#[derive(Clone, Debug)]
pub enum SftMap {
    Log,
    Learned(Arc<LossNetwork>),
}

impl SftMap {
    fn apply<S: Scalar>(&self, log_p: S, p: S, t: f64) -> S {
        match self {
            SftMap::Log => log_p,
            SftMap::Learned(net) => net.apply_scalar(p, t),
        }
    }
}

#[derive(Clone, Debug)]
pub enum ObjectiveKind {
    Dpo {
        beta: f64,
    },
    Orpo {
        lambda: f64,
    },
    GenDpo {
        phi_inv: OmegaPotential,
        beta: f64,
    },
    GenOrpo {
        psi: SftMap,
        phi_inv: OmegaPotential,
        lambda: f64,
    },
}

#[derive(Clone, Debug)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    /// Feed training progress to learned maps; when false they see `t = 0`.
    pub temporal: bool,
    id: String,
}

/// Probability-space inputs of one preference row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowLossInput {
    pub p_w: f64,
    pub p_l: f64,
    pub ref_p_w: Option<f64>,
    pub ref_p_l: Option<f64>,
    pub t: f64,
}

impl RowLossInput {
    pub fn new(p_w: f64, p_l: f64) -> Self {
        Self {
            p_w,
            p_l,
            ref_p_w: None,
            ref_p_l: None,
            t: 0.0,
        }
    }

    pub fn with_reference(mut self, ref_p_w: f64, ref_p_l: f64) -> Self {
        self.ref_p_w = Some(ref_p_w);
        self.ref_p_l = Some(ref_p_l);
        self
    }

    fn reference_logs(&self) -> Option<(f64, f64)> {
        Some((self.ref_p_w?.ln(), self.ref_p_l?.ln()))
    }
}

impl ObjectiveSpec {
    fn new(kind: ObjectiveKind, temporal: bool, id: impl Into<String>) -> Self {
        Self {
            kind,
            temporal,
            id: id.into(),
        }
    }

    pub fn orpo(lambda: f64) -> Self {
        Self::new(ObjectiveKind::Orpo { lambda }, false, "orpo")
    }

    pub fn dpo(beta: f64) -> Self {
        Self::new(ObjectiveKind::Dpo { beta }, false, "dpo")
    }

    pub fn gen_dpo(phi_inv: OmegaPotential, beta: f64) -> Self {
        let id = format!("gen_dpo:{}", phi_inv.name());
        Self::new(ObjectiveKind::GenDpo { phi_inv, beta }, false, id)
    }

    pub fn gen_orpo(psi: SftMap, phi_inv: OmegaPotential, lambda: f64) -> Self {
        Self::new(ObjectiveKind::GenOrpo { psi, phi_inv, lambda }, false, "gen_orpo")
    }

    /// Generalized ORPO with both maps taken from a loss-network parameter set.
    pub fn from_loss_net(params: &LossNetParams, lambda: f64) -> Self {
        let psi = SftMap::Learned(Arc::new(params.psi.clone()));
        let phi_inv = OmegaPotential::learned(Arc::new(params.phi_inv.clone()));
        Self::gen_orpo(psi, phi_inv, lambda).with_temporal(params.temporal)
    }

    pub fn with_temporal(mut self, temporal: bool) -> Self {
        self.temporal = temporal;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Replaces λ of ORPO-family objectives; other kinds are unchanged.
    pub fn with_lambda(mut self, new: f64) -> Self {
        match &mut self.kind {
            ObjectiveKind::Orpo { lambda } | ObjectiveKind::GenOrpo { lambda, .. } => *lambda = new,
            _ => {}
        }
        self
    }

    /// Parses `orpo`, `dpo`, `gen_orpo:<loss-net path>` or
    /// `gen_dpo:<loss-net path | potential name>`.
    pub fn parse(spec: &str, beta: f64, lambda: f64, temporal: Option<bool>) -> Result<Self> {
        let (head, arg) = match spec.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (spec, None),
        };
        let out = match (head, arg) {
            ("orpo", None) => Self::orpo(lambda),
            ("dpo", None) => Self::dpo(beta),
            ("gen_orpo", Some(path)) => {
                let params = LossNetParams::load(Path::new(path))?;
                Self::from_loss_net(&params, lambda).with_id(spec)
            }
            ("gen_dpo", Some(arg)) => match OmegaPotential::from_name(arg) {
                Ok(phi_inv) => Self::gen_dpo(phi_inv, beta),
                Err(_) => {
                    let params = LossNetParams::load(Path::new(arg))?;
                    let phi_inv = OmegaPotential::learned(Arc::new(params.phi_inv));
                    Self::gen_dpo(phi_inv, beta)
                        .with_temporal(params.temporal)
                        .with_id(spec)
                }
            },
            _ => {
                return Err(Error::Config(format!(
                    "unknown objective {spec:?} (expected orpo, dpo, gen_orpo:<path> or gen_dpo:<path>)"
                )))
            }
        };
        let out = match temporal {
            Some(t) => out.with_temporal(t),
            None => out,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ObjectiveKind::Dpo { beta } | ObjectiveKind::GenDpo { beta, .. } if !(beta > 0.0) => {
                Err(Error::Config(format!("β must be positive, got {beta}")))
            }
            ObjectiveKind::Orpo { lambda } | ObjectiveKind::GenOrpo { lambda, .. } if !(lambda >= 0.0) => {
                Err(Error::Config(format!("λ must be non-negative, got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    /// Short identifier used in reports.
    pub fn id(&self) -> &str {
        &self.id
    }

    /// λ for ORPO-family objectives.
    pub fn lambda(&self) -> Option<f64> {
        match self.kind {
            ObjectiveKind::Orpo { lambda } | ObjectiveKind::GenOrpo { lambda, .. } => Some(lambda),
            _ => None,
        }
    }

    pub fn requires_reference(&self) -> bool {
        matches!(self.kind, ObjectiveKind::Dpo { .. } | ObjectiveKind::GenDpo { .. })
    }

    /// Row loss from log-probabilities `lp_w`, `lp_l` (and reference
    /// log-probabilities for DPO kinds) at training progress `t`.
    pub fn loss<S: Scalar>(&self, lp_w: S, lp_l: S, reference: Option<(f64, f64)>, t: f64) -> Result<S> {
        let t = if self.temporal { t } else { 0.0 };
        let reference =
            || reference.ok_or_else(|| Error::Config(format!("objective {} needs reference probabilities", self.id)));
        Ok(match &self.kind {
            ObjectiveKind::Orpo { lambda } => {
                let logit = OmegaPotential::log_odds();
                let margin = logit.inverse_scalar(lp_w.exp()) - logit.inverse_scalar(lp_l.exp());
                -(lp_w + margin.log_sigmoid() * *lambda)
            }
            ObjectiveKind::Dpo { beta } => {
                let (rw, rl) = reference()?;
                -(((lp_w - rw) - (lp_l - rl)) * *beta).log_sigmoid()
            }
            ObjectiveKind::GenDpo { phi_inv, beta } => {
                let (rw, rl) = reference()?;
                let f = |lp: S| phi_inv.inverse_scalar_at(lp.exp(), t);
                let fr = |lp: f64| phi_inv.inverse_scalar_at(lp.exp(), t);
                -((f(lp_w) - fr(rw) - f(lp_l) + fr(rl)) * *beta).log_sigmoid()
            }
            ObjectiveKind::GenOrpo { psi, phi_inv, lambda } => {
                let (p_w, p_l) = (lp_w.exp(), lp_l.exp());
                let margin = phi_inv.inverse_scalar_at(p_w, t) - phi_inv.inverse_scalar_at(p_l, t);
                -(psi.apply(lp_w, p_w, t) + margin.log_sigmoid() * *lambda)
            }
        })
    }

    /// Loss and its partial derivatives with respect to `lp_w` and `lp_l`.
    pub fn loss_and_log_gradient(
        &self,
        lp_w: f64,
        lp_l: f64,
        reference: Option<(f64, f64)>,
        t: f64,
    ) -> Result<(f64, f64, f64)> {
        let tape = Tape::with_capacity(64);
        let (w, l) = (tape.var(lp_w), tape.var(lp_l));
        let out = self.loss(w, l, reference, t)?;
        let g = tape.backward(out);
        Ok((out.value(), g.wrt(&w), g.wrt(&l)))
    }

    /// Loss of a probability-space row.
    pub fn row_loss(&self, input: &RowLossInput) -> Result<f64> {
        self.loss(input.p_w.ln(), input.p_l.ln(), input.reference_logs(), input.t)
    }
}

/// −[log p_w + λ·log σ(logit p_w − logit p_l)].
pub fn orpo_loss(input: &RowLossInput, lambda: f64) -> f64 {
    ObjectiveSpec::orpo(lambda)
        .row_loss(input)
        .expect("ORPO needs no reference")
}

/// −log σ(β(log(p_w/ref_w) − log(p_l/ref_l))).
pub fn dpo_loss(input: &RowLossInput, beta: f64) -> Result<f64> {
    ObjectiveSpec::dpo(beta).row_loss(input)
}

/// −[ψ(p_w) + λ·log σ(φ⁻¹(p_w) − φ⁻¹(p_l))].
pub fn generalized_orpo_loss(psi: &SftMap, phi_inv: &OmegaPotential, input: &RowLossInput, lambda: f64) -> f64 {
    ObjectiveSpec::gen_orpo(psi.clone(), phi_inv.clone(), lambda)
        .with_temporal(true)
        .row_loss(input)
        .expect("generalized ORPO needs no reference")
}

/// −log σ(β(φ⁻¹(p_w) − φ⁻¹(ref_w) − φ⁻¹(p_l) + φ⁻¹(ref_l))).
pub fn generalized_dpo_loss(phi_inv: &OmegaPotential, input: &RowLossInput, beta: f64) -> Result<f64> {
    ObjectiveSpec::gen_dpo(phi_inv.clone(), beta)
        .with_temporal(true)
        .row_loss(input)
}
