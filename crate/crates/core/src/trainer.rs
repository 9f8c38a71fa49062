//! Minibatch preference-optimization of a tabular policy.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape};
use crate::data::PreferenceDataset;
use crate::error::{Error, Result};
use crate::objective::ObjectiveSpec;
use crate::optim::{clip_grad_norm, l2_norm, Adam};
use crate::policy::{log_prob_on_tape, log_softmax_on_tape, visit_counts, ProbNormalization, TabularPolicy};

/// Longest horizon accepted with unnormalized trajectory probabilities.
pub const MAX_RAW_HORIZON: usize = 20;
/// Upper bound on the number of points returned by [`replay_trace`].
pub const REPLAY_POINTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerHyper {
    pub epochs: usize,
    /// Preference rows per update.
    pub minibatch: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    /// λ of ORPO-family objectives.
    pub lambda: f64,
    pub seed: u64,
    pub normalization: ProbNormalization,
}

impl Default for TrainerHyper {
    fn default() -> Self {
        Self {
            epochs: 12,
            minibatch: 2,
            learning_rate: 1e-3,
            max_grad_norm: 1.3,
            lambda: 0.5,
            seed: 0,
            normalization: ProbNormalization::GeometricMean,
        }
    }
}

impl TrainerHyper {
    /// Every violated constraint, in field order.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs == 0 {
            out.push("trainer.epochs must be positive".to_string());
        }
        if self.minibatch == 0 {
            out.push("trainer.minibatch must be positive".to_string());
        }
        if !(self.learning_rate > 0.0) {
            out.push(format!(
                "trainer.learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.max_grad_norm > 0.0) {
            out.push(format!(
                "trainer.max_grad_norm must be positive, got {}",
                self.max_grad_norm
            ));
        }
        if !(self.lambda >= 0.0) {
            out.push(format!("trainer.lambda must be non-negative, got {}", self.lambda));
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
}

/// One row visit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    /// Normalized `log π(τ_w)` before the update.
    pub log_p_w: f64,
    pub log_p_l: f64,
    pub loss: f64,
    pub t: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingTrace {
    pub points: Vec<TracePoint>,
    /// Gradient norm of every update before clipping.
    pub grad_norms: Vec<f64>,
    /// Gradient norm of every update after clipping.
    pub clipped_norms: Vec<f64>,
}

struct PreparedRow {
    chosen: Vec<(usize, f64)>,
    rejected: Vec<(usize, f64)>,
    scale_w: f64,
    scale_l: f64,
    reference: Option<(f64, f64)>,
}

fn prepare(
    d: &PreferenceDataset,
    num_actions: usize,
    normalization: ProbNormalization,
    reference: Option<&TabularPolicy>,
) -> Result<Vec<PreparedRow>> {
    d.rows
        .iter()
        .map(|row| {
            for t in [&row.chosen, &row.rejected] {
                if t.is_empty() {
                    return Err(Error::Config("dataset contains an empty trajectory".into()));
                }
                if normalization == ProbNormalization::Raw && t.len() > MAX_RAW_HORIZON {
                    return Err(Error::Config(format!(
                        "raw trajectory probabilities need T <= {MAX_RAW_HORIZON}, got {}",
                        t.len()
                    )));
                }
            }
            let scale_w = normalization.scale(row.chosen.len());
            let scale_l = normalization.scale(row.rejected.len());
            let reference = match reference {
                Some(r) => Some((r.log_prob(&row.chosen)? * scale_w, r.log_prob(&row.rejected)? * scale_l)),
                None => None,
            };
            Ok(PreparedRow {
                chosen: visit_counts(&row.chosen, num_actions),
                rejected: visit_counts(&row.rejected, num_actions),
                scale_w,
                scale_l,
                reference,
            })
        })
        .collect()
}

/// Runs `epochs` passes of shuffled minibatch Adam updates with global-norm
/// clipping. Progress `t = n/N` for epoch `n = 0..N`. A final partial
/// minibatch is filled by wrapping around the epoch's permutation.
pub fn train(
    d: &PreferenceDataset,
    obj: &ObjectiveSpec,
    hyper: &TrainerHyper,
    init: &TabularPolicy,
    reference: Option<&TabularPolicy>,
) -> Result<(TabularPolicy, TrainingTrace)> {
    train_observed(d, obj, hyper, init, reference, |_, _| {})
}

/// [`train`], calling `observe(step, policy)` after every update.
pub fn train_observed<F: FnMut(usize, &TabularPolicy)>(
    d: &PreferenceDataset,
    obj: &ObjectiveSpec,
    hyper: &TrainerHyper,
    init: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    mut observe: F,
) -> Result<(TabularPolicy, TrainingTrace)> {
    hyper.validate()?;
    let obj = obj.clone().with_lambda(hyper.lambda);
    obj.validate()?;
    if d.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if obj.requires_reference() && reference.is_none() {
        return Err(Error::Config(format!(
            "objective {} needs a reference policy",
            obj.id()
        )));
    }
    if let Some(r) = reference {
        if r.num_states() != init.num_states() || r.num_actions() != init.num_actions() {
            return Err(Error::Config("reference and initial policy shapes differ".into()));
        }
    }
    let num_actions = init.num_actions();
    let rows = prepare(d, num_actions, hyper.normalization, reference)?;
    let n = rows.len();
    let mb = hyper.minibatch;
    let batches = n.div_ceil(mb);

    let mut policy = init.clone();
    let mut adam = Adam::new(policy.logits().len(), hyper.learning_rate);
    let mut rng = crate::rng::stream(hyper.seed, "trainer", &[]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = TrainingTrace {
        points: Vec::with_capacity(hyper.epochs * batches * mb),
        grad_norms: Vec::with_capacity(hyper.epochs * batches),
        clipped_norms: Vec::with_capacity(hyper.epochs * batches),
    };
    let node_estimate = policy.logits().len() * 6 + mb * 64;

    for epoch in 0..hyper.epochs {
        let t = epoch as f64 / hyper.epochs as f64;
        order.shuffle(&mut rng);
        for b in 0..batches {
            let step = trace.grad_norms.len();
            let tape = Tape::with_capacity(node_estimate);
            let logits = tape.vars(policy.logits());
            let table = log_softmax_on_tape(&tape, &logits, num_actions);
            let mut losses = Vec::with_capacity(mb);
            for k in 0..mb {
                let row = &rows[order[(b * mb + k) % n]];
                let lw = log_prob_on_tape(&tape, &table, &row.chosen) * row.scale_w;
                let ll = log_prob_on_tape(&tape, &table, &row.rejected) * row.scale_l;
                let loss = obj.loss(lw, ll, row.reference, t)?;
                let point = TracePoint {
                    log_p_w: lw.value(),
                    log_p_l: ll.value(),
                    loss: loss.value(),
                    t,
                };
                if !point.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        log_p_w: point.log_p_w,
                        log_p_l: point.log_p_l,
                        loss: point.loss,
                    });
                }
                trace.points.push(point);
                losses.push(loss);
            }
            let mean = tape.sum(&losses) * (1.0 / mb as f64);
            let mut grad = tape.backward(mean).wrt_all(&logits);
            let pre = clip_grad_norm(&mut grad, hyper.max_grad_norm);
            trace.grad_norms.push(pre);
            trace.clipped_norms.push(l2_norm(&grad));
            adam.descend(policy.logits_mut(), &grad);
            observe(step, &policy);
        }
    }
    Ok((policy, trace))
}

/// Mean loss over the whole dataset at progress `t`.
pub fn full_batch_loss(
    d: &PreferenceDataset,
    obj: &ObjectiveSpec,
    policy: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    normalization: ProbNormalization,
    t: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for row in &d.rows {
        let lw = normalization.apply(policy.log_prob(&row.chosen)?, row.chosen.len());
        let ll = normalization.apply(policy.log_prob(&row.rejected)?, row.rejected.len());
        let r = match reference {
            Some(r) => Some((
                normalization.apply(r.log_prob(&row.chosen)?, row.chosen.len()),
                normalization.apply(r.log_prob(&row.rejected)?, row.rejected.len()),
            )),
            None => None,
        };
        total += obj.loss(lw, ll, r, t)?;
    }
    Ok(total / d.len() as f64)
}

/// Trace points `(log p_w, log p_l, t)` thinned uniformly to at most
/// [`REPLAY_POINTS`], in order.
pub fn replay_trace(trace: &TrainingTrace) -> Result<Vec<(f64, f64, f64)>> {
    let n = trace.points.len();
    if n == 0 {
        return Err(Error::Config("cannot replay an empty training trace".into()));
    }
    let keep = n.min(REPLAY_POINTS);
    Ok((0..keep)
        .map(|i| {
            let p = trace.points[i * n / keep];
            (p.log_p_w, p.log_p_l, p.t)
        })
        .collect())
}
