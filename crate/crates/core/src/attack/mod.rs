//! Targeted input-space attacks on the origin probe: FGSM steps, projected
//! gradient descent inside an L∞ ball, and the conversion artifacts they
//! produce.
//!
//! The attacked quantity is the probe's cross-entropy toward a *target*
//! style, differentiated through the frozen encoder to the input pixels.
//! A targeted FGSM step descends that loss:
//!
//! ```text
//! x' = x - ε · sign(∇ₓ L(probe(enc(x)), target))
//! ```
//!
//! PGD iterates the step and projects back into the ball after each one:
//! clip to `x₀ ± r`, then clamp to `[0, 1]`. Gradient math is generic over
//! the float type so the f64 finite-difference oracle exercises the exact
//! code path the f32 production attack uses. Backbone checksum enforcement
//! happens in [`convert`], the user-facing entry point; the inner math
//! functions trust their caller so they can run against hand-built probes.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sample;
use crate::nn::NdFloat;
use crate::probe::{Probe, ProbeError};
use crate::segcore::{GradSeeds, SegError, SegModel};

mod persist;
pub use persist::{apply_delta, load_conversion_record, load_delta, save_conversion, ConversionRecord};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("non-finite gradient at attack step {step}")]
    NonFinite { step: usize },
    #[error("target style {target} out of range ({n_styles} styles)")]
    BadTarget { target: usize, n_styles: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed conversion artifact {path}: {msg}")]
    Artifact { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Step size ε.
    pub eps: f32,
    /// Number of PGD steps N.
    pub steps: usize,
    /// L∞ ball radius r around the clean input.
    pub radius: f32,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            eps: 5e-3,
            steps: 5,
            radius: 5.0 / 255.0,
        }
    }
}

/// One PGD step's bookkeeping: the probe loss and prediction evaluated at
/// the iterate *before* step `step+1` is taken (step 0 = clean input).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackStep {
    pub step: usize,
    pub loss: f64,
    pub pred: u16,
}

#[derive(Debug, Clone)]
pub struct AttackResult<F> {
    pub x_adv: Array3<F>,
    pub trace: Vec<AttackStep>,
    pub initial_pred: u16,
    pub final_pred: u16,
    pub target: u16,
    pub success: bool,
    /// ‖x_adv − x₀‖∞.
    pub linf: F,
}

/// sign with sign(0) = 0, as the FGSM formula intends.
fn sign<F: NdFloat>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

fn onehot(target: usize, n: usize) -> Vec<f64> {
    let mut q = vec![0.0; n];
    q[target] = 1.0;
    q
}

fn check_target_dist(q: &[f64], n_styles: usize) -> Result<(), AttackError> {
    if q.len() != n_styles {
        return Err(AttackError::BadTarget {
            target: q.len(),
            n_styles,
        });
    }
    Ok(())
}

/// Probe CE loss against target distribution `q` and its gradient at the
/// input pixels, computed by seeding the probe's tap and pulling back
/// through the encoder (no parameter gradients, no im2col caches).
pub fn input_gradient_soft<F: NdFloat>(
    model: &SegModel<F>,
    probe: &Probe,
    x: &Array3<F>,
    q: &[f64],
) -> Result<(F, Array3<F>, u16), AttackError> {
    check_target_dist(q, probe.n_styles)?;
    let cache = model.forward_cached(x, Some(probe.tap), false)?;
    let tap_val = cache.tap_value(probe.tap).ok_or(SegError::TapNotCached {
        name: probe.tap.name(),
    })?;
    let (loss, seed, pred) = probe.loss_grad_wrt_tap_soft(tap_val, q);
    let seeds = GradSeeds {
        d_probs: None,
        d_taps: vec![(probe.tap, seed)],
    };
    let dx = model.backward(&cache, &seeds, None)?;
    Ok((loss, dx, pred))
}

/// One-hot wrapper over [`input_gradient_soft`].
pub fn input_gradient<F: NdFloat>(
    model: &SegModel<F>,
    probe: &Probe,
    x: &Array3<F>,
    target: usize,
) -> Result<(F, Array3<F>, u16), AttackError> {
    if target >= probe.n_styles {
        return Err(AttackError::BadTarget {
            target,
            n_styles: probe.n_styles,
        });
    }
    input_gradient_soft(model, probe, x, &onehot(target, probe.n_styles))
}

/// Forward-only probe loss and prediction (for trace bookkeeping).
pub fn probe_loss_at_soft<F: NdFloat>(
    model: &SegModel<F>,
    probe: &Probe,
    x: &Array3<F>,
    q: &[f64],
) -> Result<(F, u16), AttackError> {
    check_target_dist(q, probe.n_styles)?;
    let cache = model.forward_cached(x, Some(probe.tap), false)?;
    let tap_val = cache.tap_value(probe.tap).ok_or(SegError::TapNotCached {
        name: probe.tap.name(),
    })?;
    let (loss, _, pred) = probe.loss_grad_wrt_tap_soft(tap_val, q);
    Ok((loss, pred))
}

/// One-hot wrapper over [`probe_loss_at_soft`].
pub fn probe_loss_at<F: NdFloat>(
    model: &SegModel<F>,
    probe: &Probe,
    x: &Array3<F>,
    target: usize,
) -> Result<(F, u16), AttackError> {
    if target >= probe.n_styles {
        return Err(AttackError::BadTarget {
            target,
            n_styles: probe.n_styles,
        });
    }
    probe_loss_at_soft(model, probe, x, &onehot(target, probe.n_styles))
}

/// One targeted FGSM step: `x - eps * sign(grad)`. No projection; PGD and
/// callers that need the ball apply [`project_linf`] afterwards.
pub fn fgsm_step<F: NdFloat>(x: &Array3<F>, grad: &Array3<F>, eps: F) -> Array3<F> {
    let mut out = x.clone();
    ndarray::Zip::from(&mut out).and(grad).for_each(|o, &g| {
        *o = *o - eps * sign(g);
    });
    out
}

/// Project into the L∞ ball of `radius` around `x0`, then clamp to `[0,1]`.
pub fn project_linf<F: NdFloat>(x: &Array3<F>, x0: &Array3<F>, radius: F) -> Array3<F> {
    let mut out = x.clone();
    ndarray::Zip::from(&mut out).and(x0).for_each(|o, &c| {
        let lo = (c - radius).max(F::zero());
        let hi = (c + radius).min(F::one());
        *o = (*o).max(lo).min(hi);
    });
    out
}

fn check_finite<F: NdFloat>(g: &Array3<F>, step: usize) -> Result<(), AttackError> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AttackError::NonFinite { step })
    }
}

fn argmax_dist(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// L∞ projected gradient descent minimizing CE against a target
/// distribution `q` over origins, starting at the clean input (no random
/// start, no momentum). The trace records the loss and prediction at the
/// clean input and after every step; a non-finite gradient aborts with the
/// index of the step that produced it. Success means the final prediction
/// lands on the argmax of `q` (ties broken toward the lower index).
pub fn pgd_attack_soft<F: NdFloat>(
    model: &SegModel<F>,
    probe: &Probe,
    x0: &Array3<F>,
    q: &[f64],
    cfg: &AttackConfig,
) -> Result<AttackResult<F>, AttackError> {
    check_target_dist(q, probe.n_styles)?;
    let eps = F::from(cfg.eps).unwrap();
    let radius = F::from(cfg.radius).unwrap();
    let mut x = x0.clone();
    let (l0, mut grad, pred0) = input_gradient_soft(model, probe, &x, q)?;
    if !l0.is_finite() {
        return Err(AttackError::NonFinite { step: 0 });
    }
    check_finite(&grad, 0)?;
    let mut trace = vec![AttackStep {
        step: 0,
        loss: l0.to_f64().unwrap(),
        pred: pred0,
    }];
    let mut last_pred = pred0;
    for step in 1..=cfg.steps {
        x = project_linf(&fgsm_step(&x, &grad, eps), x0, radius);
        if step < cfg.steps {
            let (l, g, pred) = input_gradient_soft(model, probe, &x, q)?;
            if !l.is_finite() {
                return Err(AttackError::NonFinite { step });
            }
            check_finite(&g, step)?;
            grad = g;
            trace.push(AttackStep {
                step,
                loss: l.to_f64().unwrap(),
                pred,
            });
            last_pred = pred;
        } else {
            // final iterate: forward-only bookkeeping
            let (l, pred) = probe_loss_at_soft(model, probe, &x, q)?;
            trace.push(AttackStep {
                step,
                loss: l.to_f64().unwrap(),
                pred,
            });
            last_pred = pred;
        }
    }
    let linf = x
        .iter()
        .zip(x0.iter())
        .map(|(&a, &b)| (a - b).abs())
        .fold(F::zero(), F::max);
    let target = argmax_dist(q);
    Ok(AttackResult {
        x_adv: x,
        trace,
        initial_pred: pred0,
        final_pred: last_pred,
        target: target as u16,
        success: last_pred as usize == target,
        linf,
    })
}

/// L∞ projected gradient descent toward a single `target` origin; one-hot
/// wrapper over [`pgd_attack_soft`].
pub fn pgd_attack<F: NdFloat>(
    model: &SegModel<F>,
    probe: &Probe,
    x0: &Array3<F>,
    target: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult<F>, AttackError> {
    if target >= probe.n_styles {
        return Err(AttackError::BadTarget {
            target,
            n_styles: probe.n_styles,
        });
    }
    pgd_attack_soft(model, probe, x0, &onehot(target, probe.n_styles), cfg)
}

/// Everything one conversion produces: the adversarial image, the exact
/// additive delta, and the serializable record.
pub struct ConversionOutcome {
    pub x_adv: Array3<f32>,
    pub delta: Array3<f32>,
    pub record: ConversionRecord,
}

/// Convert one sample toward `target` style: checksum-check the backbone,
/// run PGD with `cfg`, and package the artifacts.
pub fn convert(
    model: &SegModel<f32>,
    probe: &Probe,
    sample: &Sample,
    target: usize,
    cfg: &AttackConfig,
) -> Result<ConversionOutcome, AttackError> {
    let got = model.weights_checksum();
    if got != probe.backbone_checksum {
        return Err(ProbeError::BackboneMismatch {
            expected: probe.backbone_checksum.clone(),
            got,
        }
        .into());
    }
    let res = pgd_attack(model, probe, &sample.image, target, cfg)?;
    let delta = &res.x_adv - &sample.image;
    // canonical adversarial image is clean + delta, so the persisted pair
    // reconstructs it bit-exactly
    let x_adv = &sample.image + &delta;
    let record = ConversionRecord {
        sample_id: sample.sample_id.clone(),
        source_style: sample.origin,
        target_style: target as u16,
        eps: cfg.eps,
        steps: cfg.steps,
        radius: cfg.radius,
        linf: res.linf,
        success: res.success,
        initial_pred: res.initial_pred,
        final_pred: res.final_pred,
        trace: res.trace.clone(),
        probe_tap: probe.tap.name(),
        backbone_checksum: probe.backbone_checksum.clone(),
    };
    Ok(ConversionOutcome {
        x_adv,
        delta,
        record,
    })
}
