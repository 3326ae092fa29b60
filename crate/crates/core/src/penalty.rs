//! Per-environment risks and the invariance penalty: the squared gradient of
//! an environment's risk with respect to a fixed scalar multiplier `w = 1`
//! applied to the model output.
//!
//! For [`LossKind::Bce`] the model output is a logit `z`; the dummy scales the
//! logit, so the per-instance gradient is `(σ(z) − y)·z`. For
//! [`LossKind::Mse`] the output `F` is used as is and the gradient is
//! `2(F − y)·F`. All functions also return gradients with respect to the
//! outputs so the trainer can backpropagate.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Logit magnitude standing in for a probability of exactly 0 or 1.
pub const LOGIT_CLAMP: f64 = 40.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Bce,
    Mse,
}

/// Whether the penalty squares the gradient of the mean risk, or averages the
/// squared per-instance gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    #[default]
    MeanRisk,
    PerInstance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvBatch {
    pub env_id: u32,
    /// Logits for BCE, raw predictions for MSE.
    pub outputs: Vec<f64>,
    /// Labels as 0.0 / 1.0.
    pub labels: Vec<f64>,
    /// Number of outputs clamped when built from probabilities.
    pub clamped: usize,
}

impl EnvBatch {
    pub fn new(env_id: u32, outputs: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if outputs.len() != labels.len() {
            return Err(Error::WidthMismatch { expected: labels.len(), actual: outputs.len() });
        }
        Ok(Self { env_id, outputs, labels, clamped: 0 })
    }

    /// BCE batch from probabilities. Probabilities at 0 or 1 map to
    /// `∓LOGIT_CLAMP` and are counted in `clamped`.
    pub fn bce_from_probabilities(env_id: u32, probs: &[f64], labels: Vec<f64>) -> Result<Self> {
        let mut clamped = 0;
        let outputs = probs
            .iter()
            .map(|&p| {
                let z = (p / (1.0 - p)).ln();
                if z.abs() > LOGIT_CLAMP || z.is_nan() {
                    clamped += 1;
                }
                if z.is_nan() {
                    0.0
                } else {
                    z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
                }
            })
            .collect();
        let mut b = Self::new(env_id, outputs, labels)?;
        b.clamped = clamped;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if self.outputs.len() != self.labels.len() {
            return Err(Error::WidthMismatch { expected: self.labels.len(), actual: self.outputs.len() });
        }
        Ok(())
    }
}

/// A scalar and its gradient with respect to the batch outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Per-instance loss and its derivative in the output.
fn instance_loss(kind: LossKind, f: f64, y: f64) -> (f64, f64) {
    match kind {
        LossKind::Bce => (softplus(f) - y * f, sigmoid(f) - y),
        LossKind::Mse => ((f - y).powi(2), 2.0 * (f - y)),
    }
}

/// Per-instance `∂ℓ(wF, y)/∂w` at `w = 1`, and its derivative in `F`.
fn dummy_grad(kind: LossKind, f: f64, y: f64) -> (f64, f64) {
    match kind {
        LossKind::Bce => {
            let s = sigmoid(f);
            ((s - y) * f, s * (1.0 - s) * f + s - y)
        }
        LossKind::Mse => (2.0 * (f - y) * f, 2.0 * (2.0 * f - y)),
    }
}

/// Mean per-instance loss.
pub fn risk(batch: &EnvBatch, kind: LossKind) -> Result<f64> {
    Ok(risk_grad(batch, kind)?.value)
}

pub fn risk_grad(batch: &EnvBatch, kind: LossKind) -> Result<ValueGrad> {
    batch.check()?;
    let n = batch.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(batch.len());
    for (&f, &y) in batch.outputs.iter().zip(&batch.labels) {
        let (l, d) = instance_loss(kind, f, y);
        value += l;
        grad.push(d / n);
    }
    Ok(ValueGrad { value: value / n, grad })
}

/// Invariance penalty of one environment in the default mode.
pub fn irm_penalty(batch: &EnvBatch, kind: LossKind) -> Result<f64> {
    Ok(irm_penalty_grad(batch, kind, PenaltyMode::MeanRisk)?.value)
}

pub fn irm_penalty_grad(batch: &EnvBatch, kind: LossKind, mode: PenaltyMode) -> Result<ValueGrad> {
    batch.check()?;
    let n = batch.len() as f64;
    let parts: Vec<(f64, f64)> =
        batch.outputs.iter().zip(&batch.labels).map(|(&f, &y)| dummy_grad(kind, f, y)).collect();
    match mode {
        PenaltyMode::MeanRisk => {
            let g = parts.iter().map(|p| p.0).sum::<f64>() / n;
            let grad = parts.iter().map(|p| 2.0 * g * p.1 / n).collect();
            Ok(ValueGrad { value: g * g, grad })
        }
        PenaltyMode::PerInstance => {
            let value = parts.iter().map(|p| p.0 * p.0).sum::<f64>() / n;
            let grad = parts.iter().map(|p| 2.0 * p.0 * p.1 / n).collect();
            Ok(ValueGrad { value, grad })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvTerms {
    pub env_id: u32,
    pub risk: f64,
    pub penalty: f64,
}

/// `Σ_e (risk_e + alpha · penalty_e)`.
pub fn irm_objective(terms: &[EnvTerms], alpha: f64) -> f64 {
    terms.iter().map(|t| t.risk + alpha * t.penalty).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct IrmLoss {
    pub total: f64,
    pub terms: Vec<EnvTerms>,
    /// Gradient of `total` with respect to each batch's outputs.
    pub grads: Vec<Vec<f64>>,
}

pub fn irm_regularized_loss(batches: &[EnvBatch], kind: LossKind, alpha: f64) -> Result<f64> {
    Ok(irm_regularized_loss_grad(batches, kind, alpha, PenaltyMode::MeanRisk)?.total)
}

pub fn irm_regularized_loss_grad(
    batches: &[EnvBatch],
    kind: LossKind,
    alpha: f64,
    mode: PenaltyMode,
) -> Result<IrmLoss> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("no environments".into()));
    }
    let mut terms = Vec::with_capacity(batches.len());
    let mut grads = Vec::with_capacity(batches.len());
    for b in batches {
        let r = risk_grad(b, kind)?;
        let p = irm_penalty_grad(b, kind, mode)?;
        let g = r.grad.iter().zip(&p.grad).map(|(a, b)| a + alpha * b).collect();
        terms.push(EnvTerms { env_id: b.env_id, risk: r.value, penalty: p.value });
        grads.push(g);
    }
    Ok(IrmLoss { total: irm_objective(&terms, alpha), terms, grads })
}

/// Hard label read off an output.
pub fn predict(kind: LossKind, output: f64) -> f64 {
    let threshold = match kind {
        LossKind::Bce => 0.0,
        LossKind::Mse => 0.5,
    };
    if output > threshold {
        1.0
    } else {
        0.0
    }
}
