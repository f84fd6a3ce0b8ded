//! Loss terms, their weighted sum, and the batch objective with gradients.

use serde::{Deserialize, Serialize};

use super::Ablation;
use crate::alignment::soften;
use crate::dataset::Image;
use crate::encoder::{Model, OutputGrads, Params, Variant};
use crate::error::{Error, Result};

/// Probability clamp for every cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub concept: f64,
    pub align: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn bce(target: f64, pred: f64) -> f64 {
    let p = clamp_p(pred);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Derivative of [`bce`] in `pred`; zero where the clamp is active.
fn bce_grad(target: f64, pred: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pred) {
        return 0.0;
    }
    -target / pred + (1.0 - target) / (1.0 - pred)
}

/// Mean binary cross-entropy between predicted probabilities and binary
/// concept labels.
pub fn concept_loss(p_hat: &[f64], c: &[u8]) -> f64 {
    let n = p_hat.len() as f64;
    p_hat.iter().zip(c).map(|(&p, &t)| bce(f64::from(t), p)).sum::<f64>() / n
}

/// `-ln softmax(logits)[y]`.
pub fn task_loss(logits: &[f64], y: usize) -> f64 {
    -softmax(logits)[y].max(PROB_CLAMP).ln()
}

/// Mean binary cross-entropy with `c_img` as target and the soft alignment
/// probabilities as prediction.
pub fn alignment_loss(c_img: &[f64], soft_align: &[f64]) -> f64 {
    let n = c_img.len() as f64;
    c_img.iter().zip(soft_align).map(|(&t, &p)| bce(t, p)).sum::<f64>() / n
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn total_loss(task: f64, concept: f64, align: f64, lambda1: f64, lambda2: f64) -> Result<LossBreakdown> {
    for (component, value) in [("task", task), ("concept", concept), ("align", align)] {
        if !value.is_finite() {
            return Err(Error::NonFinite { component, value });
        }
    }
    Ok(LossBreakdown {
        task,
        concept,
        align,
        total: task + lambda1 * concept + lambda2 * align,
        lambda1,
        lambda2,
    })
}

/// What a batch row contributes beyond its task loss.
#[derive(Debug, Clone, Copy)]
pub enum Supervision<'a> {
    /// Ground-truth concepts: concept loss.
    Concepts(&'a [u8]),
    /// Pseudo label of an unlabeled example: alignment loss, or concept
    /// loss for the pseudo-label baselines.
    Pseudo(&'a [f64]),
}

#[derive(Debug, Clone, Copy)]
pub struct BatchRow<'a> {
    pub input: &'a Image,
    pub class_label: Option<usize>,
    pub supervision: Supervision<'a>,
}

/// Everything the objective needs besides the model and batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub beta: f64,
    pub ablation: Ablation,
}

/// Multipliers on the three mean terms inside the gradient. Training uses
/// `(1, lambda1, lambda2)`; other values isolate single terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub task: f64,
    pub concept: f64,
    pub align: f64,
}

impl TermWeights {
    pub fn from_settings(s: &LossSettings) -> Self {
        Self {
            task: 1.0,
            concept: s.lambda1,
            align: s.lambda2,
        }
    }

    /// The scalar these weights define.
    pub fn combine(&self, b: &LossBreakdown) -> f64 {
        self.task * b.task + self.concept * b.concept + self.align * b.align
    }
}

/// Batch losses and their parameter gradient.
///
/// Task loss is averaged over every row with a class label, concept loss over
/// rows with ground-truth concepts, alignment loss over pseudo-labelled rows.
/// For the pseudo-label baselines, pseudo-labelled rows join the concept
/// average with their soft labels as targets and there is no alignment term.
pub fn objective(
    model: &Model,
    rows: &[BatchRow<'_>],
    settings: &LossSettings,
    weights: TermWeights,
) -> Result<(LossBreakdown, Params)> {
    let inputs: Vec<&Image> = rows.iter().map(|r| r.input).collect();
    let fw = model.forward_batch(&inputs)?;
    let (k, l) = (model.config.k, model.config.l);
    let mut grads = OutputGrads::zeros(rows.len(), k, l);
    let baseline = model.config.variant != Variant::Sscbm;

    let n_task = rows.iter().filter(|r| r.class_label.is_some()).count();
    let n_concept = rows
        .iter()
        .filter(|r| baseline || matches!(r.supervision, Supervision::Concepts(_)))
        .count();
    let n_align = if baseline {
        0
    } else {
        rows.iter().filter(|r| matches!(r.supervision, Supervision::Pseudo(_))).count()
    };

    let (mut task, mut concept, mut align) = (0.0, 0.0, 0.0);
    for (bi, row) in rows.iter().enumerate() {
        let logits = &fw.logits[bi * l..][..l];
        let p_hat = &fw.p_hat[bi * k..][..k];
        if let Some(y) = row.class_label {
            let sm = softmax(logits);
            task += -sm[y].max(PROB_CLAMP).ln() / n_task as f64;
            if sm[y] >= PROB_CLAMP {
                let scale = weights.task / n_task as f64;
                for (j, (d, s)) in grads.d_logits[bi * l..][..l].iter_mut().zip(&sm).enumerate() {
                    *d += scale * (s - if j == y { 1.0 } else { 0.0 });
                }
            }
        }
        let d_p = &mut grads.d_p_hat[bi * k..][..k];
        let concept_targets: Option<Vec<f64>> = match row.supervision {
            Supervision::Concepts(c) => Some(c.iter().map(|&b| f64::from(b)).collect()),
            Supervision::Pseudo(c) if baseline => Some(c.to_vec()),
            Supervision::Pseudo(_) => None,
        };
        if let Some(t) = concept_targets {
            let n = (n_concept * k) as f64;
            for ((d, &p), &c) in d_p.iter_mut().zip(p_hat).zip(&t) {
                concept += bce(c, p) / n;
                *d += weights.concept * bce_grad(c, p) / n;
            }
            continue;
        }
        let Supervision::Pseudo(c_img) = row.supervision else {
            unreachable!("concept rows handled above")
        };
        let n = (n_align * k) as f64;
        let s = &fw.scores[bi * k..][..k];
        let soft = soften(s, settings.tau, settings.beta);
        let d_s = &mut grads.d_scores[bi * k..][..k];
        for i in 0..k {
            match settings.ablation {
                Ablation::Full => {
                    align += bce(c_img[i], soft[i]) / n;
                    let g = weights.align * bce_grad(c_img[i], soft[i]) / n;
                    d_s[i] += g * settings.beta * soft[i] * (1.0 - soft[i]);
                }
                Ablation::WoImg => {
                    // the model's own prediction is a fixed target here
                    align += bce(p_hat[i], soft[i]) / n;
                    let g = weights.align * bce_grad(p_hat[i], soft[i]) / n;
                    d_s[i] += g * settings.beta * soft[i] * (1.0 - soft[i]);
                }
                Ablation::WoAlign => {
                    align += bce(c_img[i], p_hat[i]) / n;
                    d_p[i] += weights.align * bce_grad(c_img[i], p_hat[i]) / n;
                }
            }
        }
    }
    let breakdown = total_loss(task, concept, align, settings.lambda1, settings.lambda2)?;
    let g = model.backward(&fw, &grads);
    Ok((breakdown, g))
}
