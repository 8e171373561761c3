//! Loss terms for partial-label incremental training.
//!
//! The classification loss blends binary cross-entropy on the current task's
//! classes with distillation against the pre-expansion model's confidences on
//! all previously seen classes. The max-entropy term rewards uncertainty on
//! old-class confidences; subtracting it from the loss pushes those
//! confidences toward 1/e, which lowers the score of spurious old-class
//! activations. All inputs are probabilities in [0, 1]; every log argument is
//! clamped to [epsilon, 1 - epsilon] first.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyForm {
    /// H = -mean(p * ln p) over the scoped classes. Maximized at p = 1/e.
    Literal,
    /// Full binary entropy -mean(p ln p + (1-p) ln(1-p)). Maximized at 0.5.
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyScope {
    OldClasses,
    AllClasses,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the new-class BCE term; the distillation term gets 1 - alpha.
    /// At the first task (no previous model) the BCE weight is 1.
    pub alpha: f64,
    /// Weight of the max-entropy term, subtracted from the total.
    pub beta: f64,
    pub entropy_scope: EntropyScope,
    pub entropy_form: EntropyForm,
    /// Clamp applied to every probability before a log.
    pub epsilon: f64,
    /// Restrict both BCE and distillation to positive terms (q * ln p only).
    /// Off by default; the symmetric form trains noticeably better.
    pub positive_only_cls: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.15,
            beta: 4e-3,
            entropy_scope: EntropyScope::OldClasses,
            entropy_form: EntropyForm::Literal,
            epsilon: 1e-7,
            positive_only_cls: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!(
                "loss.alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::config(format!(
                "loss.beta must be a finite non-negative number, got {}",
                self.beta
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::config(format!(
                "loss.epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-sample supervision: which output slots receive binary CE targets
/// (current-task classes for fresh samples, the stored task's classes for
/// replayed ones) and optional soft distillation targets for slots
/// `0..kd_targets.len()`.
#[derive(Debug, Clone)]
pub struct SampleSupervision<'a> {
    pub ce_slots: Range<usize>,
    pub ce_targets: &'a [f64],
    pub kd_targets: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub kd: f64,
    pub entropy: f64,
    pub total: f64,
}

fn clamp(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

/// Mean binary cross-entropy of probabilities `p` against targets `q`.
/// Empty slices yield 0 so callers can treat absent scopes uniformly.
fn mean_bce(q: &[f64], p: &[f64], eps: f64, positive_only: bool) -> f64 {
    if q.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for (&qi, &pi) in q.iter().zip(p) {
        let pc = clamp(pi, eps);
        acc += qi * pc.ln();
        if !positive_only {
            acc += (1.0 - qi) * (1.0 - pc).ln();
        }
    }
    -acc / q.len() as f64
}

/// Adds the gradient of `w * mean_bce(q, p)` w.r.t. `p` into `grad`.
/// Entries pushed outside the clamp range contribute zero, matching the
/// flat regions of the clamped loss.
fn add_bce_grad(grad: &mut [f64], q: &[f64], p: &[f64], eps: f64, positive_only: bool, w: f64) {
    if q.is_empty() {
        return;
    }
    let n = q.len() as f64;
    for ((g, &qi), &pi) in grad.iter_mut().zip(q).zip(p) {
        if pi <= eps || pi >= 1.0 - eps {
            continue;
        }
        let mut d = -qi / pi;
        if !positive_only {
            d += (1.0 - qi) / (1.0 - pi);
        }
        *g += w * d / n;
    }
}

fn check_supervision(y_hat: &[f64], sup: &SampleSupervision) -> Result<usize> {
    if sup.ce_slots.end > y_hat.len() || sup.ce_slots.start > sup.ce_slots.end {
        return Err(Error::shape(
            "classification loss CE slots",
            format!("range within 0..{}", y_hat.len()),
            format!("{:?}", sup.ce_slots),
        ));
    }
    if sup.ce_targets.len() != sup.ce_slots.len() {
        return Err(Error::shape(
            "classification loss CE targets",
            format!("{}", sup.ce_slots.len()),
            format!("{}", sup.ce_targets.len()),
        ));
    }
    let old = sup.kd_targets.map_or(0, <[f64]>::len);
    if old > y_hat.len() {
        return Err(Error::shape(
            "distillation targets",
            format!("at most {}", y_hat.len()),
            format!("{old}"),
        ));
    }
    Ok(old)
}

fn entropy_scope_len(y_hat_len: usize, old: usize, scope: EntropyScope) -> usize {
    match scope {
        EntropyScope::OldClasses => old,
        EntropyScope::AllClasses => y_hat_len,
    }
}

/// Full per-sample loss with both supervision kinds and the entropy term.
pub fn sample_loss(y_hat: &[f64], sup: &SampleSupervision, cfg: &LossConfig) -> Result<LossTerms> {
    let old = check_supervision(y_hat, sup)?;
    let ce = mean_bce(
        sup.ce_targets,
        &y_hat[sup.ce_slots.clone()],
        cfg.epsilon,
        cfg.positive_only_cls,
    );
    let (kd, cls) = match sup.kd_targets {
        Some(prev) => {
            let kd = mean_bce(prev, &y_hat[..old], cfg.epsilon, cfg.positive_only_cls);
            (kd, cfg.alpha * ce + (1.0 - cfg.alpha) * kd)
        }
        None => (0.0, ce),
    };
    let scoped = entropy_scope_len(y_hat.len(), old, cfg.entropy_scope);
    let entropy = max_entropy(y_hat, scoped, cfg.entropy_form, cfg.epsilon)?;
    Ok(LossTerms {
        ce,
        kd,
        entropy,
        total: cls - cfg.beta * entropy,
    })
}

/// Loss terms plus the gradient of the total w.r.t. every confidence.
pub fn sample_loss_grad(
    y_hat: &[f64],
    sup: &SampleSupervision,
    cfg: &LossConfig,
) -> Result<(LossTerms, Vec<f64>)> {
    let terms = sample_loss(y_hat, sup, cfg)?;
    let old = sup.kd_targets.map_or(0, <[f64]>::len);
    let mut grad = vec![0.0; y_hat.len()];
    let ce_weight = if sup.kd_targets.is_some() {
        cfg.alpha
    } else {
        1.0
    };
    add_bce_grad(
        &mut grad[sup.ce_slots.clone()],
        sup.ce_targets,
        &y_hat[sup.ce_slots.clone()],
        cfg.epsilon,
        cfg.positive_only_cls,
        ce_weight,
    );
    if let Some(prev) = sup.kd_targets {
        add_bce_grad(
            &mut grad[..old],
            prev,
            &y_hat[..old],
            cfg.epsilon,
            cfg.positive_only_cls,
            1.0 - cfg.alpha,
        );
    }
    if cfg.beta != 0.0 {
        let scoped = entropy_scope_len(y_hat.len(), old, cfg.entropy_scope);
        let h_grad = max_entropy_grad(y_hat, scoped, cfg.entropy_form, cfg.epsilon);
        for (g, hd) in grad.iter_mut().zip(h_grad) {
            *g -= cfg.beta * hd;
        }
    }
    Ok((terms, grad))
}

/// Blended new-class BCE and old-class distillation. `y_new` covers the
/// current task's classes, which occupy the trailing slots of `y_hat`;
/// `y_prev` covers everything before them. At the first task pass `None`
/// and the BCE term carries weight 1.
pub fn classification_loss(
    y_hat: &[f64],
    y_new: &[f64],
    y_prev: Option<&[f64]>,
    cfg: &LossConfig,
) -> Result<f64> {
    let terms = total_loss(y_hat, y_new, y_prev, cfg)?;
    Ok(match y_prev {
        Some(_) => cfg.alpha * terms.ce + (1.0 - cfg.alpha) * terms.kd,
        None => terms.ce,
    })
}

/// Entropy of the first `scoped_count` confidences.
///
/// The literal form is the mean of -p ln p; for a single class it peaks at
/// exactly 1/e when p = 1/e. Empty scopes yield 0.
pub fn max_entropy(
    y_hat: &[f64],
    scoped_count: usize,
    form: EntropyForm,
    eps: f64,
) -> Result<f64> {
    if scoped_count > y_hat.len() {
        return Err(Error::shape(
            "max_entropy scope",
            format!("at most {}", y_hat.len()),
            format!("{scoped_count}"),
        ));
    }
    if scoped_count == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for &p in &y_hat[..scoped_count] {
        let pc = clamp(p, eps);
        acc -= pc * pc.ln();
        if form == EntropyForm::Binary {
            acc -= (1.0 - pc) * (1.0 - pc).ln();
        }
    }
    Ok(acc / scoped_count as f64)
}

/// dH/dp for [`max_entropy`]; zero outside the scope and on clamped entries.
pub fn max_entropy_grad(
    y_hat: &[f64],
    scoped_count: usize,
    form: EntropyForm,
    eps: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; y_hat.len()];
    if scoped_count == 0 {
        return grad;
    }
    let n = scoped_count as f64;
    for (g, &p) in grad.iter_mut().zip(&y_hat[..scoped_count]) {
        if p <= eps || p >= 1.0 - eps {
            continue;
        }
        *g = match form {
            EntropyForm::Literal => -(p.ln() + 1.0) / n,
            EntropyForm::Binary => -(p.ln() - (1.0 - p).ln()) / n,
        };
    }
    grad
}

/// Classification loss minus beta times the entropy term, with breakdown.
/// Slot layout of `y_hat` is old classes first, then the current task's.
pub fn total_loss(
    y_hat: &[f64],
    y_new: &[f64],
    y_prev: Option<&[f64]>,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let old = y_prev.map_or(0, <[f64]>::len);
    if old + y_new.len() != y_hat.len() {
        return Err(Error::shape(
            "total_loss slot layout",
            format!("{} old + {} new", old, y_new.len()),
            format!("{} confidences", y_hat.len()),
        ));
    }
    let sup = SampleSupervision {
        ce_slots: old..y_hat.len(),
        ce_targets: y_new,
        kd_targets: y_prev,
    };
    sample_loss(y_hat, &sup, cfg)
}

/// Gradient companion of [`total_loss`].
pub fn total_loss_grad(
    y_hat: &[f64],
    y_new: &[f64],
    y_prev: Option<&[f64]>,
    cfg: &LossConfig,
) -> Result<(LossTerms, Vec<f64>)> {
    let old = y_prev.map_or(0, <[f64]>::len);
    if old + y_new.len() != y_hat.len() {
        return Err(Error::shape(
            "total_loss slot layout",
            format!("{} old + {} new", old, y_new.len()),
            format!("{} confidences", y_hat.len()),
        ));
    }
    let sup = SampleSupervision {
        ce_slots: old..y_hat.len(),
        ce_targets: y_new,
        kd_targets: y_prev,
    };
    sample_loss_grad(y_hat, &sup, cfg)
}
