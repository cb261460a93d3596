//! Smoothed-target losses with closed-form logit gradients.
//!
//! Every loss here is a cross entropy against a mixed target
//! `(1 - alpha) * onehot(y) + alpha * q` for some prior `q`, except the
//! confidence penalty, which subtracts a scaled entropy instead. Each function
//! returns the [`LossBreakdown`] and the gradient with respect to the student
//! logits.

use crate::error::{Error, Result};
use crate::prob::{adaptive_alpha, entropy, softmax, softmax_with_temperature, AlphaValue, Logits, ProbDist};
use crate::scalar::{safe_ln, Scalar};

/// Default fixed smoothing weight.
pub const DEFAULT_FIXED_ALPHA: f64 = 0.1;
/// Default confidence-penalty strength.
pub const DEFAULT_BETA: f64 = 0.78;
/// Default ceiling of the linear alpha ramp.
pub const DEFAULT_MAX_ALPHA: f64 = 0.7;
/// Default epoch at which the linear alpha ramp saturates.
pub const DEFAULT_MAX_EPOCH: u32 = 150;

/// Ground-truth class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TargetLabel(usize);

impl TargetLabel {
    pub fn new(index: usize, n_classes: usize) -> Result<Self> {
        if index >= n_classes {
            return Err(Error::invalid(format!(
                "target {index} out of range for {n_classes} classes"
            )));
        }
        Ok(Self(index))
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// The distribution mixed into the one-hot target.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorDistribution<T> {
    Uniform,
    Unigram(ProbDist<T>),
    Teacher(ProbDist<T>),
}

impl<T: Scalar> PriorDistribution<T> {
    /// Label-frequency prior with add-one smoothing.
    pub fn unigram_from_labels(labels: &[usize], n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid("unigram prior needs at least 2 classes"));
        }
        let mut counts = vec![1usize; n_classes];
        for &l in labels {
            if l >= n_classes {
                return Err(Error::invalid(format!(
                    "label {l} out of range for {n_classes} classes"
                )));
            }
            counts[l] += 1;
        }
        let total = T::of_usize(labels.len() + n_classes);
        let probs = counts.into_iter().map(|c| T::of_usize(c) / total).collect();
        Ok(Self::Unigram(ProbDist::new(probs)?))
    }

    /// Materializes the prior over `n` classes.
    pub fn resolve(&self, n: usize) -> Result<ProbDist<T>> {
        let p = match self {
            Self::Uniform => return ProbDist::uniform(n),
            Self::Unigram(p) | Self::Teacher(p) => p,
        };
        if p.len() != n {
            return Err(Error::invalid(format!(
                "prior has {} classes, expected {n}",
                p.len()
            )));
        }
        Ok(p.clone())
    }
}

/// Loss value split into its components.
///
/// `total = (1 - alpha) * hard_term + alpha * teacher_term + penalty_term`,
/// where `hard_term` is the unweighted cross entropy against the one-hot
/// target and `teacher_term` the unweighted cross entropy against the prior.
/// `penalty_term` is zero except for the confidence penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub hard_term: T,
    pub teacher_term: T,
    pub penalty_term: T,
    pub alpha_used: AlphaValue<T>,
}

impl<T: Scalar> LossBreakdown<T> {
    /// Recomputes the total from the components.
    pub fn reconstruct(&self) -> T {
        let a = self.alpha_used.get();
        (T::one() - a) * self.hard_term + a * self.teacher_term + self.penalty_term
    }
}

/// Loss breakdown paired with the gradient with respect to the student logits.
pub type LossAndGrad<T> = (LossBreakdown<T>, Vec<T>);

fn check_label(n: usize, y: TargetLabel) -> Result<()> {
    if y.index() >= n {
        return Err(Error::invalid(format!(
            "target {} out of range for {n} classes",
            y.index()
        )));
    }
    Ok(())
}

fn check_same_len(student: usize, other: usize) -> Result<()> {
    if student != other {
        return Err(Error::invalid(format!(
            "student has {student} classes, teacher/prior has {other}"
        )));
    }
    Ok(())
}

/// Cross entropy of the student distribution against
/// `(1 - alpha) * onehot(y) + alpha * prior`.
///
/// Gradient: `p_i - (1 - alpha) y_i - alpha prior_i`. `alpha` is a constant of
/// the gradient no matter where it came from.
pub fn soft_target_loss<T: Scalar>(
    p: &ProbDist<T>,
    y: TargetLabel,
    prior: &ProbDist<T>,
    alpha: AlphaValue<T>,
) -> Result<LossAndGrad<T>> {
    let n = p.len();
    check_label(n, y)?;
    check_same_len(n, prior.len())?;
    let a = alpha.get();
    let hard_term = -safe_ln(p.get(y.index()));
    let teacher_term: T = p
        .probs()
        .iter()
        .zip(prior.probs())
        .map(|(&pi, &qi)| -qi * safe_ln(pi))
        .sum();
    let grad = p
        .probs()
        .iter()
        .zip(prior.probs())
        .enumerate()
        .map(|(i, (&pi, &qi))| {
            let yi = if i == y.index() { T::one() } else { T::zero() };
            pi - (T::one() - a) * yi - a * qi
        })
        .collect();
    let breakdown = LossBreakdown {
        total: (T::one() - a) * hard_term + a * teacher_term,
        hard_term,
        teacher_term,
        penalty_term: T::zero(),
        alpha_used: alpha,
    };
    Ok((breakdown, grad))
}

/// Hard-target cross entropy; gradient `p - onehot(y)`.
pub fn ce_loss<T: Scalar>(z: &Logits<T>, y: TargetLabel) -> Result<LossAndGrad<T>> {
    let p = softmax(z);
    ce_from_probs(&p, y)
}

pub fn ce_from_probs<T: Scalar>(p: &ProbDist<T>, y: TargetLabel) -> Result<LossAndGrad<T>> {
    check_label(p.len(), y)?;
    let hard_term = -safe_ln(p.get(y.index()));
    let mut grad = p.probs().to_vec();
    grad[y.index()] -= T::one();
    let breakdown = LossBreakdown {
        total: hard_term,
        hard_term,
        teacher_term: T::zero(),
        penalty_term: T::zero(),
        alpha_used: AlphaValue::zero(),
    };
    Ok((breakdown, grad))
}

/// Label smoothing with a fixed prior (uniform or unigram).
pub fn label_smoothing_loss<T: Scalar>(
    z: &Logits<T>,
    y: TargetLabel,
    q: &PriorDistribution<T>,
    alpha: AlphaValue<T>,
) -> Result<LossAndGrad<T>> {
    if matches!(q, PriorDistribution::Teacher(_)) {
        return Err(Error::invalid(
            "teacher prior is not a fixed smoothing prior; use adaptive_skd_loss or kd_loss",
        ));
    }
    let prior = q.resolve(z.len())?;
    soft_target_loss(&softmax(z), y, &prior, alpha)
}

/// Knowledge-distillation loss with temperature.
///
/// The hard term always uses the unit-temperature student distribution; the
/// soft term is the cross entropy between the temperature-smoothed teacher and
/// student. No `T^2` factor is applied, so at `temperature = 1` the gradient is
/// `(1 - alpha)(p - y) + alpha (p - p_teacher)`.
pub fn kd_loss<T: Scalar>(
    z_student: &Logits<T>,
    z_teacher: &Logits<T>,
    y: TargetLabel,
    alpha: AlphaValue<T>,
    temperature: T,
) -> Result<LossAndGrad<T>> {
    check_same_len(z_student.len(), z_teacher.len())?;
    let p = softmax(z_student);
    if temperature == T::one() {
        let phi = softmax(z_teacher);
        return soft_target_loss(&p, y, &phi, alpha);
    }
    check_label(p.len(), y)?;
    let p_soft = softmax_with_temperature(z_student, temperature)?;
    let phi_soft = softmax_with_temperature(z_teacher, temperature)?;
    let a = alpha.get();
    let hard_term = -safe_ln(p.get(y.index()));
    let teacher_term: T = p_soft
        .probs()
        .iter()
        .zip(phi_soft.probs())
        .map(|(&pi, &qi)| -qi * safe_ln(pi))
        .sum();
    let grad = (0..p.len())
        .map(|i| {
            let yi = if i == y.index() { T::one() } else { T::zero() };
            (T::one() - a) * (p.get(i) - yi) + a * (p_soft.get(i) - phi_soft.get(i)) / temperature
        })
        .collect();
    let breakdown = LossBreakdown {
        total: (T::one() - a) * hard_term + a * teacher_term,
        hard_term,
        teacher_term,
        penalty_term: T::zero(),
        alpha_used: alpha,
    };
    Ok((breakdown, grad))
}

/// Self-distillation loss with the per-sample entropy-normalized weight.
///
/// The weight is computed from a detached copy of the student distribution and
/// recorded in `alpha_used`. A missing teacher is a precondition error; the
/// trainer decides the fallback.
pub fn adaptive_skd_loss<T: Scalar>(
    z_student: &Logits<T>,
    z_teacher: Option<&Logits<T>>,
    y: TargetLabel,
) -> Result<LossAndGrad<T>> {
    let z_teacher = z_teacher
        .ok_or_else(|| Error::Precondition("adaptive self-distillation needs a teacher".into()))?;
    check_same_len(z_student.len(), z_teacher.len())?;
    adaptive_skd_from_probs(&softmax(z_student), &softmax(z_teacher), y)
}

/// [`adaptive_skd_loss`] on precomputed distributions.
pub fn adaptive_skd_from_probs<T: Scalar>(
    p: &ProbDist<T>,
    phi: &ProbDist<T>,
    y: TargetLabel,
) -> Result<LossAndGrad<T>> {
    let alpha = adaptive_alpha(&p.detached())?;
    soft_target_loss(p, y, phi, alpha)
}

/// Cross entropy minus `beta` times the prediction entropy.
///
/// With `H = -sum p ln p`, `dH/dz_k = -p_k (ln p_k + H)`, so the gradient is
/// `p - onehot(y) + beta p_k (ln p_k + H)`.
pub fn confidence_penalty_loss<T: Scalar>(
    z: &Logits<T>,
    y: TargetLabel,
    beta: T,
) -> Result<LossAndGrad<T>> {
    if !(beta >= T::zero()) {
        return Err(Error::invalid(format!("beta must be non-negative, got {beta}")));
    }
    let p = softmax(z);
    confidence_penalty_from_probs(&p, y, beta)
}

pub fn confidence_penalty_from_probs<T: Scalar>(
    p: &ProbDist<T>,
    y: TargetLabel,
    beta: T,
) -> Result<LossAndGrad<T>> {
    let (ce, mut grad) = ce_from_probs(p, y)?;
    let h = entropy(p);
    for (g, &pk) in grad.iter_mut().zip(p.probs()) {
        if pk > T::zero() {
            *g += beta * pk * (safe_ln(pk) + h);
        }
    }
    let breakdown = LossBreakdown {
        total: ce.hard_term - beta * h,
        penalty_term: -beta * h,
        ..ce
    };
    Ok((breakdown, grad))
}

/// `min(max_alpha, max_alpha * epoch / max_epoch)`.
pub fn linear_alpha_schedule<T: Scalar>(
    epoch: u32,
    max_alpha: T,
    max_epoch: u32,
) -> Result<AlphaValue<T>> {
    if max_epoch == 0 {
        return Err(Error::invalid("max_epoch must be at least 1"));
    }
    let ceiling = AlphaValue::new(max_alpha)?.get();
    let ramp = ceiling * T::of(f64::from(epoch)) / T::of(f64::from(max_epoch));
    Ok(AlphaValue::saturating(ramp.min(ceiling)))
}
