//! Logit-gradient rescaling analysis for self-distillation.
//!
//! For a student distribution `p`, teacher `phi`, target `j` and weight
//! `alpha`, the distillation gradient is `(1 - alpha)(p - y) + alpha (p - phi)`
//! and the cross-entropy gradient is `p - y`. Their componentwise quotient is
//! the rescaling factor `w_i`:
//!
//! * target:     `w_j = (1 - alpha) + alpha (p_j - phi_j) / (p_j - 1)`
//! * non-target: `w_i = 1 - alpha phi_i / p_i`
//!
//! A negative factor means the distillation gradient points against the
//! cross-entropy gradient ("direction flip").

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{ce_loss, kd_loss, TargetLabel};
use crate::prob::{adaptive_alpha, entropy, softmax, AlphaValue, Logits, ProbDist};
use crate::scalar::Scalar;

/// A rescaling factor, or a marker for a zero cross-entropy denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ratio<T> {
    Value(T),
    Undefined,
}

impl<T: Scalar> Ratio<T> {
    pub fn value(self) -> Option<T> {
        match self {
            Ratio::Value(v) => Some(v),
            Ratio::Undefined => None,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, Ratio::Value(_))
    }

    fn from_option(v: Option<T>) -> Self {
        v.map_or(Ratio::Undefined, Ratio::Value)
    }
}

/// Per-class rescaling factors and direction-flip flags for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport<T> {
    pub target: TargetLabel,
    pub ratio_target: Ratio<T>,
    /// Indexed by class. The target slot is always `Undefined` and its flag
    /// `false`; the target lives in `ratio_target`.
    pub ratio_nontarget: Vec<Ratio<T>>,
    pub flip_target: bool,
    pub flip_nontarget: Vec<bool>,
    pub alpha: AlphaValue<T>,
    /// `phi_j <= p_j`: the teacher is no more confident on the target than the
    /// student. The absolute-value form of the target ratio is only valid here.
    pub teacher_hypothesis: bool,
}

impl<T: Scalar> GradientReport<T> {
    /// Undefined non-target ratios, excluding the reserved target slot.
    pub fn undefined_count(&self) -> usize {
        let nontarget = self
            .ratio_nontarget
            .iter()
            .enumerate()
            .filter(|(i, r)| *i != self.target.index() && !r.is_defined())
            .count();
        nontarget + usize::from(!self.ratio_target.is_defined())
    }
}

/// Signed target ratio; `None` when `p_j == 1`.
pub fn target_ratio<T: Scalar>(p_target: T, phi_target: T, alpha: AlphaValue<T>) -> Option<T> {
    let denom = p_target - T::one();
    if denom == T::zero() {
        return None;
    }
    let a = alpha.get();
    Some((T::one() - a) + a * (p_target - phi_target) / denom)
}

/// Target ratio written as `(1 - alpha) - alpha |p_j - phi_j| / |p_j - 1|`.
///
/// Equals [`target_ratio`] whenever `phi_j <= p_j < 1`.
pub fn target_ratio_abs_form<T: Scalar>(
    p_target: T,
    phi_target: T,
    alpha: AlphaValue<T>,
) -> Option<T> {
    let denom = (p_target - T::one()).abs();
    if denom == T::zero() {
        return None;
    }
    let a = alpha.get();
    Some((T::one() - a) - a * (p_target - phi_target).abs() / denom)
}

/// `1 - alpha phi_i / p_i`; `None` when `p_i == 0`.
pub fn nontarget_ratio<T: Scalar>(p_i: T, phi_i: T, alpha: AlphaValue<T>) -> Option<T> {
    if p_i == T::zero() {
        return None;
    }
    Some(T::one() - alpha.get() * phi_i / p_i)
}

/// The target flip inequality `(1 - alpha) < alpha |p_j - phi_j| / |p_j - 1|`.
pub fn flips_target<T: Scalar>(p_target: T, phi_target: T, alpha: AlphaValue<T>) -> bool {
    let a = alpha.get();
    let denom = (p_target - T::one()).abs();
    if denom == T::zero() {
        // the ratio is unbounded unless the numerator vanishes too
        return a > T::zero() && p_target != phi_target;
    }
    (T::one() - a) < a * (p_target - phi_target).abs() / denom
}

pub fn gradient_ratio<T: Scalar>(
    p_student: &ProbDist<T>,
    p_teacher: &ProbDist<T>,
    y: TargetLabel,
    alpha: AlphaValue<T>,
) -> Result<GradientReport<T>> {
    let n = p_student.len();
    if p_teacher.len() != n {
        return Err(Error::invalid(format!(
            "student has {n} classes, teacher has {}",
            p_teacher.len()
        )));
    }
    if y.index() >= n {
        return Err(Error::invalid(format!("target {} out of range", y.index())));
    }
    let j = y.index();
    let ratio_target = Ratio::from_option(target_ratio(p_student.get(j), p_teacher.get(j), alpha));
    let ratio_nontarget: Vec<Ratio<T>> = (0..n)
        .map(|i| {
            if i == j {
                Ratio::Undefined
            } else {
                Ratio::from_option(nontarget_ratio(p_student.get(i), p_teacher.get(i), alpha))
            }
        })
        .collect();
    let flip_nontarget = ratio_nontarget
        .iter()
        .map(|r| r.value().is_some_and(|v| v < T::zero()))
        .collect();
    Ok(GradientReport {
        target: y,
        ratio_target,
        flip_target: ratio_target.value().is_some_and(|v| v < T::zero()),
        ratio_nontarget,
        flip_nontarget,
        alpha,
        teacher_hypothesis: p_teacher.get(j) <= p_student.get(j),
    })
}

/// `sum_{i != j} dL_kd/dz_i / sum_{i != j} dL_ce/dz_i`.
pub fn aggregate_nontarget_ratio<T: Scalar>(
    p_student: &ProbDist<T>,
    p_teacher: &ProbDist<T>,
    y: TargetLabel,
    alpha: AlphaValue<T>,
) -> Ratio<T> {
    let a = alpha.get();
    let (mut kd, mut ce) = (T::zero(), T::zero());
    for i in (0..p_student.len()).filter(|&i| i != y.index()) {
        let p = p_student.get(i);
        kd += (T::one() - a) * p + a * (p - p_teacher.get(i));
        ce += p;
    }
    if ce == T::zero() {
        Ratio::Undefined
    } else {
        Ratio::Value(kd / ce)
    }
}

/// Average rescaling factor over class indices.
///
/// Each non-target class contributes the aggregate non-target ratio, which is
/// identical to the target ratio, so the mean reduces to `w_j`.
pub fn mean_rescaling_factor<T: Scalar>(
    p_student: &ProbDist<T>,
    p_teacher: &ProbDist<T>,
    y: TargetLabel,
    alpha: AlphaValue<T>,
) -> Option<T> {
    let n = T::of_usize(p_student.len());
    let w_target = target_ratio(p_student.get(y.index()), p_teacher.get(y.index()), alpha)?;
    let w_rest = aggregate_nontarget_ratio(p_student, p_teacher, y, alpha).value()?;
    Some((w_target + (n - T::one()) * w_rest) / n)
}

fn close<T: Scalar>(a: T, b: T, tol: T) -> bool {
    (a - b).abs() <= tol * T::one().max(a.abs()).max(b.abs())
}

/// Checks that the closed-form ratios equal the literal quotient of the
/// distillation gradient (unit temperature) by the cross-entropy gradient,
/// within `1e-9`, and that the flip flags match the raw sign test.
/// Components with a zero cross-entropy gradient are skipped.
pub fn ratio_consistency_check<T: Scalar>(
    z_student: &Logits<T>,
    z_teacher: &Logits<T>,
    y: TargetLabel,
    alpha: AlphaValue<T>,
) -> bool {
    let tol = T::of(1e-9);
    let (Ok((_, g_kd)), Ok((_, g_ce))) = (
        kd_loss(z_student, z_teacher, y, alpha, T::one()),
        ce_loss(z_student, y),
    ) else {
        return false;
    };
    let Ok(report) = gradient_ratio(&softmax(z_student), &softmax(z_teacher), y, alpha) else {
        return false;
    };
    (0..g_ce.len()).all(|i| {
        let (ratio, flip) = if i == y.index() {
            (report.ratio_target, report.flip_target)
        } else {
            (report.ratio_nontarget[i], report.flip_nontarget[i])
        };
        match ratio.value() {
            None => true,
            Some(_) if g_ce[i] == T::zero() => true,
            Some(r) => {
                let literal = g_kd[i] / g_ce[i];
                let sign_flip = g_kd[i] != T::zero() && (g_kd[i] < T::zero()) != (g_ce[i] < T::zero());
                close(r, literal, tol) && (g_kd[i] == T::zero() || flip == sign_flip)
            }
        }
    })
}

/// One row of the ratio lab output.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioRow {
    pub draw: usize,
    pub class: usize,
    pub is_target: bool,
    pub student_prob: f64,
    pub teacher_prob: f64,
    pub ratio: Ratio<f64>,
    pub flip: bool,
}

/// Random (student, teacher, target) draws with a fixed `alpha`, one row per
/// class per draw.
pub fn sample_ratio_rows(
    draws: usize,
    class_count: usize,
    alpha: AlphaValue<f64>,
    seed: u64,
) -> Result<Vec<RatioRow>> {
    if class_count < 2 {
        return Err(Error::invalid("ratio lab needs at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(draws * class_count);
    for draw in 0..draws {
        let p = random_simplex(&mut rng, class_count);
        let phi = random_simplex(&mut rng, class_count);
        let y = TargetLabel::new(rng.random_range(0..class_count), class_count)?;
        let report = gradient_ratio(&p, &phi, y, alpha)?;
        for class in 0..class_count {
            let is_target = class == y.index();
            rows.push(RatioRow {
                draw,
                class,
                is_target,
                student_prob: p.get(class),
                teacher_prob: phi.get(class),
                ratio: if is_target { report.ratio_target } else { report.ratio_nontarget[class] },
                flip: if is_target { report.flip_target } else { report.flip_nontarget[class] },
            });
        }
    }
    Ok(rows)
}

pub fn write_ratio_csv<W: Write>(mut out: W, rows: &[RatioRow]) -> io::Result<()> {
    writeln!(out, "draw,class,is_target,student_prob,teacher_prob,ratio,flip")?;
    for r in rows {
        let ratio = r.ratio.value().map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.draw, r.class, r.is_target, r.student_prob, r.teacher_prob, ratio, r.flip
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Entropy-ordered pair comparison
// ---------------------------------------------------------------------------

/// Rejection budget per valid pair.
pub const MAX_SAMPLING_ATTEMPTS: u64 = 1_000_000;

/// Student and teacher distributions for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMember {
    pub student: ProbDist<f64>,
    pub teacher: ProbDist<f64>,
}

/// Two samples sharing the student's target probability, ordered so that
/// `high` has the strictly larger student entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct PropositionSample {
    pub high: PairMember,
    pub low: PairMember,
    pub target: TargetLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreconditionFailure {
    ShapeMismatch,
    /// Student target probabilities differ by more than `1e-9`.
    TargetProbabilityMismatch,
    /// Teacher target probabilities differ by more than `1e-9`. The rescaling
    /// factor depends on the teacher's target probability, so the comparison
    /// holds it fixed across the pair.
    TeacherTargetMismatch,
    /// `H(high) > H(low)` does not hold strictly.
    EntropyNotOrdered,
    /// A teacher is at least as confident on the target as its student.
    TeacherNotLessConfident,
    /// Student target probability of exactly one.
    DegenerateTarget,
}

impl PropositionSample {
    pub fn check(&self) -> std::result::Result<(), PreconditionFailure> {
        use PreconditionFailure::*;
        let j = self.target.index();
        let n = self.high.student.len();
        if [&self.high.teacher, &self.low.student, &self.low.teacher]
            .iter()
            .any(|d| d.len() != n)
            || j >= n
        {
            return Err(ShapeMismatch);
        }
        let (ph, pl) = (self.high.student.get(j), self.low.student.get(j));
        if (ph - pl).abs() > 1e-9 {
            return Err(TargetProbabilityMismatch);
        }
        if (self.high.teacher.get(j) - self.low.teacher.get(j)).abs() > 1e-9 {
            return Err(TeacherTargetMismatch);
        }
        if ph >= 1.0 || pl >= 1.0 {
            return Err(DegenerateTarget);
        }
        if !(entropy(&self.high.student) > entropy(&self.low.student)) {
            return Err(EntropyNotOrdered);
        }
        if !(self.high.teacher.get(j) < ph && self.low.teacher.get(j) < pl) {
            return Err(TeacherNotLessConfident);
        }
        Ok(())
    }
}

/// Rescaling comparison for one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairOutcome {
    pub entropy_high: f64,
    pub entropy_low: f64,
    pub alpha_high: f64,
    pub alpha_low: f64,
    pub student_target: f64,
    pub teacher_target: f64,
    pub mean_w_high: f64,
    pub mean_w_low: f64,
}

impl PairOutcome {
    /// `E[w_high] > E[w_low]` fails by more than the slack.
    pub fn is_violation(&self, slack: f64) -> bool {
        self.mean_w_high <= self.mean_w_low - slack
    }
}

fn outcome_with(sample: &PropositionSample, alpha_high: AlphaValue<f64>, alpha_low: AlphaValue<f64>) -> Result<PairOutcome> {
    let y = sample.target;
    let w = |m: &PairMember, a| {
        mean_rescaling_factor(&m.student, &m.teacher, y, a)
            .ok_or_else(|| Error::Precondition("student target probability is one".into()))
    };
    Ok(PairOutcome {
        entropy_high: entropy(&sample.high.student),
        entropy_low: entropy(&sample.low.student),
        alpha_high: alpha_high.get(),
        alpha_low: alpha_low.get(),
        student_target: sample.high.student.get(y.index()),
        teacher_target: sample.high.teacher.get(y.index()),
        mean_w_high: w(&sample.high, alpha_high)?,
        mean_w_low: w(&sample.low, alpha_low)?,
    })
}

/// Evaluates a pair with per-sample weights from the student entropy.
pub fn evaluate_pair(sample: &PropositionSample) -> Result<PairOutcome> {
    let a_high = adaptive_alpha(&sample.high.student.detached())?;
    let a_low = adaptive_alpha(&sample.low.student.detached())?;
    outcome_with(sample, a_high, a_low)
}

/// Evaluates a pair with one weight shared by both samples. The two factors
/// then coincide, which is why the ordering needs per-sample weights.
pub fn evaluate_pair_shared_alpha(sample: &PropositionSample, alpha: AlphaValue<f64>) -> Result<PairOutcome> {
    outcome_with(sample, alpha, alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropositionReport {
    pub valid_pairs: usize,
    pub violations: usize,
    /// Draws discarded by the sampler before each valid pair was found.
    pub rejected: u64,
    pub outcomes: Vec<PairOutcome>,
}

/// Slack on the strict inequality.
pub const VIOLATION_SLACK: f64 = 1e-10;

/// Draws `n_trials` valid pairs and counts how often the higher-entropy sample
/// fails to receive the larger mean rescaling factor.
///
/// Trial `t` uses its own ChaCha stream derived from `(seed, t)`, so the report
/// does not depend on how trials are scheduled across threads.
pub fn proposition1_validate(n_trials: usize, class_count: usize, seed: u64) -> Result<PropositionReport> {
    if class_count < 3 {
        return Err(Error::invalid(format!(
            "pair sampling needs at least 3 classes, got {class_count}"
        )));
    }
    if n_trials == 0 {
        return Err(Error::invalid("n_trials must be positive"));
    }
    let trials: Vec<(PairOutcome, u64)> = (0..n_trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let (sample, rejected) = sample_proposition_pair(&mut rng, class_count)?;
            Ok((evaluate_pair(&sample)?, rejected))
        })
        .collect::<Result<_>>()?;
    let violations = trials.iter().filter(|(o, _)| o.is_violation(VIOLATION_SLACK)).count();
    Ok(PropositionReport {
        valid_pairs: trials.len(),
        violations,
        rejected: trials.iter().map(|(_, r)| r).sum(),
        outcomes: trials.into_iter().map(|(o, _)| o).collect(),
    })
}

/// Draws a pair satisfying every precondition; returns it with the number of
/// rejected draws.
pub fn sample_proposition_pair<R: Rng>(rng: &mut R, class_count: usize) -> Result<(PropositionSample, u64)> {
    for attempt in 0..MAX_SAMPLING_ATTEMPTS {
        if let Some(sample) = propose_pair(rng, class_count) {
            if sample.check().is_ok() {
                return Ok((sample, attempt));
            }
        }
    }
    Err(Error::SamplingExhausted {
        attempts: MAX_SAMPLING_ATTEMPTS,
        what: format!("entropy-ordered pair over {class_count} classes"),
    })
}

fn propose_pair<R: Rng>(rng: &mut R, n: usize) -> Option<PropositionSample> {
    let j = rng.random_range(0..n);
    let first = random_simplex(rng, n);
    let p_target = first.get(j);
    if !(p_target > 1e-6 && p_target < 1.0 - 1e-6) {
        return None;
    }
    // Second student: fresh shape on the non-target classes, same target mass.
    let second = with_target_mass(&random_simplex(rng, n - 1), j, p_target);
    let (h1, h2) = (entropy(&first), entropy(&second));
    let (high, low) = if h1 > h2 { (first, second) } else { (second, first) };

    let teacher_target = rng.random_range(0.0..p_target);
    let high_teacher = with_target_mass(&random_simplex(rng, n - 1), j, teacher_target);
    let low_teacher = with_target_mass(&random_simplex(rng, n - 1), j, teacher_target);
    Some(PropositionSample {
        high: PairMember { student: high, teacher: high_teacher },
        low: PairMember { student: low, teacher: low_teacher },
        target: TargetLabel::new(j, n).ok()?,
    })
}

/// Inserts `mass` at index `j` and rescales `rest` to cover `1 - mass`.
fn with_target_mass(rest: &ProbDist<f64>, j: usize, mass: f64) -> ProbDist<f64> {
    let mut v: Vec<f64> = rest.probs().iter().map(|q| q * (1.0 - mass)).collect();
    v.insert(j, mass);
    ProbDist::from_normalized(v)
}

/// Softmax of Gaussian logits with a random spread, covering both flat and
/// peaked distributions.
fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> ProbDist<f64> {
    let spread = rng.random_range(0.1..4.0);
    let normal = Normal::new(0.0, spread).expect("positive spread");
    let z: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    softmax(&Logits::new(z).expect("finite gaussian logits"))
}

pub fn write_proposition_csv<W: Write>(mut out: W, report: &PropositionReport) -> io::Result<()> {
    writeln!(
        out,
        "trial,entropy_high,entropy_low,alpha_high,alpha_low,student_target,teacher_target,mean_w_high,mean_w_low,violation"
    )?;
    for (t, o) in report.outcomes.iter().enumerate() {
        writeln!(
            out,
            "{t},{},{},{},{},{},{},{},{},{}",
            o.entropy_high,
            o.entropy_low,
            o.alpha_high,
            o.alpha_low,
            o.student_target,
            o.teacher_target,
            o.mean_w_high,
            o.mean_w_low,
            o.is_violation(VIOLATION_SLACK)
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Flip-region census
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CensusCell {
    pub student_target: f64,
    pub teacher_target: f64,
    pub flip: bool,
}

/// Evaluates the target flip inequality at cell centres of a
/// `grid_resolution` x `grid_resolution` grid over the open unit square,
/// keeping only cells with `teacher <= student`.
pub fn flip_region_census(grid_resolution: usize, alpha: AlphaValue<f64>) -> Result<Vec<CensusCell>> {
    if grid_resolution == 0 {
        return Err(Error::invalid("grid resolution must be positive"));
    }
    let n = grid_resolution as f64;
    let centre = |k: usize| (k as f64 + 0.5) / n;
    let mut cells = Vec::new();
    for s in 0..grid_resolution {
        for t in 0..grid_resolution {
            let (student_target, teacher_target) = (centre(s), centre(t));
            if teacher_target > student_target {
                continue;
            }
            cells.push(CensusCell {
                student_target,
                teacher_target,
                flip: flips_target(student_target, teacher_target, alpha),
            });
        }
    }
    Ok(cells)
}

pub fn write_census_csv<W: Write>(mut out: W, cells: &[CensusCell]) -> io::Result<()> {
    writeln!(out, "student_target,teacher_target,flip")?;
    for c in cells {
        writeln!(out, "{},{},{}", c.student_target, c.teacher_target, c.flip)?;
    }
    Ok(())
}
