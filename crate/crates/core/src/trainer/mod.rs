//! Training loop with per-position smoothing weights and per-epoch teacher
//! refresh.
//!
//! Model parameters are `f32`; logits are widened to `f64` before the loss,
//! and all loss, α and metric accumulation happens in `f64`. The model body is
//! generic so gradient checks can run it in `f64` too.

pub mod data;
pub mod model;
pub mod optim;
pub mod presets;

use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{CopyData, DataConfig, Dataset, Example, Input, MixtureData, Splits};
pub use model::{ForwardCache, ModelConfig, Network, Task};
pub use optim::{LrSchedule, Sgd};

/// ChaCha stream ids, so one seed drives independent data, init and shuffle
/// generators.
pub const DATA_STREAM: u64 = 0;
pub const INIT_STREAM: u64 = 1;
pub const SHUFFLE_STREAM: u64 = 2;

use crate::error::{Error, Result};
use crate::losses::{
    adaptive_skd_from_probs, ce_from_probs, confidence_penalty_from_probs, linear_alpha_schedule, soft_target_loss,
    LossAndGrad, PriorDistribution, TargetLabel, DEFAULT_BETA, DEFAULT_FIXED_ALPHA, DEFAULT_MAX_ALPHA,
    DEFAULT_MAX_EPOCH,
};
use crate::prob::{adaptive_alpha, softmax, AlphaValue, Logits, ProbDist};
use crate::registry::{evaluate_g, GKind, Retention, SequencePrediction, TeacherHandle, TeacherRegistry};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BaseCe,
    UniformLs,
    UnigramLs,
    ConfPenalty,
    AdaptiveSkd,
    FixedAlphaSkd,
    AdaptiveAlphaUniform,
    LinearAlphaSkd,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::BaseCe,
        Method::UniformLs,
        Method::UnigramLs,
        Method::ConfPenalty,
        Method::AdaptiveSkd,
        Method::FixedAlphaSkd,
        Method::AdaptiveAlphaUniform,
        Method::LinearAlphaSkd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::BaseCe => "base_ce",
            Method::UniformLs => "uniform_ls",
            Method::UnigramLs => "unigram_ls",
            Method::ConfPenalty => "conf_penalty",
            Method::AdaptiveSkd => "adaptive_skd",
            Method::FixedAlphaSkd => "fixed_alpha_skd",
            Method::AdaptiveAlphaUniform => "adaptive_alpha_uniform",
            Method::LinearAlphaSkd => "linear_alpha_skd",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    /// Methods whose prior is a past checkpoint.
    pub fn uses_teacher(self) -> bool {
        matches!(
            self,
            Method::AdaptiveSkd | Method::FixedAlphaSkd | Method::LinearAlphaSkd
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub g_kind: GKind,
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub momentum: f64,
    /// Required by uniform_ls, unigram_ls and fixed_alpha_skd.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_alpha: Option<f64>,
    /// Required by conf_penalty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Required by linear_alpha_skd.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_alpha: Option<f64>,
    /// Required by linear_alpha_skd.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epoch: Option<u32>,
    pub seed: u64,
    /// Compute teacher logits for the whole training set once per epoch
    /// instead of per batch.
    #[serde(default)]
    pub cache_teacher: bool,
    /// Keep at most this many checkpoints (best and latest always survive).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_checkpoints: Option<usize>,
}

impl TrainConfig {
    /// Desk-scale defaults with the method's own hyperparameters filled in.
    pub fn new(method: Method) -> Self {
        let mut cfg = Self {
            method,
            g_kind: GKind::Accuracy,
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            warmup_steps: 800,
            momentum: 0.9,
            fixed_alpha: None,
            beta: None,
            max_alpha: None,
            max_epoch: None,
            seed: 0,
            cache_teacher: false,
            keep_checkpoints: None,
        };
        cfg.fill_method_defaults();
        cfg
    }

    /// Fills any missing hyperparameter the method needs with its default.
    pub fn fill_method_defaults(&mut self) {
        match self.method {
            Method::UniformLs | Method::UnigramLs | Method::FixedAlphaSkd => {
                self.fixed_alpha.get_or_insert(DEFAULT_FIXED_ALPHA);
            }
            Method::ConfPenalty => {
                self.beta.get_or_insert(DEFAULT_BETA);
            }
            Method::LinearAlphaSkd => {
                self.max_alpha.get_or_insert(DEFAULT_MAX_ALPHA);
                self.max_epoch.get_or_insert(DEFAULT_MAX_EPOCH);
            }
            _ => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        let missing = |field: &str| {
            Error::invalid(format!(
                "training.{field} is required for method {}",
                self.method.name()
            ))
        };
        match self.method {
            Method::UniformLs | Method::UnigramLs | Method::FixedAlphaSkd => {
                AlphaValue::new(self.fixed_alpha.ok_or_else(|| missing("fixed_alpha"))?)?;
            }
            Method::ConfPenalty => {
                let beta = self.beta.ok_or_else(|| missing("beta"))?;
                if !(beta >= 0.0) {
                    return Err(Error::invalid(format!("training.beta must be non-negative, got {beta}")));
                }
            }
            Method::LinearAlphaSkd => {
                let max_alpha = self.max_alpha.ok_or_else(|| missing("max_alpha"))?;
                let max_epoch = self.max_epoch.ok_or_else(|| missing("max_epoch"))?;
                linear_alpha_schedule(0, max_alpha, max_epoch)?;
            }
            _ => {}
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("training.epochs and training.batch_size must be positive"));
        }
        if let Some(k) = self.keep_checkpoints {
            if k < 2 {
                return Err(Error::invalid("training.keep_checkpoints must be at least 2"));
            }
        }
        self.schedule().validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.learning_rate,
            warmup_steps: self.warmup_steps,
        }
    }
}

/// Resolved loss settings for one run.
#[derive(Debug, Clone)]
pub struct LossSpec {
    pub method: Method,
    pub fixed_alpha: f64,
    pub beta: f64,
    pub max_alpha: f64,
    pub max_epoch: u32,
    pub classes: usize,
    /// Add-one unigram prior from the training labels (unigram_ls only).
    pub unigram: Option<ProbDist<f64>>,
}

impl LossSpec {
    pub fn new(cfg: &TrainConfig, train: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let unigram = match cfg.method {
            Method::UnigramLs => match PriorDistribution::unigram_from_labels(&train.labels(), train.classes)? {
                PriorDistribution::Unigram(p) => Some(p),
                _ => unreachable!("unigram constructor"),
            },
            _ => None,
        };
        Ok(Self {
            method: cfg.method,
            fixed_alpha: cfg.fixed_alpha.unwrap_or(DEFAULT_FIXED_ALPHA),
            beta: cfg.beta.unwrap_or(DEFAULT_BETA),
            max_alpha: cfg.max_alpha.unwrap_or(DEFAULT_MAX_ALPHA),
            max_epoch: cfg.max_epoch.unwrap_or(DEFAULT_MAX_EPOCH),
            classes: train.classes,
            unigram,
        })
    }

    /// Loss and logit gradient at one position. `alpha_override` replaces the
    /// method's α (used to check that α acts as a constant).
    pub fn position_loss(
        &self,
        p: &ProbDist<f64>,
        y: TargetLabel,
        teacher: Option<&ProbDist<f64>>,
        epoch: u32,
        alpha_override: Option<f64>,
    ) -> Result<LossAndGrad<f64>> {
        let fixed = || AlphaValue::new(self.fixed_alpha);
        let pick = |default: Result<AlphaValue<f64>>| match alpha_override {
            Some(a) => AlphaValue::new(a),
            None => default,
        };
        match self.method {
            Method::BaseCe => ce_from_probs(p, y),
            Method::UniformLs => soft_target_loss(p, y, &ProbDist::uniform(p.len())?, pick(fixed())?),
            Method::UnigramLs => {
                let prior = self
                    .unigram
                    .as_ref()
                    .ok_or_else(|| Error::Precondition("unigram prior not estimated".into()))?;
                soft_target_loss(p, y, prior, pick(fixed())?)
            }
            Method::ConfPenalty => confidence_penalty_from_probs(p, y, self.beta),
            Method::AdaptiveAlphaUniform => {
                let alpha = pick(adaptive_alpha(&p.detached()))?;
                soft_target_loss(p, y, &ProbDist::uniform(p.len())?, alpha)
            }
            Method::AdaptiveSkd | Method::FixedAlphaSkd | Method::LinearAlphaSkd => {
                let Some(phi) = teacher else {
                    if epoch <= 1 {
                        return ce_from_probs(p, y);
                    }
                    return Err(Error::Precondition(format!(
                        "{} needs a teacher at epoch {epoch}",
                        self.method.name()
                    )));
                };
                match (self.method, alpha_override) {
                    (Method::AdaptiveSkd, None) => adaptive_skd_from_probs(p, phi, y),
                    (Method::AdaptiveSkd, Some(a)) => soft_target_loss(p, y, phi, AlphaValue::new(a)?),
                    (Method::FixedAlphaSkd, _) => soft_target_loss(p, y, phi, pick(fixed())?),
                    _ => {
                        let ramp = linear_alpha_schedule(epoch, self.max_alpha, self.max_epoch);
                        soft_target_loss(p, y, phi, pick(ramp)?)
                    }
                }
            }
        }
    }
}

/// Result of one forward/backward pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchOutput<T> {
    /// Mean total loss over positions; NaN when the forward pass diverged.
    pub loss: f64,
    /// Gradient of the mean loss with respect to the parameters.
    pub grad: Vec<T>,
    /// α used at every position, in batch order.
    pub alphas: Vec<f64>,
    pub positions: usize,
    /// A teacher-based method ran without a teacher (epoch-1 fallback to CE).
    pub ce_fallback: bool,
}

fn widen<T: Scalar>(z: &[T]) -> Vec<f64> {
    z.iter().map(|v| v.to_f64_lossy()).collect()
}

/// Loss and gradient for a batch, with teacher logits computed on the fly
/// through `teacher`.
pub fn forward_backward<T: Scalar>(
    net: &Network,
    params: &[T],
    batch: &[&Example],
    teacher: Option<&TeacherHandle>,
    spec: &LossSpec,
    epoch: u32,
) -> Result<BatchOutput<T>> {
    let teacher_logits: Option<Vec<Vec<Vec<f32>>>> =
        teacher.map(|h| batch.iter().map(|ex| h.forward(net, &ex.input)).collect());
    forward_backward_with(net, params, batch, teacher_logits.as_deref(), spec, epoch, None)
}

/// [`forward_backward`] with precomputed teacher logits (one entry per
/// example) and optional per-position α values replacing the method's own.
pub fn forward_backward_with<T: Scalar>(
    net: &Network,
    params: &[T],
    batch: &[&Example],
    teacher_logits: Option<&[Vec<Vec<f32>>]>,
    spec: &LossSpec,
    epoch: u32,
    alpha_override: Option<&[f64]>,
) -> Result<BatchOutput<T>> {
    let positions: usize = batch.iter().map(|ex| ex.targets.len()).sum();
    if positions == 0 {
        return Err(Error::invalid("batch has no target positions"));
    }
    if let Some(tl) = teacher_logits {
        if tl.len() != batch.len() {
            return Err(Error::invalid("teacher logits do not match the batch"));
        }
    }
    if let Some(a) = alpha_override {
        if a.len() != positions {
            return Err(Error::invalid("alpha override does not match the batch positions"));
        }
    }
    let scale = 1.0 / positions as f64;
    let mut grad = vec![T::zero(); params.len()];
    let mut alphas = Vec::with_capacity(positions);
    let mut total = 0.0;
    let mut k = 0;
    for (i, ex) in batch.iter().enumerate() {
        let cache = net.forward_cached(params, &ex.input)?;
        if cache.logits.len() != ex.targets.len() {
            return Err(Error::invalid(format!(
                "example {i}: {} outputs for {} targets",
                cache.logits.len(),
                ex.targets.len()
            )));
        }
        let mut dlogits = Vec::with_capacity(ex.targets.len());
        for (t, (z, &y)) in cache.logits.iter().zip(&ex.targets).enumerate() {
            let z = widen(z);
            if z.iter().any(|v| !v.is_finite()) {
                return Ok(BatchOutput {
                    loss: f64::NAN,
                    grad,
                    alphas,
                    positions,
                    ce_fallback: false,
                });
            }
            let p = softmax(&Logits::new(z)?);
            let phi = match teacher_logits {
                Some(tl) => {
                    let zt = tl[i]
                        .get(t)
                        .ok_or_else(|| Error::invalid("teacher produced too few positions"))?;
                    Some(softmax(&Logits::new(widen(zt))?))
                }
                None => None,
            };
            let y = TargetLabel::new(y, spec.classes)?;
            let (lb, g) = spec.position_loss(&p, y, phi.as_ref(), epoch, alpha_override.map(|a| a[k]))?;
            total += lb.total;
            alphas.push(lb.alpha_used.get());
            dlogits.push(g.into_iter().map(|v| T::of(v * scale)).collect());
            k += 1;
        }
        net.backward(params, &cache, &dlogits, &mut grad);
    }
    Ok(BatchOutput {
        loss: total * scale,
        grad,
        alphas,
        positions,
        ce_fallback: spec.method.uses_teacher() && teacher_logits.is_none(),
    })
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochDiagnostics {
    pub epoch: u32,
    /// Epoch of the checkpoint used as teacher, if any.
    pub teacher_epoch: Option<u32>,
    /// The epoch trained with plain CE because no teacher existed yet.
    pub ce_fallback: bool,
    /// Mean α over all training positions of the epoch.
    pub mean_alpha: f64,
    /// Standard deviation of α over those positions.
    pub alpha_std: f64,
    /// Mean over batches of the L2 norm of the full parameter gradient.
    pub mean_grad_norm: f64,
    /// Position-weighted mean training loss.
    pub train_loss: f64,
    pub val_score: f64,
    pub learning_rate: f64,
}

pub const DIAGNOSTICS_HEADER: &str =
    "epoch,teacher_epoch,ce_fallback,mean_alpha,alpha_std,mean_grad_norm,train_loss,val_score,learning_rate";

pub fn write_diagnostics_csv<W: Write>(mut out: W, rows: &[EpochDiagnostics]) -> io::Result<()> {
    writeln!(out, "{DIAGNOSTICS_HEADER}")?;
    for d in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            d.epoch,
            d.teacher_epoch.map(|e| e.to_string()).unwrap_or_default(),
            d.ce_fallback,
            d.mean_alpha,
            d.alpha_std,
            d.mean_grad_norm,
            d.train_loss,
            d.val_score,
            d.learning_rate
        )?;
    }
    Ok(())
}

/// Record of a teacher refresh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherRefresh {
    pub epoch: u32,
    pub teacher_epoch: u32,
    pub teacher_score: f64,
    /// Optimizer steps already taken in this epoch when the refresh happened.
    pub steps_into_epoch: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: Vec<f32>,
    pub diagnostics: Vec<EpochDiagnostics>,
    pub registry: TeacherRegistry,
    pub refreshes: Vec<TeacherRefresh>,
}

#[derive(Default)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }

    fn std(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let m = self.mean();
        (self.sum_sq / self.n as f64 - m * m).max(0.0).sqrt()
    }
}

fn check_task(net: &Network, splits: &Splits) -> Result<()> {
    for (name, d) in [
        ("train", &splits.train),
        ("validation", &splits.validation),
        ("test", &splits.test),
    ] {
        if d.is_empty() {
            return Err(Error::invalid(format!("{name} split is empty")));
        }
        if d.classes != net.classes() {
            return Err(Error::invalid(format!(
                "{name} split has {} classes, model has {}",
                d.classes,
                net.classes()
            )));
        }
    }
    Ok(())
}

/// Trains from scratch. The validation split only scores checkpoints; the
/// test split is untouched. With `registry_dir` the checkpoints and their
/// index are written there.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, splits: &Splits, registry_dir: Option<&Path>) -> Result<TrainOutcome> {
    let net = Network::from_config(model_cfg)?;
    check_task(&net, splits)?;
    let spec = LossSpec::new(cfg, &splits.train)?;
    let mut registry = match registry_dir {
        Some(dir) => TeacherRegistry::in_dir(dir, net.manifest(), cfg.g_kind)?,
        None => TeacherRegistry::in_memory(net.manifest(), cfg.g_kind),
    };
    if let Some(max) = cfg.keep_checkpoints {
        registry = registry.with_retention(Retention::Capped { max })?;
    }
    let schedule = cfg.schedule();
    let mut params: Vec<f32> = net.init(model_cfg.seed);
    let mut opt = Sgd::new(params.len(), cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut diagnostics = Vec::with_capacity(cfg.epochs as usize);
    let mut refreshes = Vec::new();

    for epoch in 1..=cfg.epochs {
        let teacher = if cfg.method.uses_teacher() && epoch > 1 {
            let h = registry.select_teacher(epoch)?;
            refreshes.push(TeacherRefresh {
                epoch,
                teacher_epoch: h.epoch(),
                teacher_score: h.val_score(),
                steps_into_epoch: 0,
            });
            Some(h)
        } else {
            None
        };
        let cached: Option<Vec<Vec<Vec<f32>>>> = match (&teacher, cfg.cache_teacher) {
            (Some(h), true) => Some(splits.train.examples.iter().map(|ex| h.forward(&net, &ex.input)).collect()),
            _ => None,
        };

        order.shuffle(&mut rng);
        let mut alpha = Moments::default();
        let mut norms = Moments::default();
        let (mut loss_sum, mut positions) = (0.0, 0usize);
        let mut fallback = false;
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &splits.train.examples[i]).collect();
            let teacher_logits: Option<Vec<Vec<Vec<f32>>>> = match (&teacher, &cached) {
                (_, Some(c)) => Some(chunk.iter().map(|&i| c[i].clone()).collect()),
                (Some(h), None) => Some(batch.iter().map(|ex| h.forward(&net, &ex.input)).collect()),
                (None, None) => None,
            };
            let out = forward_backward_with(&net, &params, &batch, teacher_logits.as_deref(), &spec, epoch, None)?;
            let norm = out.grad.iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt();
            if !out.loss.is_finite() || !norm.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            out.alphas.iter().for_each(|&a| alpha.push(a));
            norms.push(norm);
            loss_sum += out.loss * out.positions as f64;
            positions += out.positions;
            fallback |= out.ce_fallback;
            lr = opt.step(&mut params, &out.grad, &schedule);
        }

        let eval = evaluate(&net, &params, &splits.validation)?;
        let val_score = evaluate_g(&eval.predictions, cfg.g_kind)?;
        registry.store(params.clone(), epoch, val_score, cfg.g_kind)?;
        diagnostics.push(EpochDiagnostics {
            epoch,
            teacher_epoch: teacher.as_ref().map(TeacherHandle::epoch),
            ce_fallback: fallback,
            mean_alpha: alpha.mean(),
            alpha_std: alpha.std(),
            mean_grad_norm: norms.mean(),
            train_loss: loss_sum / positions as f64,
            val_score,
            learning_rate: lr,
        });
    }
    Ok(TrainOutcome {
        params,
        diagnostics,
        registry,
        refreshes,
    })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Token accuracy for sequences.
    pub accuracy: f64,
    pub mean_nll: f64,
    /// `(max probability, argmax == target)` per position.
    pub pairs: Vec<(f64, bool)>,
    pub predictions: Vec<SequencePrediction>,
}

pub fn evaluate<T: Scalar>(net: &Network, params: &[T], data: &Dataset) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(data.len());
    let mut pairs = Vec::with_capacity(data.positions());
    for ex in &data.examples {
        let probs: Vec<ProbDist<f64>> = net
            .logits(params, &ex.input)?
            .iter()
            .map(|z| Logits::new(widen(z)).map(|z| softmax(&z)))
            .collect::<Result<_>>()?;
        for (p, &y) in probs.iter().zip(&ex.targets) {
            let (k, conf) = p.argmax();
            pairs.push((conf.clamp(0.0, 1.0), k == y));
        }
        predictions.push(SequencePrediction {
            probs,
            targets: ex.targets.clone(),
        });
    }
    Ok(Evaluation {
        accuracy: evaluate_g(&predictions, GKind::Accuracy)?,
        mean_nll: evaluate_g(&predictions, GKind::Nll)?,
        pairs,
        predictions,
    })
}
