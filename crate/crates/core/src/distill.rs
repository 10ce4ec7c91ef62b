//! Version correction of stale client models by knowledge distillation.
//!
//! When an update arrives that was trained from an outdated global model,
//! the server treats the current global model as a frozen teacher and the
//! client model as the student, and runs a short distillation pass over a
//! small labeled set it holds itself. The per-sample objective mixes a
//! temperature-softened KL term toward the teacher with a hard-label
//! cross-entropy term:
//!
//! ```text
//! L = a * KL(softmax(z_teacher / T) || softmax(z_student / T)) + (1 - a) * CE(z_student, y)
//! ```
//!
//! where the mixing weight `a` ramps linearly from `alpha_min` to
//! `alpha_max` over the first `warmup_rounds` global rounds, so that an
//! immature global model is trusted less early on.
//!
//! The KL term is used as written, without the `T^2` factor that is common
//! elsewhere; [`DistillConfig::scale_kl_by_t2`] switches it on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::nn::{self, softmax_scaled, Logits, ModelArch, NnError, ParamVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid distillation setting: {0}")]
    InvalidConfig(String),
    #[error("distillation weight must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("the distillation set is empty")]
    EmptyDistillSet,
}

pub type Result<T, E = DistillError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Rounds over which the weight ramps from `alpha_min` to `alpha_max`.
    pub warmup_rounds: u64,
    /// Passes over the distillation set per correction.
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub scale_kl_by_t2: bool,
    /// Virtual seconds the server spends on one correction.
    pub correction_cost: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 3.0,
            alpha_min: 0.2,
            alpha_max: 0.6,
            warmup_rounds: 1000,
            epochs: 1,
            lr: 0.01,
            batch: 32,
            scale_kl_by_t2: false,
            correction_cost: 0.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DistillError::InvalidConfig(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        for (name, a) in [("alpha_min", self.alpha_min), ("alpha_max", self.alpha_max)] {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("{name} must lie in [0, 1], got {a}"));
            }
        }
        if self.alpha_min > self.alpha_max {
            return bad(format!("alpha_min {} exceeds alpha_max {}", self.alpha_min, self.alpha_max));
        }
        if self.warmup_rounds == 0 || self.epochs == 0 || self.batch == 0 {
            return bad("warmup_rounds, epochs and batch must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        if !(self.correction_cost >= 0.0 && self.correction_cost.is_finite()) {
            return bad(format!("correction_cost must be finite and nonnegative, got {}", self.correction_cost));
        }
        Ok(())
    }

    /// Minibatch steps one correction takes on a distillation set of this size.
    pub fn steps_per_correction(&self, distill_len: usize) -> usize {
        self.epochs * distill_len.div_ceil(self.batch)
    }
}

/// Distillation weight at global round `t`: a linear ramp from `alpha_min`
/// at round 0 to `alpha_max` at `warmup_rounds`, flat afterwards.
pub fn adaptive_alpha(t: u64, cfg: &DistillConfig) -> f64 {
    let progress = (t as f64 / cfg.warmup_rounds as f64).min(1.0);
    cfg.alpha_min * (1.0 - progress) + cfg.alpha_max * progress
}

/// Distillation loss for one sample and its gradient w.r.t. the student logits.
///
/// The teacher logits are constants. The KL term's gradient is
/// `(softmax(z_c / T) - softmax(z_s / T)) / T` (times `T^2` when scaled).
pub fn kd_loss(
    teacher: &Logits,
    student: &Logits,
    label: usize,
    alpha: f64,
    temperature: f64,
    scale_kl_by_t2: bool,
) -> Result<(f64, Vec<f64>)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DistillError::BadAlpha(alpha));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(NnError::BadTemperature(temperature).into());
    }
    if teacher.len() != student.len() {
        return Err(NnError::DimensionMismatch {
            what: "teacher logits",
            expected: student.len(),
            got: teacher.len(),
        }
        .into());
    }
    let (ce, ce_grad) = nn::cross_entropy(student, label)?;
    let p = softmax_scaled(&teacher.0, temperature);
    let q = softmax_scaled(&student.0, temperature);
    let kl_scale = if scale_kl_by_t2 { temperature * temperature } else { 1.0 };
    let kl = kl_scale * nn::kl_raw(&p, &q);

    let loss = alpha * kl + (1.0 - alpha) * ce;
    let grad = q
        .iter()
        .zip(&p)
        .zip(&ce_grad)
        .map(|((qi, pi), gi)| alpha * kl_scale * (qi - pi) / temperature + (1.0 - alpha) * gi)
        .collect();
    Ok((loss, grad))
}

/// Distills the stale model `w_stale` toward the teacher `w_global`.
///
/// Runs `epochs` passes over `distill_set` in its stored order, in
/// minibatches of `batch`, minimizing the mean [`kd_loss`] with the weight
/// given by [`adaptive_alpha`] at `t_global`. Returns the updated student.
pub fn correct(
    w_stale: &ParamVector,
    w_global: &ParamVector,
    t_global: u64,
    distill_set: &Dataset,
    arch: &ModelArch,
    cfg: &DistillConfig,
) -> Result<ParamVector> {
    cfg.validate()?;
    if distill_set.is_empty() {
        return Err(DistillError::EmptyDistillSet);
    }
    let alpha = adaptive_alpha(t_global, cfg);
    let teacher: Vec<Logits> = (0..distill_set.len())
        .map(|i| arch.forward(w_global, distill_set.sample(i)))
        .collect::<Result<_, _>>()?;

    let order: Vec<usize> = (0..distill_set.len()).collect();
    let mut student = w_stale.clone();
    for _ in 0..cfg.epochs {
        for batch in order.chunks(cfg.batch) {
            let inputs: Vec<&[f64]> = batch.iter().map(|&i| distill_set.sample(i)).collect();
            let (_, grad) = arch.mean_gradient(&student, &inputs, |k, z| {
                let i = batch[k];
                kd_loss(&teacher[i], z, distill_set.label(i), alpha, cfg.temperature, cfg.scale_kl_by_t2)
                    .map_err(|e| match e {
                        DistillError::Nn(n) => n,
                        other => NnError::InvalidParameter(other.to_string()),
                    })
            })?;
            nn::sgd_step_in_place(&mut student, &grad, cfg.lr)?;
        }
    }
    Ok(student)
}
