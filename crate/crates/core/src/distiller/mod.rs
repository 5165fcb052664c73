//! Logit distillation from a frozen teacher.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{ArchKind, ModelState};
use crate::numcore::{Graph, Scalar, Tensor};
use crate::synthdata::Dataset;
use crate::trainer::{train, LossHistory, LossSpec, SoftTargets, TrainOptions};

pub const DEFAULT_TEMPERATURE: f64 = 2.0;
pub const DEFAULT_ALPHA: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    KdOnly,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight of the distillation term; exactly 1 in `KdOnly` mode.
    pub alpha: f64,
    pub mode: DistillMode,
    /// Use plain KL instead of τ²·KL.
    #[serde(default)]
    pub raw_kl: bool,
}

impl DistillConfig {
    pub fn kd_only(temperature: f64) -> Self {
        Self { temperature, alpha: 1.0, mode: DistillMode::KdOnly, raw_kl: false }
    }

    pub fn hybrid(alpha: f64, temperature: f64) -> Self {
        Self { temperature, alpha, mode: DistillMode::Hybrid, raw_kl: false }
    }

    /// Mode the task calls for: pure mimicry for classification, mixed
    /// supervision for generation.
    pub fn default_for(kind: ArchKind) -> Self {
        match kind {
            ArchKind::EncoderClassifier => Self::kd_only(DEFAULT_TEMPERATURE),
            ArchKind::DecoderLm => Self::hybrid(DEFAULT_ALPHA, DEFAULT_TEMPERATURE),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature {} must be positive", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if (self.mode == DistillMode::KdOnly) != (self.alpha == 1.0) {
            return Err(Error::InvalidConfig("alpha must be 1 exactly when mode is kd_only".into()));
        }
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec {
        match self.mode {
            DistillMode::KdOnly => LossSpec::KdOnly { temperature: self.temperature },
            DistillMode::Hybrid => LossSpec::Hybrid { alpha: self.alpha, temperature: self.temperature },
        }
    }
}

fn check_pair<S: Scalar>(z_t: &Tensor<S>, z_s: &Tensor<S>) -> Result<()> {
    if z_t.shape() != z_s.shape() || z_t.shape().is_empty() {
        return shape_err("kd_loss", format!("teacher {:?} vs student {:?}", z_t.shape(), z_s.shape()));
    }
    Ok(())
}

fn kd_graph<S: Scalar>(g: &mut Graph<S>, z_t: &Tensor<S>, z_s: &Tensor<S>, temperature: f64, factor: S) -> Result<crate::numcore::Var> {
    check_pair(z_t, z_s)?;
    let rows = z_s.rows();
    let s = g.leaf(z_s.clone().reshape(&[rows, z_s.last_dim()])?);
    g.kl_divergence(s, z_t, &vec![true; rows], S::lit(temperature), factor)
}

/// `τ²·KL(softmax(z_t/τ) ‖ softmax(z_s/τ))`, averaged over rows (the last
/// axis holds the classes).
pub fn kd_loss<S: Scalar>(z_t: &Tensor<S>, z_s: &Tensor<S>, temperature: f64) -> Result<S> {
    let mut g = Graph::new();
    let tau = S::lit(temperature);
    let v = kd_graph(&mut g, z_t, z_s, temperature, tau * tau)?;
    Ok(g.value(v).data()[0])
}

/// Plain KL of the softened distributions, without the τ² factor.
pub fn kd_loss_raw<S: Scalar>(z_t: &Tensor<S>, z_s: &Tensor<S>, temperature: f64) -> Result<S> {
    let mut g = Graph::new();
    let v = kd_graph(&mut g, z_t, z_s, temperature, S::one())?;
    Ok(g.value(v).data()[0])
}

/// `α·kd_loss + (1 − α)·cross_entropy(z_s, labels)`.
pub fn hybrid_loss<S: Scalar>(z_t: &Tensor<S>, z_s: &Tensor<S>, labels: &[usize], temperature: f64, alpha: f64) -> Result<S> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    let kd = kd_loss(z_t, z_s, temperature)?;
    let c = z_s.last_dim();
    let ce = crate::numcore::cross_entropy(&z_s.clone().reshape(&[z_s.rows(), c])?, labels)?;
    Ok(S::lit(alpha) * kd + S::lit(1.0 - alpha) * ce)
}

/// Train `student` to match the frozen `teacher` on `data`. Teacher logits
/// are computed once up front; the teacher is checked bit-unchanged after.
pub fn distill<S: Scalar>(
    teacher: &ModelState<S>,
    student: &mut ModelState<S>,
    data: &Dataset,
    config: &DistillConfig,
    opts: &TrainOptions,
) -> Result<LossHistory> {
    check_models(teacher, student)?;
    if opts.steps == 0 {
        return Ok(LossHistory::default());
    }
    let before = teacher.fingerprint();
    let targets = SoftTargets::from_teacher(teacher, data, 64)?;
    let history = distill_with_targets(student, data, &targets, config, opts)?;
    debug_assert_eq!(before, teacher.fingerprint());
    Ok(history)
}

/// As [`distill`], with teacher logits for `data` already computed.
pub fn distill_with_targets<S: Scalar>(
    student: &mut ModelState<S>,
    data: &Dataset,
    targets: &SoftTargets<S>,
    config: &DistillConfig,
    opts: &TrainOptions,
) -> Result<LossHistory> {
    config.validate()?;
    if opts.steps == 0 {
        return Ok(LossHistory::default());
    }
    let opts = TrainOptions { raw_kl: config.raw_kl, ..opts.clone() };
    train(student, data, &config.loss_spec(), Some(targets), &opts)
}

fn check_models<S: Scalar>(teacher: &ModelState<S>, student: &ModelState<S>) -> Result<()> {
    let (tc, sc) = (teacher.config(), student.config());
    if tc.arch_kind != sc.arch_kind || tc.vocab_size != sc.vocab_size || tc.num_classes != sc.num_classes {
        return Err(Error::TaskMismatch(format!(
            "teacher {:?}/vocab {}/classes {} vs student {:?}/vocab {}/classes {}",
            tc.arch_kind, tc.vocab_size, tc.num_classes, sc.arch_kind, sc.vocab_size, sc.num_classes
        )));
    }
    Ok(())
}
