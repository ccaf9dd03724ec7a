//! Distillation-based concept removal.
//!
//! The student is pulled toward a teacher-derived negative-guidance target
//! under concept prompts (removal loss) while an MSE term under calibration
//! prompts keeps it aligned with the teacher elsewhere (alignment loss).
//! [`run_continuous`] chains single-concept steps, each starting from the
//! previous step's checkpoint and always distilling against the original
//! teacher.

mod chain;
mod optim;
mod step;

use serde::{Deserialize, Serialize};

use crate::backend::{Condition, ConditionKind, LatentSample, ModelHandle, NoisePrediction};
use crate::error::{Error, Result};
use crate::norm::{mse, NormOrder};

pub use chain::{init_run, mine_calibration, run_continuous, step_checkpoint_id, RemovalJob, RunLayout};
pub use optim::{Optimizer, OptimizerKind};
pub use step::{
    loss_and_grad, run_removal_step, train_student, IterationLoss, StepOutput, StepResult, TrainingBatch,
};

/// `uncond - eta * (cond - uncond)`, elementwise.
pub fn guidance_target(uncond: &[f64], cond: &[f64], eta: f64) -> Vec<f64> {
    uncond.iter().zip(cond).map(|(u, c)| u - eta * (c - u)).collect()
}

/// Negative-guidance target from the teacher alone. Nothing here depends on
/// the student, so no gradient flows through it.
pub fn negative_guidance(
    teacher: &ModelHandle,
    x: &LatentSample,
    concept: &Condition,
    eta: f64,
) -> Result<NoisePrediction> {
    if concept.kind() != ConditionKind::Concept {
        return Err(Error::Input(format!("negative guidance needs a concept condition, got {:?}", concept.kind())));
    }
    let uncond = teacher.predict_noise(x, None)?;
    let cond = teacher.predict_noise(x, Some(concept))?;
    Ok(NoisePrediction {
        data: guidance_target(&uncond.data, &cond.data, eta),
    })
}

/// `||student(x, c, t) - target||_p`.
pub fn removal_loss(
    student: &ModelHandle,
    teacher: &ModelHandle,
    x: &LatentSample,
    concept: &Condition,
    eta: f64,
    p: NormOrder,
) -> Result<f64> {
    let target = negative_guidance(teacher, x, concept, eta)?;
    let pred = student.predict_noise(x, Some(concept))?;
    finite(p.distance(&pred.data, &target.data), "removal loss")
}

/// Mean squared error between student and teacher under a calibration prompt.
pub fn alignment_loss(student: &ModelHandle, teacher: &ModelHandle, x: &LatentSample, prompt: &Condition) -> Result<f64> {
    let s = student.predict_noise(x, Some(prompt))?;
    let t = teacher.predict_noise(x, Some(prompt))?;
    finite(mse(&s.data, &t.data), "alignment loss")
}

/// `l_rm + lambda * l_reg`; `lambda == 0` returns `l_rm` unchanged.
pub fn total_loss(l_rm: f64, l_reg: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if lambda == 0.0 {
        return Ok(l_rm);
    }
    Ok(l_rm + lambda * l_reg)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::config("lambda", format!("must be a finite value >= 0, got {lambda}")));
    }
    Ok(())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Training {
            iteration: 0,
            msg: format!("{what} is {v}"),
        })
    }
}

/// Settings for one single-concept removal step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemovalStepConfig {
    pub concept: String,
    /// Prompts mentioning the concept; empty means the bare concept name.
    pub concept_prompts: Vec<String>,
    pub lambda: f64,
    pub eta: f64,
    pub norm: NormOrder,
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// L_rm-only iterations used to expose misalignment before calibration.
    pub warmup_iterations: usize,
    pub optimizer: OptimizerKind,
    /// Gradient norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for RemovalStepConfig {
    fn default() -> Self {
        Self {
            concept: String::new(),
            concept_prompts: Vec::new(),
            lambda: 0.5,
            eta: 1.0,
            norm: NormOrder::L1,
            iterations: 200,
            learning_rate: 1e-3,
            batch_size: 1,
            warmup_iterations: 50,
            optimizer: OptimizerKind::Sgd,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl RemovalStepConfig {
    pub fn for_concept(concept: impl Into<String>) -> Self {
        Self {
            concept: concept.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.concept.trim().is_empty() {
            return Err(Error::config("concept", "must be non-empty"));
        }
        check_lambda(self.lambda)?;
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::config("eta", format!("must be a finite value >= 0, got {}", self.eta)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(
                "learning_rate",
                format!("must be a finite value > 0, got {}", self.learning_rate),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("grad_clip", format!("must be > 0, got {c}")));
            }
        }
        if self.concept_prompts.iter().any(|p| p.trim().is_empty()) {
            return Err(Error::config("concept_prompts", "prompts must be non-empty"));
        }
        Ok(())
    }

    /// The concept prompts, falling back to the concept name itself.
    pub fn prompts(&self) -> Vec<String> {
        if self.concept_prompts.is_empty() {
            vec![self.concept.clone()]
        } else {
            self.concept_prompts.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{LinearBackend, ToyBackend, ToyConfig};

    #[test]
    fn guidance_hand_values() {
        let d = guidance_target(&[0.2, 0.4], &[0.6, 0.2], 1.0);
        assert!((d[0] + 0.2).abs() < 1e-12 && (d[1] - 0.6).abs() < 1e-12);
        assert_eq!(guidance_target(&[0.2, 0.4], &[0.6, 0.2], 0.0), vec![0.2, 0.4]);
        assert_eq!(guidance_target(&[0.2, 0.4], &[0.2, 0.4], 3.7), vec![0.2, 0.4]);
    }

    #[test]
    fn total_loss_rules() {
        assert!((total_loss(0.3, 2.5, 0.5).unwrap() - 1.55).abs() < 1e-12);
        assert_eq!(total_loss(0.3, 2.5, 0.0).unwrap().to_bits(), 0.3f64.to_bits());
        assert!(total_loss(0.3, 2.5, -0.1).unwrap_err().is_config());
    }

    #[test]
    fn removal_loss_zero_when_student_hits_target() {
        // zero projection: the concept has no effect, so the target is the student's own prediction
        let t = ModelHandle::teacher(LinearBackend::from_weights(&[vec![1.0, 0.0], vec![0.0, 2.0]]));
        let s = t.clone_trainable();
        let x = LatentSample {
            data: vec![0.3, -0.7],
            timestep: 4,
            seed: 0,
        };
        let c = Condition::concept("zorblax");
        assert_eq!(removal_loss(&s, &t, &x, &c, 1.0, NormOrder::L1).unwrap(), 0.0);
        assert!(negative_guidance(&t, &x, &Condition::calibration("a cat"), 1.0).is_err());
    }

    #[test]
    fn alignment_loss_of_identical_models_is_zero() {
        let t = ModelHandle::teacher(ToyBackend::new(ToyConfig::default()));
        let s = t.clone_trainable();
        let x = s.sample_partial(&Condition::calibration("a cat"), 10, 3).unwrap();
        assert_eq!(alignment_loss(&s, &t, &x, &Condition::calibration("a cat")).unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(RemovalStepConfig::for_concept("x").validate().is_ok());
        let e = RemovalStepConfig {
            lambda: -1.0,
            ..RemovalStepConfig::for_concept("x")
        }
        .validate()
        .unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "lambda"));
        assert!(RemovalStepConfig::default().validate().is_err());
    }
}
