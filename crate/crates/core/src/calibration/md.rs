//! Misalignment distance: how far the student's noise predictions drift from
//! the teacher's under prompts built from an individual's entities.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GaConfig, Individual};
use crate::backend::{seeded_noise, Condition, LatentSample, ModelHandle};
use crate::error::{Error, Result};
use crate::llm::prompts::fallback_weave;
use crate::norm::NormOrder;
use crate::text::{fnv1a, mix_seed};

/// Fitness used by the genetic search. Implementations must be pure per individual.
pub trait Fitness: Sync {
    fn evaluate(&self, subject: &Individual) -> Result<f64>;
}

/// The probe prompt used for an individual's misalignment distance.
pub fn probe_prompt(subject: &Individual) -> String {
    fallback_weave(&subject.labels())
}

/// The `i`-th probe: a model-independent seeded latent and timestep.
///
/// Probes depend only on the prompt, the sample index and `seed`, never on
/// either model, so the distance is symmetric in its two arguments.
pub fn probe_sample(prompt: &str, index: usize, seed: u64, latent_len: usize, t_max: usize) -> LatentSample {
    let s = mix_seed(mix_seed(seed, fnv1a(prompt.as_bytes())), index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let timestep = rng.random_range(0..t_max);
    LatentSample {
        data: seeded_noise(latent_len, mix_seed(s, 1)),
        timestep,
        seed: s,
    }
}

/// Mean `p`-norm distance between the two models' predictions over
/// `cfg.md_samples` seeded probes of the subject's prompt.
pub fn misalignment_distance(
    teacher: &ModelHandle,
    student: &ModelHandle,
    subject: &Individual,
    cfg: &GaConfig,
) -> Result<f64> {
    if teacher.latent_shape() != student.latent_shape() || teacher.t_max() != student.t_max() {
        return Err(Error::Input(format!(
            "models disagree on latent shape or T_max: {:?}/{} vs {:?}/{}",
            teacher.latent_shape(),
            teacher.t_max(),
            student.latent_shape(),
            student.t_max()
        )));
    }
    if cfg.md_samples == 0 {
        return Err(Error::config("md_samples", "must be at least 1"));
    }
    let prompt = probe_prompt(subject);
    let cond = Condition::calibration(prompt.clone());
    let mut total = 0.0;
    for i in 0..cfg.md_samples {
        let x = probe_sample(&prompt, i, cfg.seed, teacher.latent_len(), teacher.t_max());
        let a = student.predict_noise(&x, Some(&cond))?;
        let b = teacher.predict_noise(&x, Some(&cond))?;
        total += cfg.norm.distance(&a.data, &b.data);
    }
    Ok(total / cfg.md_samples as f64)
}

/// Misalignment distance between two model snapshots.
#[derive(Debug, Clone, Copy)]
pub struct ModelFitness<'a> {
    pub teacher: &'a ModelHandle,
    pub student: &'a ModelHandle,
    pub samples: usize,
    pub norm: NormOrder,
    pub seed: u64,
}

impl<'a> ModelFitness<'a> {
    pub fn new(teacher: &'a ModelHandle, student: &'a ModelHandle, cfg: &GaConfig) -> Self {
        Self {
            teacher,
            student,
            samples: cfg.md_samples,
            norm: cfg.norm,
            seed: cfg.seed,
        }
    }
}

impl Fitness for ModelFitness<'_> {
    fn evaluate(&self, subject: &Individual) -> Result<f64> {
        let cfg = GaConfig {
            md_samples: self.samples,
            norm: self.norm,
            seed: self.seed,
            ..GaConfig::default()
        };
        misalignment_distance(self.teacher, self.student, subject, &cfg)
    }
}

/// Fixed fitness table keyed by the individual's joined labels; for tests and dry runs.
#[derive(Debug, Clone, Default)]
pub struct MdTable {
    values: HashMap<String, f64>,
    fallback: f64,
}

impl MdTable {
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        Self {
            values: entries.into_iter().map(|(k, v)| (k.into(), v)).collect(),
            fallback: 0.0,
        }
    }

    /// Value returned for individuals missing from the table.
    pub fn with_fallback(mut self, fallback: f64) -> Self {
        self.fallback = fallback;
        self
    }
}

impl Fitness for MdTable {
    /// Single-entity individuals look up their label; longer ones look up
    /// their labels joined by `+`.
    fn evaluate(&self, subject: &Individual) -> Result<f64> {
        Ok(*self.values.get(&subject.labels().join("+")).unwrap_or(&self.fallback))
    }
}
