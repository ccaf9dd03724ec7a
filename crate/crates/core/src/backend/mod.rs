//! Text-conditioned noise predictors.
//!
//! A [`ModelHandle`] wraps any [`DiffusionBackend`] and tags it with a role
//! (frozen teacher or trainable student), a checkpoint lineage, and a content
//! hash over its parameters. Two desk-scale backends ship with the crate:
//! [`ToyBackend`], a small nonlinear denoiser over a `2x8x8` latent, and
//! [`LinearBackend`], whose output is an affine map that is easy to check by
//! hand.

mod checkpoint;
mod linear;
mod schedule;
mod toy;

use std::fmt;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use checkpoint::{
    checkpoint_dir, load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, CheckpointStatus,
};
pub(crate) use checkpoint::save_with_status;
pub use linear::LinearBackend;
pub use schedule::NoiseSchedule;
pub use toy::{ToyBackend, ToyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    TeacherFrozen,
    StudentTrainable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionKind {
    Concept,
    CalibrationPrompt,
    Unconditional,
}

/// Text conditioning for a noise prediction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    text: String,
    kind: ConditionKind,
}

impl Condition {
    pub fn concept(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            kind: ConditionKind::Concept,
        }
    }

    pub fn calibration(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            kind: ConditionKind::CalibrationPrompt,
        }
    }

    pub fn unconditional() -> Self {
        Self {
            text: String::new(),
            kind: ConditionKind::Unconditional,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn kind(&self) -> ConditionKind {
        self.kind
    }

    /// Text handed to the backend; `None` for the unconditional branch.
    pub(crate) fn backend_text(&self) -> Option<&str> {
        match self.kind {
            ConditionKind::Unconditional => None,
            _ => Some(&self.text),
        }
    }
}

/// A latent `x_t` at a given timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub data: Vec<f64>,
    pub timestep: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction {
    pub data: Vec<f64>,
}

impl NoisePrediction {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub checkpoint_id: String,
    pub removed_concept: String,
}

/// A differentiable noise predictor `eps(x_t, c, t)` with a flat parameter vector.
pub trait DiffusionBackend: Send + Sync + fmt::Debug {
    /// Registry name used in checkpoint manifests.
    fn kind(&self) -> &'static str;

    fn latent_shape(&self) -> &[usize];

    fn schedule(&self) -> &NoiseSchedule;

    /// Noise prediction; `text == None` is the unconditional branch.
    fn forward(&self, x: &[f64], t: usize, text: Option<&str>) -> Vec<f64>;

    /// Accumulates `d<upstream, forward(x, t, text)>/d params` into `grad`.
    fn backward(&self, x: &[f64], t: usize, text: Option<&str>, upstream: &[f64], grad: &mut [f64]);

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Architecture description stored next to the parameter blob.
    fn config(&self) -> serde_json::Value;

    fn boxed_clone(&self) -> Box<dyn DiffusionBackend>;
}

/// Rebuilds a backend from its manifest description and parameter blob.
pub fn restore_backend(
    kind: &str,
    config: &serde_json::Value,
    params: Vec<f64>,
) -> Result<Box<dyn DiffusionBackend>> {
    match kind {
        toy::KIND => Ok(Box::new(ToyBackend::from_parts(config, params)?)),
        linear::KIND => Ok(Box::new(LinearBackend::from_parts(config, params)?)),
        other => Err(Error::Backend(format!("unknown backend kind `{other}`"))),
    }
}

/// A noise predictor tagged with role, lineage, and a parameter digest.
pub struct ModelHandle {
    role: Role,
    backend: Box<dyn DiffusionBackend>,
    lineage: Vec<LineageEntry>,
    checkpoint_id: Option<String>,
    parent_id: Option<String>,
    hash: OnceLock<String>,
}

impl fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelHandle")
            .field("role", &self.role)
            .field("kind", &self.backend.kind())
            .field("lineage", &self.lineage)
            .field("checkpoint_id", &self.checkpoint_id)
            .finish()
    }
}

impl ModelHandle {
    /// Wraps an original model as the frozen teacher.
    pub fn teacher(backend: impl DiffusionBackend + 'static) -> Self {
        Self::from_boxed(Role::TeacherFrozen, Box::new(backend))
    }

    pub(crate) fn from_boxed(role: Role, backend: Box<dyn DiffusionBackend>) -> Self {
        Self {
            role,
            backend,
            lineage: Vec::new(),
            checkpoint_id: None,
            parent_id: None,
            hash: OnceLock::new(),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn backend(&self) -> &dyn DiffusionBackend {
        self.backend.as_ref()
    }

    pub fn latent_shape(&self) -> &[usize] {
        self.backend.latent_shape()
    }

    pub fn latent_len(&self) -> usize {
        self.latent_shape().iter().product()
    }

    pub fn t_max(&self) -> usize {
        self.backend.schedule().t_max()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        self.backend.schedule()
    }

    pub fn lineage(&self) -> &[LineageEntry] {
        &self.lineage
    }

    /// Concepts removed so far, oldest first.
    pub fn removed_concepts(&self) -> Vec<String> {
        self.lineage.iter().map(|e| e.removed_concept.clone()).collect()
    }

    pub fn checkpoint_id(&self) -> Option<&str> {
        self.checkpoint_id.as_deref()
    }

    pub fn parent_id(&self) -> Option<&str> {
        self.parent_id.as_deref()
    }

    pub fn params(&self) -> &[f64] {
        self.backend.params()
    }

    pub fn num_params(&self) -> usize {
        self.backend.params().len()
    }

    /// Hex SHA-256 over backend kind, architecture config, and parameters.
    pub fn content_hash(&self) -> &str {
        self.hash.get_or_init(|| {
            content_digest(self.backend.kind(), &self.backend.config(), self.backend.params())
        })
    }

    /// Student initialization: a trainable deep copy sharing lineage and content hash.
    pub fn clone_trainable(&self) -> ModelHandle {
        ModelHandle {
            role: Role::StudentTrainable,
            backend: self.backend.boxed_clone(),
            lineage: self.lineage.clone(),
            checkpoint_id: None,
            parent_id: self.checkpoint_id.clone(),
            hash: self.hash.clone(),
        }
    }

    /// Applies an in-place parameter edit. Frozen handles refuse.
    pub fn update_params(&mut self, edit: impl FnOnce(&mut [f64])) -> Result<()> {
        if self.role == Role::TeacherFrozen {
            return Err(Error::Frozen("teacher parameters cannot be updated".into()));
        }
        edit(self.backend.params_mut());
        self.hash = OnceLock::new();
        Ok(())
    }

    /// Replaces all parameters (used to roll back to a known-good state).
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Input(format!(
                "parameter count {} != model's {}",
                params.len(),
                self.num_params()
            )));
        }
        self.update_params(|p| p.copy_from_slice(params))
    }

    pub(crate) fn push_lineage(&mut self, entry: LineageEntry) {
        self.lineage.push(entry);
    }

    pub(crate) fn set_ids(&mut self, checkpoint_id: Option<String>, parent_id: Option<String>) {
        self.checkpoint_id = checkpoint_id;
        self.parent_id = parent_id;
    }

    pub(crate) fn set_lineage(&mut self, lineage: Vec<LineageEntry>) {
        self.lineage = lineage;
    }

    fn check_latent(&self, data: &[f64], t: usize) -> Result<()> {
        if data.len() != self.latent_len() {
            return Err(Error::Input(format!(
                "latent has {} elements, model expects shape {:?}",
                data.len(),
                self.latent_shape()
            )));
        }
        if t >= self.t_max() {
            return Err(Error::Input(format!("timestep {t} outside [0, {})", self.t_max())));
        }
        Ok(())
    }

    /// `eps(x_t, c, t)`; `cond == None` predicts unconditionally.
    pub fn predict_noise(&self, x: &LatentSample, cond: Option<&Condition>) -> Result<NoisePrediction> {
        self.check_latent(&x.data, x.timestep)?;
        let text = cond.and_then(Condition::backend_text);
        let data = self.backend.forward(&x.data, x.timestep, text);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Backend(format!(
                "non-finite noise prediction at t={}",
                x.timestep
            )));
        }
        Ok(NoisePrediction { data })
    }

    /// Latent at timestep `t`, reverse-diffused from seeded Gaussian noise at `t_max - 1` under `cond`.
    pub fn sample_partial(&self, cond: &Condition, t: usize, seed: u64) -> Result<LatentSample> {
        let t_max = self.t_max();
        if t >= t_max {
            return Err(Error::Input(format!("timestep {t} outside [0, {t_max})")));
        }
        let text = cond.backend_text();
        let mut x = seeded_noise(self.latent_len(), seed);
        let schedule = self.backend.schedule();
        for s in (t + 1..t_max).rev() {
            let eps = self.backend.forward(&x, s, text);
            x = schedule.ddim_step(&x, &eps, s);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Backend(format!("sampling diverged before t={t}")));
        }
        Ok(LatentSample {
            data: x,
            timestep: t,
            seed,
        })
    }

    /// Fully denoised latent (`t = 0`); the toy stand-in for a generated image.
    pub fn generate(&self, cond: &Condition, seed: u64) -> Result<Vec<f64>> {
        Ok(self.sample_partial(cond, 0, seed)?.data)
    }

    /// Gradient of `<upstream, eps(x, cond, t)>` with respect to the parameters.
    pub fn accumulate_grad(
        &self,
        x: &LatentSample,
        cond: Option<&Condition>,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        self.check_latent(&x.data, x.timestep)?;
        if upstream.len() != self.latent_len() || grad.len() != self.num_params() {
            return Err(Error::Input("gradient buffer shape mismatch".into()));
        }
        let text = cond.and_then(Condition::backend_text);
        self.backend.backward(&x.data, x.timestep, text, upstream, grad);
        Ok(())
    }
}

/// Standard-normal vector from a ChaCha8 stream seeded with `seed`.
pub fn seeded_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub(crate) fn content_digest(kind: &str, config: &serde_json::Value, params: &[f64]) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0u8]);
    h.update(config.to_string().as_bytes());
    h.update([0u8]);
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelHandle {
        ModelHandle::teacher(ToyBackend::new(ToyConfig::default()))
    }

    #[test]
    fn zero_latent_unconditional_has_declared_shape() {
        let m = toy();
        let x = LatentSample {
            data: vec![0.0; m.latent_len()],
            timestep: 10,
            seed: 0,
        };
        let eps = m.predict_noise(&x, None).unwrap();
        assert_eq!(eps.len(), 2 * 8 * 8);
        assert!(eps.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn prediction_is_deterministic() {
        let m = toy();
        let x = m.sample_partial(&Condition::concept("a red fox"), 20, 3).unwrap();
        let c = Condition::concept("a red fox");
        let a = m.predict_noise(&x, Some(&c)).unwrap();
        let b = m.predict_noise(&x, Some(&c)).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn shape_and_timestep_errors() {
        let m = toy();
        let bad = LatentSample {
            data: vec![0.0; 3],
            timestep: 0,
            seed: 0,
        };
        assert!(matches!(m.predict_noise(&bad, None), Err(Error::Input(_))));
        let late = LatentSample {
            data: vec![0.0; m.latent_len()],
            timestep: m.t_max(),
            seed: 0,
        };
        assert!(matches!(m.predict_noise(&late, None), Err(Error::Input(_))));
        assert!(matches!(
            m.sample_partial(&Condition::unconditional(), 50, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn empty_text_matches_unconditional() {
        let m = toy();
        let x = m.sample_partial(&Condition::unconditional(), 30, 11).unwrap();
        let a = m.predict_noise(&x, Some(&Condition::concept(""))).unwrap();
        let b = m.predict_noise(&x, None).unwrap();
        assert_eq!(a.data, b.data);
        let c = m.predict_noise(&x, Some(&Condition::unconditional())).unwrap();
        assert_eq!(c.data, b.data);
    }

    #[test]
    fn last_timestep_is_pure_seeded_noise() {
        let m = toy();
        let x = m.sample_partial(&Condition::concept("anything"), m.t_max() - 1, 42).unwrap();
        assert_eq!(x.data, seeded_noise(m.latent_len(), 42));
        let again = m.sample_partial(&Condition::concept("anything"), m.t_max() - 1, 42).unwrap();
        assert_eq!(x, again);
    }

    #[test]
    fn teacher_rejects_updates_and_clone_tracks_hash() {
        let mut teacher = toy();
        let before = teacher.content_hash().to_string();
        assert!(matches!(teacher.update_params(|p| p[0] += 1.0), Err(Error::Frozen(_))));
        assert_eq!(teacher.content_hash(), before);

        let mut student = teacher.clone_trainable();
        assert_eq!(student.role(), Role::StudentTrainable);
        assert_eq!(student.content_hash(), before);
        student.update_params(|p| p[0] -= 1e-3).unwrap();
        assert_ne!(student.content_hash(), before);
        assert_eq!(teacher.content_hash(), before);
    }

    #[test]
    fn set_params_round_trips_hash() {
        let teacher = toy();
        let mut student = teacher.clone_trainable();
        let saved = student.params().to_vec();
        student.update_params(|p| p[5] = 9.0).unwrap();
        student.set_params(&saved).unwrap();
        assert_eq!(student.content_hash(), teacher.content_hash());
        assert!(student.set_params(&saved[1..]).is_err());
    }
}
