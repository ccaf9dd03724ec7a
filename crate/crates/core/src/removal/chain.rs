use std::fs;
use std::path::{Path, PathBuf};

use super::step::{run_removal_step, train_student, IterationLoss, StepOutput, StepResult};
use super::RemovalStepConfig;
use crate::backend::{load_checkpoint, read_manifest, save_checkpoint, CheckpointStatus, ModelHandle, Role};
use crate::calibration::{
    read_calibration_file, run_ga, weave_calibration_set, write_calibration_file, CalibrationPrompt, GaConfig,
    GaOutcome, ModelFitness,
};
use crate::error::{Error, Result};
use crate::hierarchy::{Entity, Hierarchy};
use crate::llm::LlmGateway;
use crate::text::{mix_seed, slug};

const WARMUP_SALT: u64 = 0x7761_726d;

/// `<run>/{checkpoints,logs,calibration,reports}`.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn calibration(&self) -> PathBuf {
        self.root.join("calibration")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.checkpoints(), self.logs(), self.calibration(), self.reports()] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }

    pub fn calibration_file(&self, checkpoint_id: &str) -> PathBuf {
        self.calibration().join(format!("{checkpoint_id}.jsonl"))
    }

    pub fn log_file(&self, checkpoint_id: &str) -> PathBuf {
        self.logs().join(format!("{checkpoint_id}.jsonl"))
    }
}

/// Deterministic id of the `step`-th checkpoint (1-based).
pub fn step_checkpoint_id(step: usize, concept: &str) -> String {
    format!("step-{step}-{}", slug(concept))
}

/// Creates the run layout and stores the original model as checkpoint
/// `teacher`. Re-initialising with a different model is refused.
pub fn init_run(run_dir: &Path, teacher: &mut ModelHandle) -> Result<String> {
    const ID: &str = "teacher";
    if teacher.role() != Role::TeacherFrozen {
        return Err(Error::Input("the run teacher must be a frozen handle".into()));
    }
    RunLayout::new(run_dir).create()?;
    match read_manifest(run_dir, ID) {
        Ok(m) if m.content_hash == teacher.content_hash() => Ok(ID.to_string()),
        Ok(m) => Err(Error::Input(format!(
            "{} already holds a different teacher ({})",
            run_dir.display(),
            m.content_hash
        ))),
        Err(Error::NotFound(_)) => save_checkpoint(teacher, run_dir, ID, serde_json::json!({})),
        Err(e) => Err(e),
    }
}

/// A sequence of single-concept removal steps sharing one teacher.
#[derive(Debug, Clone)]
pub struct RemovalJob {
    pub steps: Vec<RemovalStepConfig>,
    pub run_dir: PathBuf,
    pub teacher_id: String,
    pub ga: GaConfig,
    /// Initial GA entities; empty means every leaf of the hierarchy.
    pub entities: Vec<String>,
    /// Mine calibration prompts once (step 1) and reuse them afterwards.
    pub reuse_calibration: bool,
    /// Warm up before mining at every step, not only the first.
    pub warmup_every_step: bool,
    pub seed: u64,
    /// Skip steps whose complete checkpoint already exists.
    pub resume: bool,
    /// Stop cleanly after this many steps (counting resumed ones).
    pub stop_after: Option<usize>,
}

impl RemovalJob {
    pub fn new(run_dir: impl Into<PathBuf>, steps: Vec<RemovalStepConfig>) -> Self {
        Self {
            steps,
            run_dir: run_dir.into(),
            teacher_id: "teacher".into(),
            ga: GaConfig::default(),
            entities: Vec::new(),
            reuse_calibration: false,
            warmup_every_step: false,
            seed: 0,
            resume: false,
            stop_after: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::config("steps", "the concept sequence must be non-empty"));
        }
        for s in &self.steps {
            s.validate()?;
        }
        self.ga.validate()
    }

    /// Step config with its seed derived from the job seed and step index.
    pub fn effective_step(&self, step: usize) -> RemovalStepConfig {
        let base = &self.steps[step - 1];
        RemovalStepConfig {
            seed: mix_seed(mix_seed(self.seed, step as u64), base.seed),
            ..base.clone()
        }
    }

    /// GA settings for mining step `step`'s calibration set.
    pub fn step_ga(&self, step: usize) -> GaConfig {
        GaConfig {
            seed: mix_seed(self.ga.seed, mix_seed(self.seed, step as u64)),
            ..self.ga.clone()
        }
    }

    pub fn initial_entities(&self, h: &Hierarchy) -> Result<Vec<Entity>> {
        let labels: Vec<String> = if self.entities.is_empty() {
            h.leaves().into_iter().map(|n| h.label(n).to_string()).collect()
        } else {
            self.entities.clone()
        };
        if labels.is_empty() {
            return Err(Error::config("entities", "no initial entities and the hierarchy has no leaves"));
        }
        labels.into_iter().map(|l| Entity::initial(l, h)).collect()
    }
}

/// Warm-up (optional) plus genetic search plus weaving for one step.
///
/// With `warmup`, a copy of `init` is trained on the removal loss alone for
/// `cfg.warmup_iterations` so the search has drift to measure; otherwise
/// `init` itself is probed.
#[allow(clippy::too_many_arguments)]
pub fn mine_calibration(
    init: &ModelHandle,
    teacher: &ModelHandle,
    cfg: &RemovalStepConfig,
    warmup: bool,
    ga: &GaConfig,
    entities: &[Entity],
    h: &Hierarchy,
    gateway: &LlmGateway,
) -> Result<(Vec<CalibrationPrompt>, GaOutcome)> {
    let warmed = if warmup {
        let mut s = init.clone_trainable();
        let warm_cfg = RemovalStepConfig {
            lambda: 0.0,
            iterations: cfg.warmup_iterations,
            seed: mix_seed(cfg.seed, WARMUP_SALT),
            ..cfg.clone()
        };
        train_student(&mut s, teacher, &warm_cfg, &[], 0, |_| Ok(()))?;
        Some(s)
    } else {
        None
    };
    let probe = warmed.as_ref().unwrap_or(init);
    let fitness = ModelFitness::new(teacher, probe, ga);
    let outcome = run_ga(entities, &fitness, h, gateway, ga)?;
    let set = weave_calibration_set(&outcome.population, gateway)?;
    Ok((set, outcome))
}

fn read_losses(path: &Path) -> Result<Vec<IterationLoss>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Removes the job's concepts one after another.
///
/// Step `i` starts from step `i-1`'s checkpoint (the teacher for step 1) and
/// always distils against the original teacher loaded from `job.teacher_id`.
pub fn run_continuous(job: &RemovalJob, gateway: &LlmGateway, h: &Hierarchy) -> Result<Vec<StepResult>> {
    job.validate()?;
    let layout = RunLayout::new(&job.run_dir);
    layout.create()?;
    let teacher = load_checkpoint(&job.run_dir, &job.teacher_id)?;
    if teacher.role() != Role::TeacherFrozen {
        return Err(Error::Input(format!("checkpoint `{}` is not a frozen teacher", job.teacher_id)));
    }
    let teacher_hash = teacher.content_hash().to_string();
    let entities = job.initial_entities(h)?;

    // a second frozen copy: every consumer clones it, which records `teacher` as the parent
    let mut prev = load_checkpoint(&job.run_dir, &job.teacher_id)?;
    let mut first_set: Option<Vec<CalibrationPrompt>> = None;
    let mut results = Vec::new();
    for i in 1..=job.steps.len() {
        let cfg = job.effective_step(i);
        let id = step_checkpoint_id(i, &cfg.concept);
        let resumable = job.resume
            && matches!(read_manifest(&job.run_dir, &id), Ok(m) if m.status == CheckpointStatus::Complete);
        if resumable {
            let model = load_checkpoint(&job.run_dir, &id)?;
            let expected: Vec<String> = job.steps[..i].iter().map(|s| s.concept.clone()).collect();
            if model.removed_concepts() != expected {
                return Err(Error::Corruption(format!(
                    "checkpoint `{id}` lineage {:?} does not match the job's {expected:?}",
                    model.removed_concepts()
                )));
            }
            let calibration = read_calibration_file(&layout.calibration_file(&id))?;
            log::info!("step {i}: resumed from existing checkpoint `{id}`");
            if first_set.is_none() {
                first_set = Some(calibration.clone());
            }
            results.push(StepResult {
                step: i,
                concept: cfg.concept.clone(),
                checkpoint_id: id.clone(),
                content_hash: model.content_hash().to_string(),
                losses: read_losses(&layout.log_file(&id))?,
                calibration,
                wall_time_s: 0.0,
            });
            prev = model;
        } else {
            let calibration = match (&first_set, job.reuse_calibration) {
                (Some(set), true) => set.clone(),
                _ => {
                    let ga = job.step_ga(i);
                    let warmup = i == 1 || job.warmup_every_step;
                    let (set, outcome) = mine_calibration(&prev, &teacher, &cfg, warmup, &ga, &entities, h, gateway)?;
                    log::info!(
                        "step {i}: mined {} calibration prompts ({} md evaluations)",
                        set.len(),
                        outcome.evaluations
                    );
                    set
                }
            };
            write_calibration_file(&layout.calibration_file(&id), &calibration)?;
            if first_set.is_none() {
                first_set = Some(calibration.clone());
            }
            let out = StepOutput {
                run_dir: job.run_dir.clone(),
                step: i,
                checkpoint_id: id.clone(),
            };
            let result = run_removal_step(&prev, &teacher, &cfg, &calibration, &out)?;
            log::info!(
                "step {i}: removed `{}` -> `{}` in {:.1}s",
                cfg.concept,
                id,
                result.wall_time_s
            );
            results.push(result);
            prev = load_checkpoint(&job.run_dir, &id)?;
        }
        if teacher.content_hash() != teacher_hash {
            return Err(Error::Corruption("teacher parameters changed during the run".into()));
        }
        if job.stop_after == Some(i) && i < job.steps.len() {
            log::warn!("stopping after step {i} of {}", job.steps.len());
            break;
        }
    }
    Ok(results)
}
