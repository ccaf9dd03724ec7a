use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::Optimizer;
use super::{guidance_target, total_loss, RemovalStepConfig};
use crate::backend::{save_with_status, CheckpointStatus, Condition, LatentSample, LineageEntry, ModelHandle};
use crate::calibration::CalibrationPrompt;
use crate::error::{Error, Result};
use crate::norm::NormOrder;

/// One iteration's losses; also the training-log line format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLoss {
    pub step: usize,
    pub iter: usize,
    pub loss_rm: f64,
    pub loss_reg: f64,
    pub loss_total: f64,
    pub lr: f64,
}

/// Latents and conditions for one optimisation step.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub concept: Vec<(LatentSample, Condition)>,
    pub calibration: Vec<(LatentSample, Condition)>,
}

/// Losses and the gradient of `L_rm + lambda * L_reg` with respect to the
/// student's parameters. Both terms are batch means.
///
/// `L_reg` is reported whenever calibration samples are present, but only
/// enters the gradient when `lambda > 0`.
pub fn loss_and_grad(
    student: &ModelHandle,
    teacher: &ModelHandle,
    batch: &TrainingBatch,
    lambda: f64,
    eta: f64,
    norm: NormOrder,
) -> Result<(f64, f64, f64, Vec<f64>)> {
    let mut grad = vec![0.0; student.num_params()];
    let mut l_rm = 0.0;
    if !batch.concept.is_empty() {
        let scale = 1.0 / batch.concept.len() as f64;
        for (x, c) in &batch.concept {
            let uncond = teacher.predict_noise(x, None)?;
            let cond = teacher.predict_noise(x, Some(c))?;
            let target = guidance_target(&uncond.data, &cond.data, eta);
            let pred = student.predict_noise(x, Some(c))?;
            let diff: Vec<f64> = pred.data.iter().zip(&target).map(|(p, t)| p - t).collect();
            l_rm += scale * norm.norm(&diff);
            let upstream: Vec<f64> = norm.gradient(&diff).into_iter().map(|g| g * scale).collect();
            student.accumulate_grad(x, Some(c), &upstream, &mut grad)?;
        }
    }
    let mut l_reg = 0.0;
    if !batch.calibration.is_empty() {
        let scale = 1.0 / batch.calibration.len() as f64;
        for (x, e) in &batch.calibration {
            let s = student.predict_noise(x, Some(e))?;
            let t = teacher.predict_noise(x, Some(e))?;
            let d = s.len() as f64;
            let diff: Vec<f64> = s.data.iter().zip(&t.data).map(|(a, b)| a - b).collect();
            l_reg += scale * diff.iter().map(|v| v * v).sum::<f64>() / d;
            if lambda > 0.0 {
                let upstream: Vec<f64> = diff.iter().map(|v| lambda * scale * 2.0 * v / d).collect();
                student.accumulate_grad(x, Some(e), &upstream, &mut grad)?;
            }
        }
    }
    let l_total = total_loss(l_rm, l_reg, lambda)?;
    Ok((l_rm, l_reg, l_total, grad))
}

fn draw_batch(
    student: &ModelHandle,
    prompts: &[String],
    calibration: &[CalibrationPrompt],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingBatch> {
    let t_max = student.t_max();
    let mut concept = Vec::with_capacity(batch_size);
    let mut calib = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let c = Condition::concept(prompts[rng.random_range(0..prompts.len())].clone());
        let t = rng.random_range(0..t_max);
        let seed: u64 = rng.random();
        concept.push((student.sample_partial(&c, t, seed)?, c));
        // drawn unconditionally so runs that differ only in lambda see the same concept samples
        let pick = rng.random_range(0..calibration.len().max(1));
        let t = rng.random_range(0..t_max);
        let seed: u64 = rng.random();
        if let Some(p) = calibration.get(pick) {
            let e = Condition::calibration(p.text.clone());
            calib.push((student.sample_partial(&e, t, seed)?, e));
        }
    }
    Ok(TrainingBatch {
        concept,
        calibration: calib,
    })
}

fn as_fault(iteration: usize, e: Error) -> Error {
    match e {
        Error::Backend(msg) => Error::Training { iteration, msg },
        Error::Training { msg, .. } => Error::Training { iteration, msg },
        other => other,
    }
}

/// Runs `cfg.iterations` optimisation steps on `student` in place.
///
/// On a training fault the student is rolled back to the last parameters
/// that produced a finite loss and the fault is returned.
pub fn train_student(
    student: &mut ModelHandle,
    teacher: &ModelHandle,
    cfg: &RemovalStepConfig,
    calibration: &[CalibrationPrompt],
    step: usize,
    mut on_iter: impl FnMut(&IterationLoss) -> Result<()>,
) -> Result<Vec<IterationLoss>> {
    cfg.validate()?;
    let prompts = cfg.prompts();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.grad_clip, student.num_params());
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut last_good = student.params().to_vec();

    for iter in 0..cfg.iterations {
        let attempt = (|| {
            let batch = draw_batch(student, &prompts, calibration, cfg.batch_size, &mut rng)?;
            let (l_rm, l_reg, l_total, mut grad) =
                loss_and_grad(student, teacher, &batch, cfg.lambda, cfg.eta, cfg.norm)?;
            if ![l_rm, l_reg, l_total].iter().all(|v| v.is_finite()) {
                return Err(Error::Backend(format!("non-finite loss (rm={l_rm}, reg={l_reg})")));
            }
            last_good.copy_from_slice(student.params());
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Backend("non-finite gradient".into()));
            }
            let mut params = student.params().to_vec();
            opt.step(&mut params, &mut grad);
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Backend("update produced non-finite parameters".into()));
            }
            student.set_params(&params)?;
            Ok(IterationLoss {
                step,
                iter,
                loss_rm: l_rm,
                loss_reg: l_reg,
                loss_total: l_total,
                lr: opt.learning_rate(),
            })
        })();
        match attempt {
            Ok(loss) => {
                on_iter(&loss)?;
                trace.push(loss);
            }
            Err(e) => {
                let fault = as_fault(iter, e);
                if matches!(fault, Error::Training { .. }) {
                    student.set_params(&last_good)?;
                    log::error!("step {step} aborted at iteration {iter}: {fault}");
                }
                return Err(fault);
            }
        }
    }
    Ok(trace)
}

/// Where a step writes its artifacts.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub run_dir: PathBuf,
    /// 1-based position in the removal sequence.
    pub step: usize,
    pub checkpoint_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepResult {
    pub step: usize,
    pub concept: String,
    pub checkpoint_id: String,
    pub content_hash: String,
    pub losses: Vec<IterationLoss>,
    #[serde(skip)]
    pub calibration: Vec<CalibrationPrompt>,
    pub wall_time_s: f64,
}

/// One removal step: trains a copy of `init`, logs every iteration to
/// `<run>/logs/<id>.jsonl`, and saves `<run>/checkpoints/<id>` with the
/// concept appended to the lineage. A training fault saves the last good
/// parameters as `<id>-aborted` and returns the fault.
pub fn run_removal_step(
    init: &ModelHandle,
    teacher: &ModelHandle,
    cfg: &RemovalStepConfig,
    calibration: &[CalibrationPrompt],
    out: &StepOutput,
) -> Result<StepResult> {
    cfg.validate()?;
    if cfg.lambda > 0.0 && calibration.is_empty() {
        return Err(Error::config("lambda", "a positive lambda needs a non-empty calibration set"));
    }
    let started = Instant::now();
    let log_dir = out.run_dir.join("logs");
    fs::create_dir_all(&log_dir).map_err(|e| Error::io(&log_dir, e))?;
    let log_path = log_dir.join(format!("{}.jsonl", out.checkpoint_id));
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);

    let mut student = init.clone_trainable();
    let trained = train_student(&mut student, teacher, cfg, calibration, out.step, |loss| {
        let line = serde_json::to_string(loss)?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
    });
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let hyper = serde_json::json!({
        "step": out.step,
        "config": cfg,
        "calibration_prompts": calibration.len(),
    });
    let losses = match trained {
        Ok(l) => l,
        Err(fault @ Error::Training { .. }) => {
            let id = format!("{}-aborted", out.checkpoint_id);
            save_with_status(&mut student, &out.run_dir, &id, hyper, CheckpointStatus::Aborted)?;
            return Err(fault);
        }
        Err(e) => return Err(e),
    };
    student.push_lineage(LineageEntry {
        checkpoint_id: out.checkpoint_id.clone(),
        removed_concept: cfg.concept.clone(),
    });
    save_with_status(&mut student, &out.run_dir, &out.checkpoint_id, hyper, CheckpointStatus::Complete)?;
    Ok(StepResult {
        step: out.step,
        concept: cfg.concept.clone(),
        checkpoint_id: out.checkpoint_id.clone(),
        content_hash: student.content_hash().to_string(),
        losses,
        calibration: calibration.to_vec(),
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
