//! Distillation losses and training on the toy backends.

use ccrt::backend::{Condition, LatentSample, LinearBackend, ModelHandle, ToyBackend, ToyConfig};
use ccrt::calibration::CalibrationPrompt;
use ccrt::norm::NormOrder;
use ccrt::removal::{
    alignment_loss, guidance_target, loss_and_grad, negative_guidance, removal_loss, run_removal_step, total_loss,
    train_student, OptimizerKind, RemovalStepConfig, StepOutput, TrainingBatch,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn latent(len: usize) -> LatentSample {
    LatentSample {
        data: vec![0.0; len],
        timestep: 3,
        seed: 0,
    }
}

/// Teacher with unconditional output [0.2, 0.4] and conditional output
/// [0.6, 0.2] for the single-token prompt "zorblax".
fn two_element_teacher() -> ModelHandle {
    let mut b = LinearBackend::zeros(2, 2, 10);
    b.bias_mut().copy_from_slice(&[0.2, 0.4]);
    b.projection_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    b.set_token_embedding("zorblax", &[0.4, -0.2]);
    ModelHandle::teacher(b)
}

fn constant_model(values: &[f64]) -> ModelHandle {
    let mut b = LinearBackend::zeros(values.len(), 2, 10);
    b.bias_mut().copy_from_slice(values);
    ModelHandle::teacher(b)
}

#[test]
fn negative_guidance_hand_arithmetic() {
    let t = two_element_teacher();
    let d = negative_guidance(&t, &latent(2), &Condition::concept("zorblax"), 1.0).unwrap();
    // u - eta (c - u) = [0.2 - 0.4, 0.4 + 0.2]
    assert!((d.data[0] - (-0.2)).abs() < 1e-9 && (d.data[1] - 0.6).abs() < 1e-9, "{:?}", d.data);
    let eta0 = negative_guidance(&t, &latent(2), &Condition::concept("zorblax"), 0.0).unwrap();
    assert_eq!(eta0.data, vec![0.2, 0.4]);
}

#[test]
fn removal_loss_hand_arithmetic() {
    let t = two_element_teacher();
    let s = constant_model(&[0.0, 0.5]).clone_trainable();
    let l = removal_loss(&s, &t, &latent(2), &Condition::concept("zorblax"), 1.0, NormOrder::L1).unwrap();
    // |0.0 - (-0.2)| + |0.5 - 0.6|
    assert!((l - 0.3).abs() < 1e-9, "{l}");
}

#[test]
fn l1_removal_loss_is_sum_of_absolute_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let target: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pred: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        // eta = 0 makes the target the teacher's unconditional output
        let t = constant_model(&target);
        let s = constant_model(&pred).clone_trainable();
        let l = removal_loss(&s, &t, &latent(6), &Condition::concept("x"), 0.0, NormOrder::L1).unwrap();
        let mut reference = 0.0;
        for i in 0..6 {
            reference += (pred[i] - target[i]).abs();
        }
        assert!((l - reference).abs() < 1e-12);
    }
}

#[test]
fn alignment_loss_hand_arithmetic_and_symmetry() {
    let a = constant_model(&[1.0, 2.0]);
    let b = constant_model(&[0.0, 0.0]);
    let e = Condition::calibration("a cat");
    assert!((alignment_loss(&a, &b, &latent(2), &e).unwrap() - 2.5).abs() < 1e-12);
    assert_eq!(
        alignment_loss(&a, &b, &latent(2), &e).unwrap(),
        alignment_loss(&b, &a, &latent(2), &e).unwrap()
    );
}

#[test]
fn total_loss_hand_arithmetic() {
    assert!((total_loss(0.3, 2.5, 0.5).unwrap() - 1.55).abs() < 1e-9);
    let l_rm = 0.1 + 0.2;
    assert_eq!(total_loss(l_rm, 123.4, 0.0).unwrap().to_bits(), l_rm.to_bits());
    assert!(total_loss(0.0, 0.0, 1.0).unwrap() >= 0.0);
}

fn toy(seed: u64, train_mixing: bool) -> ModelHandle {
    ModelHandle::teacher(ToyBackend::new(ToyConfig {
        init_seed: seed,
        train_mixing,
        ..ToyConfig::default()
    }))
}

fn batch(student: &ModelHandle, seed: u64) -> TrainingBatch {
    let c = Condition::concept("a painting by zorblax");
    let e = Condition::calibration("A scene depicting a junco and a tiger shark.");
    TrainingBatch {
        concept: vec![(student.sample_partial(&c, 17, seed).unwrap(), c.clone())],
        calibration: vec![(student.sample_partial(&e, 23, seed + 1).unwrap(), e)],
    }
}

/// |a - f| / max(|a|, |f|, floor): plain relative error, with a floor so that
/// coordinates whose gradient is exactly zero compare absolutely.
fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
}

#[test]
fn gradient_matches_central_differences() {
    for seed in 0..5u64 {
        let teacher = toy(seed, true);
        // move the student off the teacher so the alignment term has a gradient too
        let mut student = teacher.clone_trainable();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        student
            .update_params(|p| p.iter_mut().for_each(|v| *v += 0.01 * rng.random_range(-1.0..1.0)))
            .unwrap();
        let b = batch(&student, seed);
        let (_, _, _, grad) = loss_and_grad(&student, &teacher, &b, 0.5, 1.0, NormOrder::L1).unwrap();
        let n = student.num_params();
        let h = 1e-6;
        let mut picked = 0;
        while picked < 20 {
            let i = rng.random_range(0..n);
            let eval = |delta: f64| {
                let mut s = student.clone_trainable();
                s.update_params(|p| p[i] += delta).unwrap();
                loss_and_grad(&s, &teacher, &b, 0.5, 1.0, NormOrder::L1).unwrap().2
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = rel_err(grad[i], fd);
            assert!(err < 1e-4, "seed {seed}, param {i}: analytic {} vs fd {fd} (rel {err:e})", grad[i]);
            picked += 1;
        }
    }
}

#[test]
fn frozen_mixing_matches_differences_on_trainable_coordinates() {
    let teacher = toy(3, false);
    let mut student = teacher.clone_trainable();
    student.update_params(|p| p[0] += 0.05).unwrap();
    let b = batch(&student, 9);
    let (_, _, _, grad) = loss_and_grad(&student, &teacher, &b, 0.5, 1.0, NormOrder::L1).unwrap();
    // the mixing block is the trailing 128x128 parameters
    let a_start = student.num_params() - 128 * 128;
    assert!(grad[a_start..].iter().all(|g| *g == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let i = rng.random_range(0..a_start);
        let eval = |delta: f64| {
            let mut s = student.clone_trainable();
            s.update_params(|p| p[i] += delta).unwrap();
            loss_and_grad(&s, &teacher, &b, 0.5, 1.0, NormOrder::L1).unwrap().2
        };
        let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
        assert!(rel_err(grad[i], fd) < 1e-4, "param {i}: {} vs {fd}", grad[i]);
    }
}

fn calibration_set() -> Vec<CalibrationPrompt> {
    ["A scene depicting a junco.", "A scene depicting a toucan and a bagel.", "A scene depicting a water jug."]
        .iter()
        .map(|t| CalibrationPrompt {
            text: t.to_string(),
            entities: Vec::new(),
            md: 1.0,
            generation: 0,
        })
        .collect()
}

fn step_cfg(lambda: f64) -> RemovalStepConfig {
    RemovalStepConfig {
        lambda,
        iterations: 200,
        optimizer: OptimizerKind::Adam,
        learning_rate: 5e-3,
        seed: 4,
        ..RemovalStepConfig::for_concept("zorblax")
    }
}

#[test]
fn two_hundred_iterations_reduce_total_loss() {
    let teacher = toy(0, false);
    let mut student = teacher.clone_trainable();
    let mut log = Vec::new();
    train_student(&mut student, &teacher, &step_cfg(0.5), &calibration_set(), 1, |l| {
        log.push(*l);
        Ok(())
    })
    .unwrap();
    assert_eq!(log.len(), 200);
    let mean = |s: &[ccrt::removal::IterationLoss]| s.iter().map(|l| l.loss_total).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&log[..10]), mean(&log[190..]));
    assert!(last < first, "first-10 mean {first} vs last-10 mean {last}");
}

#[test]
fn positive_lambda_keeps_calibration_alignment_tighter() {
    let teacher = toy(0, false);
    let calib = calibration_set();
    let final_reg = |lambda: f64| {
        let mut s = teacher.clone_trainable();
        train_student(&mut s, &teacher, &step_cfg(lambda), &calib, 1, |_| Ok(())).unwrap();
        // mean alignment loss over the calibration set on fixed probes
        let mut total = 0.0;
        for (i, p) in calib.iter().enumerate() {
            let e = Condition::calibration(p.text.clone());
            for t in [5, 20, 40] {
                let x = teacher.sample_partial(&e, t, 1000 + i as u64).unwrap();
                total += alignment_loss(&s, &teacher, &x, &e).unwrap();
            }
        }
        total / (3 * calib.len()) as f64
    };
    let (with, without) = (final_reg(0.5), final_reg(0.0));
    assert!(with < without, "L_reg with lambda=0.5: {with}, lambda=0: {without}");
}

#[test]
fn zero_iterations_keep_the_init_hash() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = toy(1, false);
    let init = teacher.clone_trainable();
    let cfg = RemovalStepConfig {
        iterations: 0,
        ..step_cfg(0.5)
    };
    let out = StepOutput {
        run_dir: dir.path().to_path_buf(),
        step: 1,
        checkpoint_id: "step-1-zorblax".into(),
    };
    let r = run_removal_step(&init, &teacher, &cfg, &calibration_set(), &out).unwrap();
    assert_eq!(r.content_hash, teacher.content_hash());
}

#[test]
fn teacher_hash_survives_training() {
    let teacher = toy(2, false);
    let before = teacher.content_hash().to_string();
    let mut s = teacher.clone_trainable();
    train_student(&mut s, &teacher, &RemovalStepConfig { iterations: 20, ..step_cfg(0.5) }, &calibration_set(), 1, |_| Ok(()))
        .unwrap();
    assert_eq!(teacher.content_hash(), before);
    assert_ne!(s.content_hash(), before);
}

#[test]
fn guidance_target_is_elementwise() {
    let u = [0.5, -1.0, 2.0];
    let c = [1.0, 1.0, 1.0];
    let d = guidance_target(&u, &c, 2.0);
    for i in 0..3 {
        assert!((d[i] - (u[i] - 2.0 * (c[i] - u[i]))).abs() < 1e-15);
    }
}
