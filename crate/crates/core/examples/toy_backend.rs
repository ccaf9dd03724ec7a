//! Toy noise predictor: predictions, partial sampling, student clones and
//! checkpoint round trips.
//!
//! `cargo run --example toy_backend`

use ccrt::backend::{load_checkpoint, save_checkpoint, Condition, ModelHandle, ToyBackend, ToyConfig};

fn main() -> ccrt::Result<()> {
    let teacher = ModelHandle::teacher(ToyBackend::new(ToyConfig::default()));
    println!(
        "teacher: latent shape {:?}, T_max {}, {} parameters, hash {}",
        teacher.latent_shape(),
        teacher.t_max(),
        teacher.num_params(),
        &teacher.content_hash()[..16]
    );

    let cond = Condition::concept("a painting in the style of zorblax");
    let x = teacher.sample_partial(&cond, 20, 7)?;
    let conditional = teacher.predict_noise(&x, Some(&cond))?;
    let unconditional = teacher.predict_noise(&x, None)?;
    let gap: f64 = conditional
        .data
        .iter()
        .zip(&unconditional.data)
        .map(|(a, b)| (a - b).abs())
        .sum();
    println!("x_20 from seed 7: |eps(x, c) - eps(x)|_1 = {gap:.4}");

    let mut student = teacher.clone_trainable();
    assert_eq!(student.content_hash(), teacher.content_hash());
    student.update_params(|p| p[0] += 0.1)?;
    println!("student after an edit: hash {}", &student.content_hash()[..16]);

    let dir = tempfile::tempdir().map_err(|e| ccrt::Error::Input(e.to_string()))?;
    let id = save_checkpoint(&mut student, dir.path(), "edited", serde_json::json!({"note": "example"}))?;
    let back = load_checkpoint(dir.path(), &id)?;
    println!("reloaded `{id}`: hash matches = {}", back.content_hash() == student.content_hash());
    Ok(())
}
