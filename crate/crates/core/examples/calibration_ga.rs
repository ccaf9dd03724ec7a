//! Mining a calibration prompt set: warm up a student on one concept, then
//! search for the entities it drifted on most.
//!
//! `cargo run --release --example calibration_ga`

use ccrt::calibration::GaConfig;
use ccrt::llm::LlmGateway;
use ccrt::removal::{mine_calibration, OptimizerKind, RemovalStepConfig};
use ccrt::scenario::{sample_hierarchy, ToyScenario};
use ccrt::hierarchy::Entity;

fn main() -> ccrt::Result<()> {
    let scenario = ToyScenario::default();
    let teacher = scenario.teacher(0);
    let h = sample_hierarchy();
    let entities: Vec<Entity> = h
        .leaves()
        .into_iter()
        .map(|n| Entity::initial(h.label(n), &h))
        .collect::<ccrt::Result<_>>()?;
    let step = RemovalStepConfig {
        warmup_iterations: 50,
        optimizer: OptimizerKind::Adam,
        learning_rate: 5e-3,
        ..RemovalStepConfig::for_concept("zorblax")
    };
    let ga = GaConfig {
        k: 8,
        generations: 4,
        parents: 8,
        md_samples: 4,
        ..GaConfig::default()
    };
    let gateway = LlmGateway::mock();
    let init = teacher.clone_trainable();
    let (set, outcome) = mine_calibration(&init, &teacher, &step, true, &ga, &entities, &h, &gateway)?;

    println!("gen  size  offspring  min MD    max MD");
    for g in &outcome.history {
        println!("{:>3}  {:>4}  {:>9}  {:>8.4}  {:>8.4}", g.generation, g.size, g.offspring, g.min_md, g.max_md);
    }
    println!("{} MD evaluations, {} LLM calls", outcome.evaluations, gateway.call_count());
    for p in &set {
        println!("  md {:>8.4}  gen {}  {}", p.md, p.generation, p.text);
    }
    Ok(())
}
