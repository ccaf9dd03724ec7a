//! Evaluating a checkpoint: classifier removal rate, judge removal rate and
//! the mock alignment score, with per-image records in the report.
//!
//! `cargo run --release --example evaluation_metrics`

use std::path::PathBuf;

use ccrt::evaluation::{evaluate_checkpoint, EvalConfig, EvalResources, MetricSpec};
use ccrt::llm::LlmGateway;
use ccrt::scenario::ToyScenario;

fn main() -> ccrt::Result<()> {
    let scenario = ToyScenario::default();
    let teacher = scenario.teacher(0);
    let classifier = scenario.train_classifier(&teacher, "zorblax", 0)?;
    println!(
        "classifier: train acc {:.3} (n={}), test acc {:.3} (n={})",
        classifier.train_accuracy, classifier.train_size, classifier.test_accuracy, classifier.test_size
    );

    let gateway = LlmGateway::mock();
    let cfg = EvalConfig {
        metrics: MetricSpec::parse_list("rr-cls,rr-llm,align:mock")?,
        concept: "zorblax".into(),
        references: vec![PathBuf::from("reference.pgm")],
        images_per_prompt: 4,
        seed: 0,
    };
    let res = EvalResources {
        classifier: Some(&classifier),
        gateway: Some(&gateway),
    };
    let dir = tempfile::tempdir().map_err(|e| ccrt::Error::Input(e.to_string()))?;
    let report = evaluate_checkpoint(&teacher, &scenario.eval_prompts("zorblax"), &cfg, &res, dir.path())?;
    report.verify()?;
    for m in &report.metrics {
        println!("{:<11} {:.3} over {} images {:?}", m.name, m.value, m.n, m.extra);
    }
    Ok(())
}
