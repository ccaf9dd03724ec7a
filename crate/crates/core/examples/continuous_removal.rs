//! Removing two concepts one after another from a toy teacher, with and
//! without the calibration term.
//!
//! `cargo run --release --example continuous_removal -- [seed]`

use ccrt::llm::LlmGateway;
use ccrt::scenario::ToyScenario;

fn main() -> ccrt::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let scenario = ToyScenario::default();
    let gateway = LlmGateway::mock();
    for lambda in [0.5, 0.0] {
        let dir = tempfile::tempdir().map_err(|e| ccrt::Error::Input(e.to_string()))?;
        let o = scenario.run(dir.path(), seed, lambda, &gateway)?;
        println!("lambda = {lambda}");
        for (i, c) in scenario.concepts.iter().enumerate() {
            println!(
                "  {c:<9} classifier acc {:.3}  removal rate {:.3} -> {:.3}",
                o.classifier_accuracy[i], o.rr_before[i], o.rr_after[i]
            );
        }
        println!("  held-out entity MD {:.4}; removed {:?}", o.held_out_md, o.removed);
    }
    Ok(())
}
