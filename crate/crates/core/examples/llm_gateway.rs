//! The LLM gateway: synonym mutation, fuzzing, weaving and judging.
//!
//! Uses the offline mock by default. Set `CCRT_LLM_URL` (and optionally
//! `CCRT_LLM_MODEL`, `CCRT_LLM_API_KEY`) to talk to a chat-completion endpoint.
//!
//! `cargo run --example llm_gateway`

use std::path::PathBuf;
use std::time::Duration;

use ccrt::hierarchy::{Entity, EntitySource};
use ccrt::llm::{GatewayConfig, HttpProvider, LlmGateway};

fn main() -> ccrt::Result<()> {
    let gateway = match std::env::var("CCRT_LLM_URL") {
        Ok(url) => {
            let model = std::env::var("CCRT_LLM_MODEL").unwrap_or_else(|_| "gpt-4o-mini".into());
            LlmGateway::new(HttpProvider::from_env(url, model, Duration::from_secs(60)), GatewayConfig::default())?
        }
        Err(_) => LlmGateway::mock(),
    };
    println!("provider: {}", gateway.provider_name());

    let cat = Entity::new("cat", EntitySource::Initial)?;
    let mug = Entity::new("coffee mug", EntitySource::Initial)?;
    println!("synonym(cat) = {}", gateway.synonym_replace(&cat)?.label());
    let fuzzed = gateway.fuzz_expand(std::slice::from_ref(&mug), 3)?;
    println!("fuzz([coffee mug], 3) = {:?}", fuzzed.iter().map(Entity::label).collect::<Vec<_>>());
    println!("weave([cat, coffee mug]) = {}", gateway.weave(&[cat, mug]));

    let verdict = gateway.judge_removal(
        &[PathBuf::from("removed_0.pgm")],
        &[PathBuf::from("reference.pgm")],
        "zorblax",
    )?;
    println!("judge(removed_0.pgm) = {:?} ({:?})", verdict.value, verdict.raw);
    println!("{} provider calls", gateway.call_count());
    Ok(())
}
