//! Gateway behaviour with the offline mock and scripted providers.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ccrt::hierarchy::{Entity, EntitySource};
use ccrt::llm::{
    replay_judge_verdicts, FnProvider, GatewayConfig, JudgeVerdict, LlmGateway, LlmPayload, LlmRequest, MockProvider,
    Verdict,
};
use ccrt::scenario::sample_hierarchy;
use ccrt::Error;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn e(label: &str) -> Entity {
    Entity::new(label, EntitySource::Initial).unwrap()
}

fn quick() -> GatewayConfig {
    GatewayConfig {
        backoff_ms: 0,
        ..GatewayConfig::default()
    }
}

#[test]
fn mock_is_idempotent_over_a_hundred_calls() {
    let first = LlmGateway::mock();
    let syn = first.synonym_replace(&e("junco")).unwrap();
    let fuzz = first.fuzz_expand(&[e("coffee mug"), e("bagel")], 4).unwrap();
    let woven = first.weave(&[e("junco"), e("water jug")]);
    for _ in 0..100 {
        // a fresh gateway each time: nothing may depend on call history
        let g = LlmGateway::mock();
        assert_eq!(g.synonym_replace(&e("junco")).unwrap(), syn);
        assert_eq!(g.fuzz_expand(&[e("coffee mug"), e("bagel")], 4).unwrap(), fuzz);
        assert_eq!(g.weave(&[e("junco"), e("water jug")]), woven);
        assert_eq!(first.fuzz_expand(&[e("coffee mug"), e("bagel")], 4).unwrap(), fuzz);
    }
}

#[test]
fn fuzz_returns_the_requested_count_of_new_labels() {
    let g = LlmGateway::mock();
    let input = [e("coffee mug"), e("desk lamp")];
    let out = g.fuzz_expand(&input, 3).unwrap();
    assert_eq!(out.len(), 3);
    let labels: Vec<&str> = out.iter().map(Entity::label).collect();
    for l in &labels {
        assert!(!["coffee mug", "desk lamp"].contains(l));
        assert_eq!(labels.iter().filter(|x| *x == l).count(), 1);
    }
    assert!(out.iter().all(|x| x.source() == EntitySource::Fuzzing));
    assert!(g.fuzz_expand(&input, 0).unwrap().is_empty());
}

#[test]
fn fifty_weaves_contain_every_entity() {
    let h = sample_hierarchy();
    let labels: Vec<String> = h.nodes().map(|n| h.label(n).to_string()).collect();
    let g = LlmGateway::mock();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in 0..50 {
        let picked: Vec<&String> = labels.choose_multiple(&mut rng, 1 + n % 4).collect();
        let entities: Vec<Entity> = picked.iter().map(|l| e(l)).collect();
        let text = g.weave(&entities);
        for l in &picked {
            assert!(text.to_lowercase().contains(&l.to_lowercase()), "{text:?} lacks {l}");
        }
    }
}

#[test]
fn judge_batch_is_audited_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("audit.jsonl");
    let g = LlmGateway::new(
        MockProvider,
        GatewayConfig {
            audit_log: Some(log.clone()),
            ..quick()
        },
    )
    .unwrap();
    let refs = vec![PathBuf::from("ref_0.pgm")];
    let names: Vec<String> = (0..10)
        .map(|i| match i % 3 {
            0 => format!("removed_{i}.pgm"),
            1 => format!("kept_{i}.pgm"),
            _ => format!("null_{i}.pgm"),
        })
        .collect();
    let verdicts: Vec<Verdict> = names
        .iter()
        .map(|n| g.judge_removal(&[PathBuf::from(n)], &refs, "zorblax").unwrap().value)
        .collect();
    let expected: Vec<Verdict> = (0..10)
        .map(|i| [Verdict::Yes, Verdict::No, Verdict::Null][i % 3])
        .collect();
    assert_eq!(verdicts, expected);
    assert_eq!(g.call_count(), 10);

    let replayed: Vec<Verdict> = replay_judge_verdicts(&log).unwrap().into_iter().map(|(_, v)| v.value).collect();
    assert_eq!(replayed, expected);
    assert!(g.judge_removal(&[], &refs, "zorblax").is_err());
}

#[test]
fn judge_parse_takes_the_first_verdict_word() {
    for (raw, v) in [
        ("Yes.", Verdict::Yes),
        ("no, the style is still visible", Verdict::No),
        ("NULL", Verdict::Null),
        ("I would say yes; no trace remains", Verdict::Yes),
        ("cannot tell", Verdict::Null),
        ("", Verdict::Null),
        ("Nobody knows. No.", Verdict::No),
    ] {
        assert_eq!(JudgeVerdict::parse(raw).value, v, "{raw:?}");
    }
}

/// Scripted responses in the shape of the worked examples: a synonym swap
/// (`cat` -> `kitty`, `junco` -> `snowbird`) and a fuzzing expansion.
fn scripted() -> LlmGateway {
    let provider = FnProvider(|r: &LlmRequest| {
        Ok(match &r.payload {
            LlmPayload::Synonym { entity } if entity == "cat" => "kitty".to_string(),
            LlmPayload::Synonym { entity } if entity == "junco" => "\"snowbird\".".to_string(),
            LlmPayload::Synonym { entity } => entity.clone(),
            LlmPayload::Fuzz { .. } => "1. desk lamp\n2. backpack\n3. pencil case\n".to_string(),
            LlmPayload::Weave { entities } => format!("A photo of a {} on a table.", entities.join(" and a ")),
            LlmPayload::Judge { .. } => "No".to_string(),
        })
    });
    LlmGateway::new(provider, quick()).unwrap()
}

#[test]
fn scripted_examples() {
    let g = scripted();
    let kitty = g.synonym_replace(&e("cat")).unwrap();
    assert_eq!(kitty.label(), "kitty");
    assert_eq!(kitty.source(), EntitySource::Mutation);
    assert_eq!(g.synonym_replace(&e("junco")).unwrap().label(), "snowbird");

    let fuzz: Vec<String> = g
        .fuzz_expand(&[e("coffee mug")], 3)
        .unwrap()
        .iter()
        .map(|x| x.label().to_string())
        .collect();
    assert_eq!(fuzz, ["desk lamp", "backpack", "pencil case"]);

    // the recorded synonym counts as mentioning its original label
    assert!(g.contains_all("A kitty asleep.", &["cat".to_string()]));
    assert_eq!(g.weave(&[e("kitty"), e("coffee mug")]), "A photo of a kitty and a coffee mug on a table.");
}

#[test]
fn transient_failures_are_retried() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let provider = FnProvider(move |_: &LlmRequest| {
        if c.fetch_add(1, Ordering::SeqCst) < 2 {
            Err(Error::Gateway("503".into()))
        } else {
            Ok("kitty".into())
        }
    });
    let g = LlmGateway::new(provider, quick()).unwrap();
    assert_eq!(g.synonym_replace(&e("cat")).unwrap().label(), "kitty");
    assert_eq!(g.call_count(), 3);

    let always = LlmGateway::new(
        FnProvider(|_: &LlmRequest| Err(Error::Gateway("down".into()))),
        GatewayConfig {
            max_retries: 2,
            ..quick()
        },
    )
    .unwrap();
    assert!(matches!(always.synonym_replace(&e("cat")), Err(Error::Gateway(_))));
    assert_eq!(always.call_count(), 3);
    // weaving degrades to the template instead of failing
    assert!(always.weave(&[e("cat")]).contains("cat"));
}

#[test]
fn in_flight_requests_are_bounded() {
    let active = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let (a, p) = (active.clone(), peak.clone());
    let provider = FnProvider(move |_: &LlmRequest| {
        let now = a.fetch_add(1, Ordering::SeqCst) + 1;
        p.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(std::time::Duration::from_millis(5));
        a.fetch_sub(1, Ordering::SeqCst);
        Ok("x".into())
    });
    let g = LlmGateway::new(
        provider,
        GatewayConfig {
            max_in_flight: 2,
            ..quick()
        },
    )
    .unwrap();
    std::thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| g.synonym_replace(&e("cat")).unwrap());
        }
    });
    assert_eq!(g.call_count(), 8);
    assert!(peak.load(Ordering::SeqCst) <= 2, "peak {}", peak.load(Ordering::SeqCst));
}
