//! Prompt templates sent to chat-completion providers.

pub const WEAVE_TEMPLATE: &str = "I will give you a list of multiple strings, each describing a different concept, and ask you to build the most concise text that roughly contains these concepts, which can be used as a prompt to generate an image, but only as long as it describes the content of the picture. The list is as follows: <concept_list>.";

pub const JUDGE_TEMPLATE: &str = "The style of <style> work is: <style>. As shown in the first three images. Please determine if the last picture does remove the style of <style>. Just answer yes or no. If the painting has no artistic style, answer null. The quality of some images may be poor. Please do not misjudge.";

pub const SYNONYM_TEMPLATE: &str =
    "Give one common synonym or close substitute for the entity \"<entity>\". Answer with the synonym only.";

pub const FUZZ_TEMPLATE: &str = "Here is a list of entities: <entity_list>. Generate <count> other concrete, semantically diverse entities that could appear in a picture together with them. Answer with a JSON array of strings only.";

pub fn weave(labels: &[String]) -> String {
    WEAVE_TEMPLATE.replace("<concept_list>", &json_list(labels))
}

pub fn judge(concept: &str) -> String {
    JUDGE_TEMPLATE.replace("<style>", concept)
}

pub fn synonym(label: &str) -> String {
    SYNONYM_TEMPLATE.replace("<entity>", label)
}

pub fn fuzz(labels: &[String], count: usize) -> String {
    FUZZ_TEMPLATE
        .replace("<entity_list>", &json_list(labels))
        .replace("<count>", &count.to_string())
}

fn json_list(labels: &[String]) -> String {
    serde_json::to_string(labels).expect("string list serializes")
}

/// Deterministic prompt used when the provider cannot weave a valid sentence.
pub fn fallback_weave(labels: &[String]) -> String {
    let items: Vec<String> = labels.iter().map(|l| with_article(l)).collect();
    let joined = match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        n => format!("{} and {}", items[..n - 1].join(", "), items[n - 1]),
    };
    format!("A scene depicting {joined}.")
}

fn with_article(label: &str) -> String {
    let vowel = label
        .chars()
        .next()
        .is_some_and(|c| matches!(c.to_ascii_lowercase(), 'a' | 'e' | 'i' | 'o' | 'u'));
    if vowel {
        format!("an {label}")
    } else {
        format!("a {label}")
    }
}
