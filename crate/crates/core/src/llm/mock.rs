use super::{LlmPayload, LlmProvider, LlmRequest};
use crate::error::Result;
use crate::llm::prompts::fallback_weave;
use crate::text::fnv1a;

const LEXICON: &[&str] = &[
    "desk lamp", "backpack", "pencil case", "umbrella", "teapot", "bicycle", "lighthouse", "violin",
    "pineapple", "sailboat", "lantern", "armchair", "kite", "globe", "typewriter", "cactus",
    "windmill", "harmonica", "anchor", "snow globe", "accordion", "birdcage", "canoe", "hourglass",
    "telescope", "saxophone", "tricycle", "compass", "paper crane", "fire hydrant", "mailbox",
    "wheelbarrow", "rocking horse", "chess board", "trumpet", "tulip", "sunflower", "pumpkin",
    "scarecrow", "tractor", "hot air balloon", "carousel", "treehouse", "igloo", "pagoda",
    "totem pole", "water tower", "gazebo", "drawbridge", "fountain", "bonsai tree", "palm tree",
    "waterfall", "volcano", "glacier", "coral reef", "sand dune", "meadow", "bamboo grove",
    "jellyfish", "seahorse", "octopus", "flamingo", "peacock", "hedgehog", "koala", "panda",
    "otter", "walrus", "chameleon", "tortoise", "ladybug", "dragonfly", "firefly", "beehive",
    "croissant", "pretzel", "lemon", "watermelon", "cupcake", "teacup", "cookie jar", "kettle",
    "toaster", "record player", "radio", "camera", "binoculars", "skateboard", "surfboard",
    "snowman", "sled", "ice skates", "mitten", "scarf", "top hat", "bow tie", "sneaker",
    "lunchbox", "crayon", "paintbrush", "easel", "sculpture", "fishing rod", "tent", "campfire",
    "hammock", "lawn mower", "garden gnome", "watering can", "birdhouse", "weather vane",
    "clock tower", "streetlamp", "bus stop", "phone booth", "vending machine", "jukebox",
];

/// Deterministic offline provider. Responses depend only on the request payload.
///
/// - synonym: `cat` -> `cat-syn1`, `cat-syn1` -> `cat-syn2`, ...
/// - fuzz: distinct entries from a fixed lexicon, chosen by a hash of the input labels
/// - weave: the fallback template
/// - judge: `Yes` if the last image's file name contains `removed_`, `null` if it
///   contains `null_`, otherwise `No`
#[derive(Debug, Clone, Copy, Default)]
pub struct MockProvider;

impl MockProvider {
    fn synonym(label: &str) -> String {
        if let Some((stem, n)) = label.rsplit_once("-syn") {
            if let Ok(n) = n.parse::<u32>() {
                return format!("{stem}-syn{}", n + 1);
            }
        }
        format!("{label}-syn1")
    }

    fn fuzz(entities: &[String], count: usize) -> Vec<String> {
        let lowered: Vec<String> = entities.iter().map(|e| e.to_lowercase()).collect();
        let key = lowered.join("\u{1f}");
        let h = fnv1a(key.as_bytes());
        let n = LEXICON.len();
        // stride coprime with the lexicon length walks every entry once
        let stride = [7usize, 11, 13, 17, 19, 23]
            .into_iter()
            .cycle()
            .skip((h >> 32) as usize % 6)
            .find(|s| !n.is_multiple_of(*s))
            .unwrap_or(1);
        let mut out = Vec::with_capacity(count);
        let mut idx = (h % n as u64) as usize;
        for _ in 0..n {
            if out.len() == count {
                break;
            }
            let word = LEXICON[idx];
            if !lowered.iter().any(|e| e == word) {
                out.push(word.to_string());
            }
            idx = (idx + stride) % n;
        }
        let first = entities.first().map(String::as_str).unwrap_or("entity");
        let mut i = 1;
        while out.len() < count {
            out.push(format!("{first}-fuzz{i}"));
            i += 1;
        }
        out
    }
}

impl LlmProvider for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &LlmRequest) -> Result<String> {
        Ok(match &request.payload {
            LlmPayload::Synonym { entity } => Self::synonym(entity),
            LlmPayload::Fuzz { entities, count } => {
                serde_json::to_string(&Self::fuzz(entities, *count)).expect("list serializes")
            }
            LlmPayload::Weave { entities } => fallback_weave(entities),
            LlmPayload::Judge { images, .. } => {
                let name = images
                    .last()
                    .and_then(|p| p.file_name())
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                if name.contains("removed_") {
                    "Yes".to_string()
                } else if name.contains("null_") {
                    "null".to_string()
                } else {
                    "No".to_string()
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synonym_suffix_scheme() {
        assert_eq!(MockProvider::synonym("cat"), "cat-syn1");
        assert_eq!(MockProvider::synonym("cat-syn1"), "cat-syn2");
        assert_eq!(MockProvider::synonym("x-synth"), "x-synth-syn1");
    }

    #[test]
    fn lexicon_has_no_duplicates() {
        let mut v: Vec<&str> = LEXICON.to_vec();
        v.sort();
        v.dedup();
        assert_eq!(v.len(), LEXICON.len());
    }

    #[test]
    fn fuzz_exhausting_lexicon_falls_back_to_suffixes() {
        let out = MockProvider::fuzz(&["cat".into()], LEXICON.len() + 2);
        assert_eq!(out.len(), LEXICON.len() + 2);
        assert_eq!(out.last().unwrap(), "cat-fuzz2");
    }
}
