//! Every LLM-assisted step goes through [`LlmGateway`]: synonym replacement,
//! fuzz expansion, prompt weaving, and removal judging.
//!
//! Providers turn a structured [`LlmRequest`] into raw response text; the
//! gateway owns retries, parsing, weave validation, the in-flight cap, the
//! rate limit, and the JSON-lines audit log.

mod http;
mod mock;
pub mod prompts;

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hierarchy::{Entity, EntitySource};

pub use http::{HttpProvider, API_KEY_ENV};
pub use mock::MockProvider;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmTask {
    Synonym,
    Fuzz,
    Weave,
    Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum LlmPayload {
    Synonym {
        entity: String,
    },
    Fuzz {
        entities: Vec<String>,
        count: usize,
    },
    Weave {
        entities: Vec<String>,
    },
    Judge {
        images: Vec<PathBuf>,
        references: Vec<PathBuf>,
        concept: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub payload: LlmPayload,
    pub temperature: f64,
    pub max_retries: u32,
}

impl LlmRequest {
    pub fn task(&self) -> LlmTask {
        match self.payload {
            LlmPayload::Synonym { .. } => LlmTask::Synonym,
            LlmPayload::Fuzz { .. } => LlmTask::Fuzz,
            LlmPayload::Weave { .. } => LlmTask::Weave,
            LlmPayload::Judge { .. } => LlmTask::Judge,
        }
    }

    /// Hex SHA-256 of the payload and temperature.
    pub fn digest(&self) -> String {
        let canonical = serde_json::json!({"payload": self.payload, "temperature": self.temperature});
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }
}

/// Turns a request into raw response text.
pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &LlmRequest) -> Result<String>;
}

/// Provider backed by a closure. Useful for scripted responses and fault injection.
pub struct FnProvider<F>(pub F);

impl<F> LlmProvider for FnProvider<F>
where
    F: Fn(&LlmRequest) -> Result<String> + Send + Sync,
{
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &LlmRequest) -> Result<String> {
        (self.0)(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
    Null,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub value: Verdict,
    pub raw: String,
}

impl JudgeVerdict {
    /// The first of the words `yes`, `no`, `null` (case-insensitive) decides;
    /// a response containing none of them parses as `null` with a warning.
    pub fn parse(raw: &str) -> Self {
        let value = raw
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .find_map(|w| match w.to_ascii_lowercase().as_str() {
                "yes" => Some(Verdict::Yes),
                "no" => Some(Verdict::No),
                "null" => Some(Verdict::Null),
                _ => None,
            })
            .unwrap_or_else(|| {
                log::warn!("judge response has no yes/no/null verdict, treating as null: {raw:?}");
                Verdict::Null
            });
        Self {
            value,
            raw: raw.to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewayConfig {
    pub temperature: f64,
    pub max_retries: u32,
    /// First retry delay; doubles on every further attempt.
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    /// Minimum spacing between request starts.
    pub min_interval_ms: u64,
    pub audit_log: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_retries: 3,
            backoff_ms: 500,
            max_in_flight: 4,
            min_interval_ms: 0,
            audit_log: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AuditRecord {
    pub task: LlmTask,
    pub request_digest: String,
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub timestamp: String,
}

struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().expect("slot lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("slot lock");
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("slot lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct LlmGateway {
    provider: Box<dyn LlmProvider>,
    cfg: GatewayConfig,
    slots: Slots,
    next_start: Mutex<Option<Instant>>,
    audit: Option<Mutex<File>>,
    synonyms: Mutex<HashMap<String, BTreeSet<String>>>,
    calls: AtomicUsize,
}

impl std::fmt::Debug for LlmGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmGateway")
            .field("provider", &self.provider.name())
            .field("cfg", &self.cfg)
            .finish()
    }
}

impl LlmGateway {
    pub fn new(provider: impl LlmProvider + 'static, cfg: GatewayConfig) -> Result<Self> {
        let audit = match &cfg.audit_log {
            Some(path) => {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?;
                Some(Mutex::new(f))
            }
            None => None,
        };
        Ok(Self {
            provider: Box::new(provider),
            slots: Slots {
                free: Mutex::new(cfg.max_in_flight.max(1)),
                cv: Condvar::new(),
            },
            cfg,
            next_start: Mutex::new(None),
            audit,
            synonyms: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        })
    }

    /// Offline deterministic gateway with default settings and no audit log.
    pub fn mock() -> Self {
        Self::new(MockProvider, GatewayConfig::default()).expect("mock gateway without audit log")
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    /// Number of provider calls issued so far, retries included.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn request(&self, payload: LlmPayload) -> LlmRequest {
        LlmRequest {
            payload,
            temperature: self.cfg.temperature,
            max_retries: self.cfg.max_retries,
        }
    }

    fn wait_for_rate_limit(&self) {
        if self.cfg.min_interval_ms == 0 {
            return;
        }
        let interval = Duration::from_millis(self.cfg.min_interval_ms);
        let wait = {
            let mut next = self.next_start.lock().expect("rate lock");
            let now = Instant::now();
            let start = next.map_or(now, |n| n.max(now));
            *next = Some(start + interval);
            start - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }

    fn audit(&self, request: &LlmRequest, outcome: &Result<String>) {
        let Some(file) = &self.audit else { return };
        let record = AuditRecord {
            task: request.task(),
            request_digest: request.digest(),
            response: outcome.as_ref().ok().cloned(),
            error: outcome.as_ref().err().map(|e| e.to_string()),
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        let mut line = serde_json::to_string(&record).expect("audit record serializes");
        line.push('\n');
        let mut f = file.lock().expect("audit lock");
        if let Err(e) = f.write_all(line.as_bytes()) {
            log::warn!("audit log write failed: {e}");
        }
    }

    /// One provider round trip, audited.
    fn attempt(&self, request: &LlmRequest) -> Result<String> {
        let _slot = self.slots.acquire();
        self.wait_for_rate_limit();
        self.calls.fetch_add(1, Ordering::SeqCst);
        let outcome = self.provider.complete(request);
        self.audit(request, &outcome);
        outcome
    }

    fn backoff(&self, attempt: u32) {
        let ms = self.cfg.backoff_ms.saturating_mul(1u64 << attempt.min(16));
        if ms > 0 {
            thread::sleep(Duration::from_millis(ms));
        }
    }

    /// Calls the provider until `accept` yields a value, retrying with
    /// exponential backoff up to `max_retries` extra attempts.
    fn call_with<T>(&self, payload: LlmPayload, mut accept: impl FnMut(&str) -> Option<T>) -> Result<T> {
        let request = self.request(payload);
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                self.backoff(attempt - 1);
            }
            match self.attempt(&request) {
                Ok(raw) => match accept(&raw) {
                    Some(v) => return Ok(v),
                    None => last = format!("unusable response {raw:?}"),
                },
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::Gateway(format!(
            "{:?} failed after {} attempt(s): {last}",
            request.task(),
            self.cfg.max_retries + 1
        )))
    }

    /// Replaces an entity with a synonym proposed by the provider.
    pub fn synonym_replace(&self, entity: &Entity) -> Result<Entity> {
        let label = entity.label().to_string();
        let syn = self.call_with(LlmPayload::Synonym { entity: label.clone() }, |raw| {
            let line = raw.lines().map(str::trim).find(|l| !l.is_empty())?;
            let cleaned = line.trim_matches(|c: char| c == '"' || c == '\'' || c == '.' || c.is_whitespace());
            (!cleaned.is_empty()).then(|| cleaned.to_string())
        })?;
        {
            let mut map = self.synonyms.lock().expect("synonym lock");
            map.entry(syn.clone()).or_default().insert(label.clone());
            map.entry(label).or_default().insert(syn.clone());
        }
        Entity::new(syn, EntitySource::Mutation)
    }

    /// Up to `count` new entities, none repeating an input label.
    pub fn fuzz_expand(&self, entities: &[Entity], count: usize) -> Result<Vec<Entity>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let labels: Vec<String> = entities.iter().map(|e| e.label().to_string()).collect();
        let taken: BTreeSet<String> = labels.iter().map(|l| l.to_lowercase()).collect();
        let found = self.call_with(LlmPayload::Fuzz { entities: labels, count }, |raw| {
            let items = parse_list(raw);
            let mut seen = taken.clone();
            let fresh: Vec<String> = items
                .into_iter()
                .filter(|i| seen.insert(i.to_lowercase()))
                .take(count)
                .collect();
            (!fresh.is_empty()).then_some(fresh)
        })?;
        found
            .into_iter()
            .map(|l| Entity::new(l, EntitySource::Fuzzing))
            .collect()
    }

    /// One prompt sentence mentioning every entity; falls back to a template.
    pub fn weave(&self, entities: &[Entity]) -> String {
        let labels: Vec<String> = entities.iter().map(|e| e.label().to_string()).collect();
        if labels.is_empty() {
            return prompts::fallback_weave(&labels);
        }
        let result = self.call_with(LlmPayload::Weave { entities: labels.clone() }, |raw| {
            let text = raw.trim().trim_matches('"').trim().to_string();
            (!text.is_empty() && self.contains_all(&text, &labels)).then_some(text)
        });
        match result {
            Ok(text) => text,
            Err(e) => {
                log::warn!("weave fell back to template: {e}");
                prompts::fallback_weave(&labels)
            }
        }
    }

    /// True when every label, or a synonym the gateway recorded for it, occurs in `text`.
    pub fn contains_all(&self, text: &str, labels: &[String]) -> bool {
        let hay = text.to_lowercase();
        let map = self.synonyms.lock().expect("synonym lock");
        labels.iter().all(|l| {
            hay.contains(&l.to_lowercase())
                || map
                    .get(l)
                    .is_some_and(|alts| alts.iter().any(|a| hay.contains(&a.to_lowercase())))
        })
    }

    /// Asks whether the last image no longer shows `concept`, given reference images.
    pub fn judge_removal(&self, images: &[PathBuf], references: &[PathBuf], concept: &str) -> Result<JudgeVerdict> {
        if images.is_empty() || references.is_empty() {
            return Err(Error::Input("judging needs at least one image and one reference".into()));
        }
        self.call_with(
            LlmPayload::Judge {
                images: images.to_vec(),
                references: references.to_vec(),
                concept: concept.to_string(),
            },
            |raw| Some(JudgeVerdict::parse(raw)),
        )
    }
}

/// JSON string array, or one item per line / comma with list markers stripped.
fn parse_list(raw: &str) -> Vec<String> {
    let trimmed = raw.trim();
    if let Ok(items) = serde_json::from_str::<Vec<String>>(trimmed) {
        return items.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    trimmed
        .split(['\n', ','])
        .map(|s| {
            s.trim()
                .trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '-' | '*' | '.' | ')'))
                .trim()
                .trim_matches(|c: char| c == '"' || c == '\'' || c == '[' || c == ']')
                .trim()
                .to_string()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

/// Re-parses every judge response in an audit log, in file order.
pub fn replay_judge_verdicts(path: &Path) -> Result<Vec<(String, JudgeVerdict)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AuditRecord = serde_json::from_str(&line)?;
        if rec.task == LlmTask::Judge {
            if let Some(resp) = rec.response {
                out.push((rec.request_digest, JudgeVerdict::parse(&resp)));
            }
        }
    }
    Ok(out)
}
