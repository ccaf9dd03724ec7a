use std::fs;
use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{prompts, LlmPayload, LlmProvider, LlmRequest};
use crate::error::{Error, Result};

pub const API_KEY_ENV: &str = "CCRT_LLM_API_KEY";

/// Chat-completion style HTTP endpoint (`POST {url}` with `{model, temperature, messages}`).
#[derive(Debug)]
pub struct HttpProvider {
    url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.into(),
            model: model.into(),
            api_key,
            agent,
        }
    }

    /// Reads the API key from `CCRT_LLM_API_KEY` when set.
    pub fn from_env(url: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(url, model, key, timeout)
    }

    fn message_content(&self, request: &LlmRequest) -> Result<Value> {
        Ok(match &request.payload {
            LlmPayload::Synonym { entity } => json!(prompts::synonym(entity)),
            LlmPayload::Fuzz { entities, count } => json!(prompts::fuzz(entities, *count)),
            LlmPayload::Weave { entities } => json!(prompts::weave(entities)),
            LlmPayload::Judge {
                images,
                references,
                concept,
            } => {
                let mut parts = vec![json!({"type": "text", "text": prompts::judge(concept)})];
                for p in references.iter().chain(images) {
                    parts.push(json!({"type": "image_url", "image_url": {"url": data_url(p)?}}));
                }
                Value::Array(parts)
            }
        })
    }
}

fn data_url(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("pgm") => "image/x-portable-graymap",
        _ => "application/octet-stream",
    };
    Ok(format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

impl LlmProvider for HttpProvider {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &LlmRequest) -> Result<String> {
        let body = json!({
            "model": self.model,
            "temperature": request.temperature,
            "messages": [{"role": "user", "content": self.message_content(request)?}],
        });
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| Error::Gateway(format!("{}: {e}", self.url)))?;
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Gateway(format!("unreadable response: {e}")))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Gateway("response has no choices[0].message.content".into()))
    }
}
