//! Run configuration: one TOML file per run, validated before any work starts.
//!
//! ```toml
//! seed = 7
//! out = "runs/toy"
//! hierarchy = "data/sample_hierarchy.tsv"   # optional, bundled sample otherwise
//! entities = []                              # optional GA seeds, hierarchy leaves otherwise
//!
//! [backend]
//! kind = "toy"                               # or "checkpoint" with `run` (+ `id`)
//! toy = { init_seed = 0 }
//!
//! [gateway]
//! provider = "mock"                          # or "http" with `url` and `model`
//!
//! [ga]
//! k = 10
//! generations = 5
//!
//! [job]
//! reuse_calibration = false
//!
//! [[steps]]
//! concept = "zorblax"
//! lambda = 0.5
//!
//! [eval]
//! metrics = ["rr-cls", "align:mock"]
//!
//! [[eval.concepts]]
//! concept = "zorblax"
//! prompts = ["a painting in the style of zorblax"]
//! absent_prompts = ["a painting in the style of valdrin"]
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{load_checkpoint, ModelHandle, Role, ToyBackend, ToyConfig};
use crate::calibration::GaConfig;
use crate::error::{Error, Result};
use crate::evaluation::{read_prompt_file, MetricSpec};
use crate::hierarchy::Hierarchy;
use crate::llm::{GatewayConfig, HttpProvider, LlmGateway, MockProvider};
use crate::removal::{RemovalJob, RemovalStepConfig};
use crate::scenario::sample_hierarchy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    /// `toy` builds a fresh toy model; `checkpoint` loads a saved teacher.
    pub kind: String,
    pub toy: ToyConfig,
    /// Run directory holding the teacher checkpoint (`kind = "checkpoint"`).
    pub run: Option<PathBuf>,
    pub id: String,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: "toy".into(),
            toy: ToyConfig::default(),
            run: None,
            id: "teacher".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewaySection {
    /// `mock` (offline, deterministic) or `http`.
    pub provider: String,
    pub url: Option<String>,
    pub model: Option<String>,
    pub timeout_s: u64,
    pub temperature: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub min_interval_ms: u64,
    /// Defaults to `<out>/llm_audit.jsonl`.
    pub audit_log: Option<PathBuf>,
}

impl Default for GatewaySection {
    fn default() -> Self {
        let g = GatewayConfig::default();
        Self {
            provider: "mock".into(),
            url: None,
            model: None,
            timeout_s: 60,
            temperature: g.temperature,
            max_retries: g.max_retries,
            backoff_ms: g.backoff_ms,
            max_in_flight: g.max_in_flight,
            min_interval_ms: g.min_interval_ms,
            audit_log: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JobSection {
    pub reuse_calibration: bool,
    pub warmup_every_step: bool,
    /// Stop cleanly after this many steps; a later `--resume` finishes the job.
    pub stop_after: Option<usize>,
}

/// One concept to measure during `eval`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConcept {
    pub concept: String,
    /// Prompts mentioning the concept; images of these are scored.
    pub prompts: Vec<String>,
    /// Newline-delimited alternative to `prompts`.
    pub prompts_file: Option<PathBuf>,
    /// Prompts without the concept, the classifier's "absent" class.
    pub absent_prompts: Vec<String>,
    /// Reference images of the concept for the LLM judge.
    pub references: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub metrics: Vec<String>,
    pub images_per_prompt: usize,
    /// Teacher images per prompt used to train each concept classifier.
    pub classifier_images: usize,
    /// Checkpoints to evaluate; empty means the teacher and every complete step.
    pub checkpoints: Vec<String>,
    pub concepts: Vec<EvalConcept>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metrics: vec!["rr-cls".into()],
            images_per_prompt: 4,
            classifier_images: 6,
            checkpoints: Vec::new(),
            concepts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub hierarchy: Option<PathBuf>,
    pub entities: Vec<String>,
    pub backend: BackendSection,
    pub gateway: GatewaySection,
    pub ga: GaConfig,
    pub job: JobSection,
    pub steps: Vec<RemovalStepConfig>,
    pub eval: EvalSection,
}

/// A parsed config together with its source, for error locations and digests.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub path: PathBuf,
    pub text: String,
}

impl LoadedConfig {
    /// Reads and parses `path`. Syntax errors and unknown keys come back as
    /// [`Error::Format`] carrying the offending line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::config("config", format!("{} does not exist", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: e.span().map(|s| line_of_offset(text, s.start)).unwrap_or(0),
            msg: e.message().to_string(),
        })?;
        Ok(Self {
            config,
            path: path.to_path_buf(),
            text: text.to_string(),
        })
    }

    /// Hex SHA-256 of the config file bytes.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }

    /// Runs [`RunConfig::validate`] and anchors a failure to the line that
    /// sets the offending key.
    pub fn validate(&self) -> Result<()> {
        self.config.validate().map_err(|e| match e {
            Error::Config { key, msg } => match locate_key(&self.text, &key) {
                Some(line) => Error::Format {
                    path: self.path.clone(),
                    line,
                    msg: format!("invalid `{key}`: {msg}"),
                },
                None => Error::Config { key, msg },
            },
            other => other,
        })
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { key, msg } => Error::Config {
            key: format!("{prefix}.{key}"),
            msg,
        },
        other => other,
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        match self.backend.kind.as_str() {
            "toy" => {
                if self.backend.toy.latent_shape.iter().product::<usize>() == 0 {
                    return Err(Error::config("backend.toy.latent_shape", "must be non-empty with no zero axis"));
                }
                if self.backend.toy.t_max == 0 {
                    return Err(Error::config("backend.toy.t_max", "must be at least 1"));
                }
            }
            "checkpoint" => {
                let run = self
                    .backend
                    .run
                    .as_ref()
                    .ok_or_else(|| Error::config("backend.run", "required when kind = \"checkpoint\""))?;
                let manifest = crate::backend::checkpoint_dir(run, &self.backend.id).join("manifest.json");
                if !manifest.exists() {
                    return Err(Error::config(
                        "backend.run",
                        format!("no teacher checkpoint `{}` under {}", self.backend.id, run.display()),
                    ));
                }
            }
            other => return Err(Error::config("backend.kind", format!("unknown backend `{other}` (toy, checkpoint)"))),
        }
        match self.gateway.provider.as_str() {
            "mock" => {}
            "http" => {
                if self.gateway.url.as_deref().unwrap_or("").is_empty() {
                    return Err(Error::config("gateway.url", "required when provider = \"http\""));
                }
                if self.gateway.model.as_deref().unwrap_or("").is_empty() {
                    return Err(Error::config("gateway.model", "required when provider = \"http\""));
                }
            }
            other => return Err(Error::config("gateway.provider", format!("unknown provider `{other}` (mock, http)"))),
        }
        if !(self.gateway.temperature.is_finite() && self.gateway.temperature >= 0.0) {
            return Err(Error::config("gateway.temperature", "must be a finite value >= 0"));
        }
        if let Some(h) = &self.hierarchy {
            if !h.exists() {
                return Err(Error::config("hierarchy", format!("{} does not exist", h.display())));
            }
        }
        self.ga.validate().map_err(|e| prefixed("ga", e))?;
        if self.steps.is_empty() {
            return Err(Error::config("steps", "at least one [[steps]] entry is required"));
        }
        for (i, s) in self.steps.iter().enumerate() {
            s.validate().map_err(|e| prefixed(&format!("steps[{i}]"), e))?;
        }
        if self.job.stop_after == Some(0) {
            return Err(Error::config("job.stop_after", "must be at least 1"));
        }
        self.metric_specs()?;
        if self.eval.images_per_prompt == 0 {
            return Err(Error::config("eval.images_per_prompt", "must be at least 1"));
        }
        for (i, c) in self.eval.concepts.iter().enumerate() {
            let key = |k: &str| format!("eval.concepts[{i}].{k}");
            if c.concept.trim().is_empty() {
                return Err(Error::config(key("concept"), "must be non-empty"));
            }
            if c.prompts.is_empty() && c.prompts_file.is_none() {
                return Err(Error::config(key("prompts"), "give `prompts` or `prompts_file`"));
            }
            if let Some(f) = &c.prompts_file {
                if !f.exists() {
                    return Err(Error::config(key("prompts_file"), format!("{} does not exist", f.display())));
                }
            }
        }
        Ok(())
    }

    pub fn metric_specs(&self) -> Result<Vec<MetricSpec>> {
        MetricSpec::parse_list(&self.eval.metrics.join(",")).map_err(|e| prefixed("eval", e))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::config("out", "no output directory (set `out` or pass --out)"))
    }

    pub fn hierarchy(&self) -> Result<Hierarchy> {
        match &self.hierarchy {
            Some(p) => crate::hierarchy::load_hierarchy(p),
            None => Ok(sample_hierarchy()),
        }
    }

    /// The frozen teacher described by `[backend]`.
    pub fn teacher(&self) -> Result<ModelHandle> {
        match self.backend.kind.as_str() {
            "toy" => Ok(ModelHandle::teacher(ToyBackend::new(self.backend.toy.clone()))),
            _ => {
                let run = self.backend.run.as_deref().ok_or_else(|| Error::config("backend.run", "missing"))?;
                let m = load_checkpoint(run, &self.backend.id).map_err(|e| match e {
                    Error::NotFound(msg) => Error::config("backend.run", format!("no teacher checkpoint: {msg}")),
                    other => other,
                })?;
                if m.role() != Role::TeacherFrozen {
                    return Err(Error::config(
                        "backend.id",
                        format!("checkpoint `{}` is not a frozen teacher", self.backend.id),
                    ));
                }
                Ok(m)
            }
        }
    }

    pub fn gateway(&self) -> Result<LlmGateway> {
        let g = &self.gateway;
        let audit_log = match (&g.audit_log, &self.out) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(out)) => Some(out.join("llm_audit.jsonl")),
            (None, None) => None,
        };
        let cfg = GatewayConfig {
            temperature: g.temperature,
            max_retries: g.max_retries,
            backoff_ms: g.backoff_ms,
            max_in_flight: g.max_in_flight,
            min_interval_ms: g.min_interval_ms,
            audit_log,
        };
        match g.provider.as_str() {
            "http" => {
                let provider = HttpProvider::from_env(
                    g.url.clone().unwrap_or_default(),
                    g.model.clone().unwrap_or_default(),
                    Duration::from_secs(g.timeout_s),
                );
                LlmGateway::new(provider, cfg)
            }
            _ => LlmGateway::new(MockProvider, cfg),
        }
    }

    pub fn job(&self, resume: bool) -> Result<RemovalJob> {
        Ok(RemovalJob {
            ga: self.ga.clone(),
            entities: self.entities.clone(),
            reuse_calibration: self.job.reuse_calibration,
            warmup_every_step: self.job.warmup_every_step,
            seed: self.seed,
            resume,
            stop_after: self.job.stop_after,
            ..RemovalJob::new(self.out_dir()?, self.steps.clone())
        })
    }
}

impl EvalConcept {
    pub fn prompt_list(&self) -> Result<Vec<String>> {
        let mut prompts = self.prompts.clone();
        if let Some(f) = &self.prompts_file {
            prompts.extend(read_prompt_file(f)?);
        }
        Ok(prompts)
    }
}

/// 1-based line on which a dotted key path such as `steps[1].lambda` or
/// `ga.k` is set, or the line of its table header when the key itself is
/// absent. Handles `[table]` and `[[array]]` headers and top-level keys.
pub fn locate_key(text: &str, key: &str) -> Option<usize> {
    let (table, leaf) = match key.rsplit_once('.') {
        Some((t, l)) => (t, l),
        None => ("", key),
    };
    // "steps[1]" -> ("steps", Some(1)); "eval.concepts[0]" -> ("eval.concepts", Some(0))
    let (table_name, index) = match table.strip_suffix(']').and_then(|t| t.rsplit_once('[')) {
        Some((name, i)) => (name, i.parse::<usize>().ok()),
        None => (table, None),
    };
    let mut current = String::new();
    let mut array_counts: std::collections::HashMap<String, usize> = Default::default();
    let mut current_index: Option<usize> = None;
    let mut header_line = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with("[[") {
            let name = line.trim_start_matches("[[").split("]]").next().unwrap_or("").trim().to_string();
            let count = array_counts.entry(name.clone()).or_insert(0);
            current_index = Some(*count);
            *count += 1;
            current = name;
        } else if line.starts_with('[') {
            current = line.trim_start_matches('[').split(']').next().unwrap_or("").trim().to_string();
            current_index = None;
        } else if current == table_name && current_index == index {
            let assigned = line.split('=').next().map(str::trim);
            if assigned == Some(leaf) {
                return Some(n + 1);
            }
            continue;
        } else {
            // dotted or inline forms at the parent level, e.g. `toy = { t_max = 0 }`
            if !table_name.is_empty() && index.is_none() {
                if let Some(rest) = table_name.strip_prefix(&format!("{current}.")).or(if current.is_empty() {
                    Some(table_name)
                } else {
                    None
                }) {
                    let assigned = line.split('=').next().map(str::trim).unwrap_or("");
                    if assigned == rest && line.contains(leaf) {
                        return Some(n + 1);
                    }
                }
            }
            continue;
        }
        if current == table_name && current_index == index && header_line.is_none() {
            header_line = Some(n + 1);
        }
    }
    header_line
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
seed = 3
out = "runs/x"

[ga]
k = 4
generations = 1

[[steps]]
concept = "zorblax"

[[steps]]
concept = "quintrel"
lambda = -0.5
"#;

    #[test]
    fn parses_and_digests() {
        let c = LoadedConfig::parse(TOY, Path::new("toy.toml")).unwrap();
        assert_eq!(c.config.seed, 3);
        assert_eq!(c.config.steps.len(), 2);
        assert_eq!(c.config.ga.k, 4);
        assert_eq!(c.digest().len(), 64);
    }

    #[test]
    fn negative_lambda_names_key_and_line() {
        let c = LoadedConfig::parse(TOY, Path::new("toy.toml")).unwrap();
        let e = c.validate().unwrap_err();
        assert!(e.is_config());
        let msg = e.to_string();
        assert!(msg.contains("toy.toml:14"), "{msg}");
        assert!(msg.contains("steps[1].lambda"), "{msg}");
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = "seed = 1\n[ga]\nk = 2\nbogus = 1\n";
        let e = LoadedConfig::parse(text, Path::new("c.toml")).unwrap_err();
        assert!(matches!(e, Error::Format { line: 4, .. }), "{e}");
        assert!(e.to_string().contains("bogus"));
    }

    #[test]
    fn locate_key_forms() {
        let text = "seed = 1\n[backend]\ntoy = { t_max = 0 }\n[ga]\nk = 0\n[[steps]]\nconcept = \"a\"\n[[steps]]\nconcept = \"b\"\n";
        assert_eq!(locate_key(text, "seed"), Some(1));
        assert_eq!(locate_key(text, "ga.k"), Some(5));
        assert_eq!(locate_key(text, "ga.parents"), Some(4));
        assert_eq!(locate_key(text, "steps[1].concept"), Some(9));
        assert_eq!(locate_key(text, "steps[0].lambda"), Some(6));
        assert_eq!(locate_key(text, "backend.toy.t_max"), Some(3));
        assert_eq!(locate_key(text, "eval.metrics"), None);
    }

    #[test]
    fn missing_checkpoint_teacher_is_config_error() {
        let text = "[backend]\nkind = \"checkpoint\"\nrun = \"/nonexistent/run\"\n[[steps]]\nconcept = \"a\"\n";
        let e = LoadedConfig::parse(text, Path::new("c.toml")).unwrap().validate().unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("backend.run"));
    }

    #[test]
    fn unknown_metric_is_config_error() {
        let text = "[[steps]]\nconcept = \"a\"\n[eval]\nmetrics = [\"fid\"]\n";
        let e = LoadedConfig::parse(text, Path::new("c.toml")).unwrap().validate().unwrap_err();
        assert!(e.is_config());
    }
}
