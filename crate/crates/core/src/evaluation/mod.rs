//! Removal-rate metrics, alignment scorers, and per-checkpoint reports.
//!
//! Every metric entry keeps its raw per-sample records, and
//! [`MetricEntry::verify`] recomputes the headline value from them, so a
//! report can be audited without rerunning anything.

mod classifier;
mod images;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::backend::{Condition, ModelHandle};
use crate::error::{Error, Result};
use crate::llm::{LlmGateway, Verdict};
use crate::text::{mix_seed, tokens};

pub use classifier::{pool_features, train_concept_classifier, ClassifierConfig, ClassifierRegistry, ConceptClassifier};
pub use images::write_pgm;

/// Anything that labels an image 1 (concept absent) or 0 (present).
pub trait ImageClassifier: Sync {
    fn predict(&self, image: &[f64]) -> u8;
}

impl ImageClassifier for ConceptClassifier {
    fn predict(&self, image: &[f64]) -> u8 {
        ConceptClassifier::predict(self, image)
    }
}

impl<F: Fn(&[f64]) -> u8 + Sync> ImageClassifier for F {
    fn predict(&self, image: &[f64]) -> u8 {
        self(image)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub name: String,
    pub value: f64,
    pub n: usize,
    pub raw: Vec<serde_json::Value>,
    /// Secondary numbers such as the judge's null rate.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl MetricEntry {
    /// Recomputes `value` from `raw` and checks both it and `n`.
    pub fn verify(&self) -> Result<()> {
        let field = |r: &serde_json::Value, k: &str| -> Result<f64> {
            r.get(k)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| Error::Evaluation(format!("{}: raw record lacks numeric `{k}`", self.name)))
        };
        if self.n != self.raw.len() || self.n == 0 {
            return Err(Error::Evaluation(format!("{}: n={} but {} raw records", self.name, self.n, self.raw.len())));
        }
        let recomputed = if self.name == "rr-cls" {
            self.raw.iter().map(|r| field(r, "prediction")).sum::<Result<f64>>()? / self.n as f64
        } else if self.name == "rr-llm" {
            self.raw.iter().filter(|r| r.get("verdict").and_then(|v| v.as_str()) == Some("yes")).count() as f64
                / self.n as f64
        } else if self.name.starts_with("align:") {
            self.raw.iter().map(|r| field(r, "score")).sum::<Result<f64>>()? / self.n as f64
        } else {
            return Err(Error::Evaluation(format!("unknown metric `{}`", self.name)));
        };
        if (recomputed - self.value).abs() > 1e-12 {
            return Err(Error::Evaluation(format!(
                "{}: stored value {} but raw records give {recomputed}",
                self.name, self.value
            )));
        }
        Ok(())
    }
}

/// Classifier removal rate: the fraction of images predicted concept-absent.
pub fn rr_cls(classifier: &dyn ImageClassifier, images: &[Vec<f64>]) -> Result<MetricEntry> {
    if images.is_empty() {
        return Err(Error::Evaluation("rr-cls needs at least one image".into()));
    }
    let preds: Vec<u8> = images.par_iter().map(|x| classifier.predict(x)).collect();
    let removed = preds.iter().filter(|p| **p == 1).count();
    Ok(MetricEntry {
        name: "rr-cls".into(),
        value: removed as f64 / preds.len() as f64,
        n: preds.len(),
        raw: preds
            .iter()
            .enumerate()
            .map(|(i, p)| json!({"image": i, "prediction": p}))
            .collect(),
        extra: BTreeMap::new(),
    })
}

/// Judge removal rate: `yes` verdicts over judged images. `no` and `null`
/// both count as not removed; images the judge could not answer are left
/// out of `n` with a warning.
pub fn rr_llm(gateway: &LlmGateway, images: &[PathBuf], references: &[PathBuf], concept: &str) -> Result<MetricEntry> {
    if images.is_empty() {
        return Err(Error::Evaluation("rr-llm needs at least one image".into()));
    }
    let verdicts: Vec<_> = images
        .par_iter()
        .map(|img| gateway.judge_removal(std::slice::from_ref(img), references, concept))
        .collect();
    let mut raw = Vec::new();
    let (mut yes, mut null, mut unjudged) = (0usize, 0usize, 0usize);
    for (img, v) in images.iter().zip(verdicts) {
        match v {
            Ok(v) => {
                let word = match v.value {
                    Verdict::Yes => {
                        yes += 1;
                        "yes"
                    }
                    Verdict::No => "no",
                    Verdict::Null => {
                        null += 1;
                        "null"
                    }
                };
                raw.push(json!({"image": img, "verdict": word, "raw": v.raw}));
            }
            Err(e) => {
                unjudged += 1;
                log::warn!("{} left unjudged: {e}", img.display());
            }
        }
    }
    let n = raw.len();
    if n == 0 {
        return Err(Error::Evaluation(format!("judge answered none of {} images", images.len())));
    }
    let mut extra = BTreeMap::new();
    extra.insert("null_rate".into(), null as f64 / n as f64);
    extra.insert("rate_null_as_removed".into(), (yes + null) as f64 / n as f64);
    extra.insert("unjudged".into(), unjudged as f64);
    Ok(MetricEntry {
        name: "rr-llm".into(),
        value: yes as f64 / n as f64,
        n,
        raw,
        extra,
    })
}

/// Text-image alignment; higher is better.
pub trait AlignmentScorer: Sync {
    fn name(&self) -> &str;
    fn score(&self, prompt: &str, image: &Path) -> Result<f64>;
}

/// Token-overlap stand-in: the fraction of prompt tokens found in the
/// image's caption sidecar (`<image>.caption.txt`).
#[derive(Debug, Default, Clone, Copy)]
pub struct MockScorer;

pub fn caption_path(image: &Path) -> PathBuf {
    image.with_extension("caption.txt")
}

impl AlignmentScorer for MockScorer {
    fn name(&self) -> &str {
        "mock"
    }

    fn score(&self, prompt: &str, image: &Path) -> Result<f64> {
        let path = caption_path(image);
        let caption = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let have: std::collections::HashSet<String> = tokens(&caption).into_iter().collect();
        let want = tokens(prompt);
        if want.is_empty() {
            return Ok(0.0);
        }
        Ok(want.iter().filter(|t| have.contains(*t)).count() as f64 / want.len() as f64)
    }
}

pub fn scorer_by_name(name: &str) -> Result<Box<dyn AlignmentScorer>> {
    match name {
        "mock" => Ok(Box::new(MockScorer)),
        other => Err(Error::config("metrics", format!("no alignment scorer named `{other}` is registered"))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricSpec {
    RrCls,
    RrLlm,
    Align(String),
}

impl MetricSpec {
    /// Parses a comma list such as `rr-cls,rr-llm,align:mock`.
    pub fn parse_list(s: &str) -> Result<Vec<MetricSpec>> {
        s.split(',')
            .map(str::trim)
            .filter(|m| !m.is_empty())
            .map(|m| match m {
                "rr-cls" => Ok(MetricSpec::RrCls),
                "rr-llm" => Ok(MetricSpec::RrLlm),
                _ => match m.strip_prefix("align:") {
                    Some(name) if !name.is_empty() => Ok(MetricSpec::Align(name.to_string())),
                    _ => Err(Error::config("metrics", format!("unknown metric `{m}`"))),
                },
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metrics: Vec<MetricSpec>,
    /// Concept whose removal is being measured.
    pub concept: String,
    /// Reference images shown to the judge.
    pub references: Vec<PathBuf>,
    pub images_per_prompt: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: vec![MetricSpec::RrCls],
            concept: String::new(),
            references: Vec::new(),
            images_per_prompt: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started: String,
    pub finished: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub checkpoint: String,
    pub content_hash: String,
    /// Digest of the prompt list.
    pub prompt_set: String,
    pub concept: String,
    pub metrics: Vec<MetricEntry>,
    /// Set when no metric ran or some generations failed.
    pub incomplete: bool,
    pub timestamps: Timestamps,
}

impl EvaluationReport {
    pub fn verify(&self) -> Result<()> {
        self.metrics.iter().try_for_each(MetricEntry::verify)
    }

    pub fn metric(&self, name: &str) -> Option<&MetricEntry> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Newline-delimited prompt file; blank lines are skipped.
pub fn read_prompt_file(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn prompt_digest(prompts: &[String]) -> String {
    let mut h = Sha256::new();
    for p in prompts {
        h.update(p.as_bytes());
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..8])
}

/// Seed of the `rep`-th image for prompt `index`.
pub fn image_seed(seed: u64, index: usize, rep: usize) -> u64 {
    mix_seed(mix_seed(seed, index as u64), rep as u64)
}

/// Generates `images_per_prompt` latents per prompt in parallel. Failed
/// generations come back as errors in their slot.
pub fn generate_images(model: &ModelHandle, prompts: &[String], per_prompt: usize, seed: u64) -> Vec<Result<Vec<f64>>> {
    let jobs: Vec<(usize, usize)> = (0..prompts.len()).flat_map(|i| (0..per_prompt).map(move |r| (i, r))).collect();
    jobs.par_iter()
        .map(|&(i, r)| model.generate(&Condition::concept(prompts[i].clone()), image_seed(seed, i, r)))
        .collect()
}

/// Tools a metric may need.
#[derive(Default)]
pub struct EvalResources<'a> {
    pub classifier: Option<&'a dyn ImageClassifier>,
    pub gateway: Option<&'a LlmGateway>,
}

/// Generates images for every prompt, writes them (with caption sidecars)
/// under `out_dir/images`, and runs the configured metrics.
pub fn evaluate_checkpoint(
    model: &ModelHandle,
    prompts: &[String],
    cfg: &EvalConfig,
    res: &EvalResources<'_>,
    out_dir: &Path,
) -> Result<EvaluationReport> {
    let started = chrono::Utc::now().to_rfc3339();
    if prompts.is_empty() {
        return Err(Error::Input("evaluation needs at least one prompt".into()));
    }
    let mut incomplete = cfg.metrics.is_empty();
    let per_prompt = cfg.images_per_prompt.max(1);
    let generated = generate_images(model, prompts, per_prompt, cfg.seed);

    let img_dir = out_dir.join("images");
    let mut latents = Vec::new();
    let mut paths = Vec::new();
    let mut captions = Vec::new();
    for (slot, g) in generated.into_iter().enumerate() {
        let (i, r) = (slot / per_prompt, slot % per_prompt);
        match g {
            Ok(x) => {
                let path = img_dir.join(format!("img_{i:04}_{r}.pgm"));
                write_pgm(&path, &x, model.latent_shape())?;
                fs::write(caption_path(&path), &prompts[i]).map_err(|e| Error::io(&path, e))?;
                latents.push(x);
                paths.push(path);
                captions.push(prompts[i].clone());
            }
            Err(e) => {
                incomplete = true;
                log::warn!("generation failed for prompt {i} (image {r}): {e}");
            }
        }
    }

    let mut metrics = Vec::new();
    if !latents.is_empty() {
        for spec in &cfg.metrics {
            let entry = match spec {
                MetricSpec::RrCls => {
                    let c = res
                        .classifier
                        .ok_or_else(|| Error::config("metrics", "rr-cls requires a concept classifier"))?;
                    rr_cls(c, &latents)?
                }
                MetricSpec::RrLlm => {
                    let g = res
                        .gateway
                        .ok_or_else(|| Error::config("metrics", "rr-llm requires an LLM gateway"))?;
                    if cfg.references.is_empty() {
                        return Err(Error::config("references", "rr-llm requires at least one reference image"));
                    }
                    rr_llm(g, &paths, &cfg.references, &cfg.concept)?
                }
                MetricSpec::Align(name) => {
                    let scorer = scorer_by_name(name)?;
                    let scores: Vec<f64> = paths
                        .par_iter()
                        .zip(&captions)
                        .map(|(p, c)| scorer.score(c, p))
                        .collect::<Result<_>>()?;
                    MetricEntry {
                        name: format!("align:{}", scorer.name()),
                        value: scores.iter().sum::<f64>() / scores.len() as f64,
                        n: scores.len(),
                        raw: paths
                            .iter()
                            .zip(&captions)
                            .zip(&scores)
                            .map(|((p, c), s)| json!({"image": p, "prompt": c, "score": s}))
                            .collect(),
                        extra: BTreeMap::new(),
                    }
                }
            };
            metrics.push(entry);
        }
    }
    Ok(EvaluationReport {
        checkpoint: model.checkpoint_id().unwrap_or("unsaved").to_string(),
        content_hash: model.content_hash().to_string(),
        prompt_set: prompt_digest(prompts),
        concept: cfg.concept.clone(),
        metrics,
        incomplete,
        timestamps: Timestamps {
            started,
            finished: chrono::Utc::now().to_rfc3339(),
        },
    })
}
