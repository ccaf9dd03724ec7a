//! Calibration prompt mining.
//!
//! Hard entities are those whose prompts the edited student already renders
//! differently from the teacher. [`run_ga`] searches entity combinations for
//! high misalignment distance, and [`weave_calibration_set`] turns the
//! survivors into prompts for the alignment loss.

mod ga;
mod md;

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{Entity, EntitySource, ParentMode};
use crate::llm::LlmGateway;
use crate::norm::NormOrder;

pub use ga::{crossover, mutation_fuzzing, rank_and_select, run_ga, GaOutcome, GenerationStats, MdCache};
pub use md::{misalignment_distance, probe_prompt, probe_sample, Fitness, MdTable, ModelFitness};

/// A genetic-search candidate: a non-empty, label-unique entity list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub entities: Vec<Entity>,
    /// Cached fitness, filled in on evaluation.
    pub md: Option<f64>,
    pub generation: usize,
}

impl Individual {
    pub fn new(entities: Vec<Entity>, generation: usize) -> Result<Self> {
        if entities.is_empty() {
            return Err(Error::Input("an individual needs at least one entity".into()));
        }
        Ok(Self::dedup(entities, generation))
    }

    /// Drops repeated labels, keeping first occurrences.
    pub(crate) fn dedup(entities: Vec<Entity>, generation: usize) -> Self {
        let mut seen = HashSet::new();
        let entities = entities
            .into_iter()
            .filter(|e| seen.insert(e.label().to_string()))
            .collect();
        Self {
            entities,
            md: None,
            generation,
        }
    }

    pub fn labels(&self) -> Vec<String> {
        self.entities.iter().map(|e| e.label().to_string()).collect()
    }

    /// Identity used for deduplication and fitness caching.
    pub fn key(&self) -> String {
        self.labels().join("\u{1f}")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    /// Population size kept after each selection.
    pub k: usize,
    /// Number of generations.
    pub generations: usize,
    /// Parents drawn per generation; paired consecutively, so must be even.
    pub parents: usize,
    pub mutation_rate: f64,
    pub fuzz_count: usize,
    /// Probes averaged per misalignment distance.
    pub md_samples: usize,
    pub norm: NormOrder,
    pub seed: u64,
    pub parent_mode: ParentMode,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            k: 10,
            generations: 20,
            parents: 10,
            mutation_rate: 0.2,
            fuzz_count: 2,
            md_samples: 8,
            norm: NormOrder::L1,
            seed: 0,
            parent_mode: ParentMode::Direct,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if self.parents < 2 || !self.parents.is_multiple_of(2) {
            return Err(Error::config("parents", format!("must be even and >= 2, got {}", self.parents)));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::config("mutation_rate", format!("must lie in [0, 1], got {}", self.mutation_rate)));
        }
        if self.md_samples == 0 {
            return Err(Error::config("md_samples", "must be at least 1"));
        }
        Ok(())
    }
}

/// A woven prompt and the entity list it encodes.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPrompt {
    pub text: String,
    pub entities: Vec<Entity>,
    pub md: f64,
    pub generation: usize,
}

/// One line of a calibration set file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationRecord {
    entities: Vec<String>,
    prompt: String,
    md: f64,
    generation: usize,
    sources: Vec<EntitySource>,
}

/// One prompt per individual, in order.
pub fn weave_calibration_set(individuals: &[Individual], gateway: &LlmGateway) -> Result<Vec<CalibrationPrompt>> {
    individuals
        .iter()
        .map(|ind| {
            let md = ind
                .md
                .ok_or_else(|| Error::Input(format!("individual {:?} has no evaluated md", ind.labels())))?;
            Ok(CalibrationPrompt {
                text: gateway.weave(&ind.entities),
                entities: ind.entities.clone(),
                md,
                generation: ind.generation,
            })
        })
        .collect()
}

/// Serializes a calibration set as JSON lines.
pub fn calibration_jsonl(prompts: &[CalibrationPrompt]) -> String {
    let mut out = String::new();
    for p in prompts {
        let rec = CalibrationRecord {
            entities: p.entities.iter().map(|e| e.label().to_string()).collect(),
            prompt: p.text.clone(),
            md: p.md,
            generation: p.generation,
            sources: p.entities.iter().map(Entity::source).collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("calibration record serializes"));
        out.push('\n');
    }
    out
}

/// Writes the set atomically (temporary file, then rename).
pub fn write_calibration_file(path: &Path, prompts: &[CalibrationPrompt]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(calibration_jsonl(prompts).as_bytes())
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_calibration_file(path: &Path) -> Result<Vec<CalibrationPrompt>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let format_err = |msg: String| Error::Format {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: CalibrationRecord = serde_json::from_str(line).map_err(|e| format_err(e.to_string()))?;
        if rec.entities.len() != rec.sources.len() {
            return Err(format_err("entities and sources differ in length".into()));
        }
        if rec.prompt.trim().is_empty() {
            return Err(format_err("empty prompt".into()));
        }
        let entities = rec
            .entities
            .into_iter()
            .zip(rec.sources)
            .map(|(l, s)| Entity::new(l, s))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| format_err(e.to_string()))?;
        out.push(CalibrationPrompt {
            text: rec.prompt,
            entities,
            md: rec.md,
            generation: rec.generation,
        });
    }
    Ok(out)
}
