//! Desk-scale end-to-end scenario on the toy backend.
//!
//! Two made-up style words play the concepts to remove. A per-concept
//! classifier is trained on teacher images of prompts with and without the
//! concept; removal success is its absent-rate on the edited model, and
//! entity forgetting is the misalignment distance on held-out entities that
//! never appear in any calibration prompt.

use std::path::Path;

use serde::Serialize;

use crate::backend::{ModelHandle, ToyBackend, ToyConfig};
use crate::calibration::{misalignment_distance, GaConfig, Individual};
use crate::error::Result;
use crate::evaluation::{generate_images, rr_cls, train_concept_classifier, ClassifierConfig, ConceptClassifier};
use crate::hierarchy::{Entity, EntitySource, Hierarchy};
use crate::llm::LlmGateway;
use crate::removal::{init_run, run_continuous, OptimizerKind, RemovalJob, RemovalStepConfig};
use crate::text::mix_seed;

/// The bundled 60-node ImageNet-style sample hierarchy.
pub const SAMPLE_HIERARCHY: &str = include_str!("../data/sample_hierarchy.tsv");

pub fn sample_hierarchy() -> Hierarchy {
    Hierarchy::parse(SAMPLE_HIERARCHY, Path::new("sample_hierarchy.tsv")).expect("bundled hierarchy parses")
}

#[derive(Debug, Clone)]
pub struct ToyScenario {
    pub concepts: Vec<String>,
    /// Prompt templates; `{}` is replaced by a style word.
    pub templates: Vec<String>,
    /// How many leading templates the removal steps train on; 0 trains on
    /// the bare concept name and leaves every template for evaluation.
    pub train_templates: usize,
    /// Style words standing in for "any other style" in the classifier's absent class.
    pub decoys: Vec<String>,
    /// Entities never used for calibration, probed for forgetting.
    pub held_out: Vec<String>,
    pub images_per_prompt: usize,
    pub teacher: ToyConfig,
    pub ga: GaConfig,
    pub step: RemovalStepConfig,
}

impl Default for ToyScenario {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Self {
            concepts: s(&["zorblax", "quintrel"]),
            templates: s(&[
                "a painting in the style of {}",
                "a portrait of a woman by {}",
                "a quiet landscape in {} style",
                "a still life of flowers by {}",
                "a city street at night, {} artwork",
                "a harbor with boats painted by {}",
                "a mountain village in the manner of {}",
                "an old farmhouse, {} style",
            ]),
            train_templates: 0,
            decoys: s(&["valdrin", "moskel", "pethra", "ulvane", "corith", "smeld"]),
            held_out: s(&[
                "giraffe", "zebra", "castle", "rocket", "piano", "elephant", "bridge", "locomotive", "cathedral",
                "penguin",
            ]),
            images_per_prompt: 6,
            teacher: ToyConfig::default(),
            ga: GaConfig {
                k: 10,
                generations: 3,
                parents: 10,
                mutation_rate: 0.2,
                fuzz_count: 2,
                md_samples: 4,
                ..GaConfig::default()
            },
            step: RemovalStepConfig {
                iterations: 200,
                warmup_iterations: 50,
                lambda: 0.5,
                optimizer: OptimizerKind::Adam,
                learning_rate: 5e-3,
                ..RemovalStepConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioOutcome {
    pub seed: u64,
    pub lambda: f64,
    /// Classifier test accuracy per concept.
    pub classifier_accuracy: Vec<f64>,
    /// Removal rate per concept on the teacher.
    pub rr_before: Vec<f64>,
    /// Removal rate per concept on the final student.
    pub rr_after: Vec<f64>,
    /// Mean misalignment distance over the held-out entities, final student vs teacher.
    pub held_out_md: f64,
    pub final_hash: String,
    pub teacher_hash: String,
    pub removed: Vec<String>,
}

impl ToyScenario {
    fn fill(&self, template: &str, word: &str) -> String {
        template.replace("{}", word)
    }

    pub fn concept_prompts(&self, concept: &str) -> Vec<String> {
        let n = self.train_templates.min(self.templates.len());
        self.templates[..n].iter().map(|t| self.fill(t, concept)).collect()
    }

    /// Every template filled with `concept`, used for measuring removal.
    pub fn eval_prompts(&self, concept: &str) -> Vec<String> {
        self.templates.iter().map(|t| self.fill(t, concept)).collect()
    }

    fn decoy_prompts(&self) -> Vec<String> {
        self.decoys
            .iter()
            .flat_map(|d| self.templates.iter().map(move |t| t.replace("{}", d)))
            .collect()
    }

    pub fn teacher(&self, seed: u64) -> ModelHandle {
        ModelHandle::teacher(ToyBackend::new(ToyConfig {
            init_seed: seed,
            ..self.teacher.clone()
        }))
    }

    /// Trains the concept's classifier on teacher images (concept prompts vs decoy prompts).
    pub fn train_classifier(&self, teacher: &ModelHandle, concept: &str, seed: u64) -> Result<ConceptClassifier> {
        let n = self.images_per_prompt;
        let present: Vec<Vec<f64>> = generate_images(teacher, &self.eval_prompts(concept), n, mix_seed(seed, 1))
            .into_iter()
            .collect::<Result<_>>()?;
        let absent: Vec<Vec<f64>> = generate_images(teacher, &self.decoy_prompts(), 1, mix_seed(seed, 2))
            .into_iter()
            .collect::<Result<_>>()?;
        let cfg = ClassifierConfig {
            seed,
            ..ClassifierConfig::default()
        };
        train_concept_classifier(concept, &present, &absent, teacher.latent_shape(), &cfg)
    }

    /// Classifier removal rate on fresh images of the concept's prompts.
    pub fn removal_rate(&self, model: &ModelHandle, classifier: &ConceptClassifier, seed: u64) -> Result<f64> {
        let images: Vec<Vec<f64>> =
            generate_images(model, &self.eval_prompts(&classifier.concept), self.images_per_prompt, mix_seed(seed, 3))
                .into_iter()
                .collect::<Result<_>>()?;
        Ok(rr_cls(classifier, &images)?.value)
    }

    /// Mean misalignment distance over the held-out entities.
    pub fn held_out_md(&self, teacher: &ModelHandle, student: &ModelHandle, seed: u64) -> Result<f64> {
        let cfg = GaConfig {
            md_samples: 8,
            seed: mix_seed(seed, 4),
            ..self.ga.clone()
        };
        let mut total = 0.0;
        for label in &self.held_out {
            let ind = Individual::new(vec![Entity::new(label.clone(), EntitySource::Initial)?], 0)?;
            total += misalignment_distance(teacher, student, &ind, &cfg)?;
        }
        Ok(total / self.held_out.len() as f64)
    }

    pub fn job(&self, run_dir: &Path, seed: u64, lambda: f64) -> RemovalJob {
        let steps = self
            .concepts
            .iter()
            .map(|c| RemovalStepConfig {
                concept: c.clone(),
                concept_prompts: self.concept_prompts(c),
                lambda,
                ..self.step.clone()
            })
            .collect();
        RemovalJob {
            ga: GaConfig {
                seed,
                ..self.ga.clone()
            },
            seed,
            ..RemovalJob::new(run_dir, steps)
        }
    }

    /// Full pipeline for one seed and lambda: teacher, classifiers, continuous
    /// removal of every concept, and the before/after measurements.
    pub fn run(&self, run_dir: &Path, seed: u64, lambda: f64, gateway: &LlmGateway) -> Result<ScenarioOutcome> {
        let mut teacher = self.teacher(seed);
        init_run(run_dir, &mut teacher)?;
        let h = sample_hierarchy();
        let classifiers: Vec<ConceptClassifier> = self
            .concepts
            .iter()
            .map(|c| self.train_classifier(&teacher, c, seed))
            .collect::<Result<_>>()?;
        let rr_before = classifiers
            .iter()
            .map(|c| self.removal_rate(&teacher, c, seed))
            .collect::<Result<Vec<_>>>()?;

        let results = run_continuous(&self.job(run_dir, seed, lambda), gateway, &h)?;
        let last = results.last().expect("job has at least one step");
        let student = crate::backend::load_checkpoint(run_dir, &last.checkpoint_id)?;
        let rr_after = classifiers
            .iter()
            .map(|c| self.removal_rate(&student, c, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScenarioOutcome {
            seed,
            lambda,
            classifier_accuracy: classifiers.iter().map(|c| c.test_accuracy).collect(),
            rr_before,
            rr_after,
            held_out_md: self.held_out_md(&teacher, &student, seed)?,
            final_hash: student.content_hash().to_string(),
            teacher_hash: teacher.content_hash().to_string(),
            removed: student.removed_concepts(),
        })
    }
}
