//! The `ccrt` command line: `calibrate`, `remove`, `eval` and `report`.
//!
//! Every command reads one TOML [`RunConfig`]; `--seed`, `--out` and
//! `--resume` override it. Exit codes: 0 success, 1 runtime fault,
//! 2 configuration or validation error.

pub mod config;
pub mod plot;
pub mod report;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backend::{load_checkpoint, read_manifest, CheckpointStatus, ModelHandle};
use crate::calibration::{write_calibration_file, GenerationStats};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_checkpoint, generate_images, train_concept_classifier, ClassifierConfig, ClassifierRegistry, EvalConfig,
    EvalResources, MetricSpec,
};
use crate::removal::{init_run, mine_calibration, run_continuous, step_checkpoint_id, RunLayout, StepResult};
use crate::text::{mix_seed, slug};

pub use config::{EvalConcept, LoadedConfig, RunConfig};
pub use report::{summarize, write_report, Summary, SummaryRow};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

const CLASSIFIER_SALT: u64 = 0x636c_7366;

#[derive(Debug, Parser)]
#[command(name = "ccrt", version, about = "Continuous concept removal toolkit")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, visible_alias = "job")]
    pub config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Warm up, run the genetic search and write step 1's calibration file.
    Calibrate,
    /// Run the continuous removal job.
    Remove {
        /// Continue an interrupted run from its last complete step.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate the teacher and every complete step checkpoint.
    Eval(EvalOverrides),
    /// Summarize a run directory into tables and plots.
    Report {
        /// Run directory; defaults to `--out` or the config's `out`.
        run_dir: Option<PathBuf>,
    },
}

/// Command-line replacements for `[eval]` config keys.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct EvalOverrides {
    /// Checkpoint id to evaluate (repeatable); replaces `eval.checkpoints`.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<String>,
    /// Newline-delimited prompt file for the concept chosen by `--concept`
    /// (or the only configured concept).
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Concept the `--prompts` file belongs to.
    #[arg(long, requires = "prompts")]
    pub concept: Option<String>,
    /// Comma-separated metric list, e.g. `rr-cls,rr-llm,align:mock`.
    #[arg(long)]
    pub metrics: Option<String>,
}

impl EvalOverrides {
    /// Applies the overrides to `cfg.eval`.
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if !self.checkpoints.is_empty() {
            cfg.eval.checkpoints = self.checkpoints.clone();
        }
        if let Some(m) = &self.metrics {
            cfg.eval.metrics = m.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        }
        let Some(file) = &self.prompts else { return Ok(()) };
        let concepts = &mut cfg.eval.concepts;
        let idx = match &self.concept {
            Some(name) => match concepts.iter().position(|c| &c.concept == name) {
                Some(i) => i,
                None => {
                    concepts.push(EvalConcept {
                        concept: name.clone(),
                        ..EvalConcept::default()
                    });
                    concepts.len() - 1
                }
            },
            None if concepts.len() == 1 => 0,
            None => {
                return Err(Error::config(
                    "eval.concepts",
                    "--prompts needs --concept unless exactly one concept is configured",
                ))
            }
        };
        concepts[idx].prompts.clear();
        concepts[idx].prompts_file = Some(file.clone());
        Ok(())
    }
}

/// Provenance record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// SHA-256 of the config file bytes.
    pub config_digest: Option<String>,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub started: String,
    pub finished: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn path(out: &Path, command: &str) -> PathBuf {
        out.join("manifests").join(format!("{command}.json"))
    }

    /// Atomic write (temp file plus rename).
    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = Self::path(out, &self.command);
        let dir = path.parent().expect("manifest path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Loads, overrides and validates the config named by `--config`.
pub fn load_config(path: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<LoadedConfig> {
    let path = path.ok_or_else(|| Error::config("config", "--config <file> is required"))?;
    let mut loaded = LoadedConfig::load(path)?;
    if let Some(s) = seed {
        loaded.config.seed = s;
    }
    if let Some(o) = out {
        loaded.config.out = Some(o.to_path_buf());
    }
    loaded.validate()?;
    loaded.config.out_dir()?;
    Ok(loaded)
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn finish(
    command: &str,
    loaded: &LoadedConfig,
    started: String,
    outcome: &Result<Vec<PathBuf>>,
) -> Result<()> {
    let out = loaded.config.out_dir()?;
    let manifest = RunManifest {
        command: command.into(),
        config_path: Some(loaded.path.clone()),
        config_digest: Some(loaded.digest()),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: Some(loaded.config.seed),
        started,
        finished: now(),
        status: if outcome.is_ok() { "ok" } else { "failed" }.into(),
        error: outcome.as_ref().err().map(ToString::to_string),
        artifacts: outcome.as_ref().cloned().unwrap_or_default(),
    };
    manifest.write(out)?;
    Ok(())
}

fn prepare_teacher(cfg: &RunConfig) -> Result<ModelHandle> {
    let mut teacher = cfg.teacher()?;
    init_run(cfg.out_dir()?, &mut teacher)?;
    Ok(teacher)
}

/// Warm-up plus genetic search for the first step, starting from the teacher.
/// Writes the same file `remove` would produce for step 1 and returns its path.
pub fn cmd_calibrate(loaded: &LoadedConfig) -> Result<PathBuf> {
    let started = now();
    let result = (|| {
        let cfg = &loaded.config;
        let out = cfg.out_dir()?;
        let teacher = prepare_teacher(cfg)?;
        let job = cfg.job(false)?;
        let h = cfg.hierarchy()?;
        let gateway = cfg.gateway()?;
        let entities = job.initial_entities(&h)?;
        let step = job.effective_step(1);
        let init = teacher.clone_trainable();
        let (set, outcome) = mine_calibration(&init, &teacher, &step, true, &job.step_ga(1), &entities, &h, &gateway)?;
        let layout = RunLayout::new(out);
        let id = step_checkpoint_id(1, &step.concept);
        let path = layout.calibration_file(&id);
        write_calibration_file(&path, &set)?;
        let history = layout.calibration().join(format!("{id}.ga.json"));
        write_history(&history, &outcome.history)?;
        println!("wrote {} calibration prompts to {}", set.len(), path.display());
        Ok(vec![path, history])
    })();
    finish("calibrate", loaded, started, &result)?;
    result.map(|mut v| v.remove(0))
}

fn write_history(path: &Path, history: &[GenerationStats]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(history)? + "\n").map_err(|e| Error::io(path, e))
}

/// Per-step summary table printed by `remove`.
pub fn step_table(results: &[StepResult]) -> String {
    let mut out = String::from("| step | concept | checkpoint | iters | L_rm | L_reg | hash | time (s) |\n|---|---|---|---|---|---|---|---|\n");
    for r in results {
        let col = |f: fn(&crate::removal::IterationLoss) -> f64| {
            report::tail_mean(&r.losses.iter().map(f).collect::<Vec<_>>())
                .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
        };
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {:.1} |\n",
            r.step,
            r.concept,
            r.checkpoint_id,
            r.losses.len(),
            col(|l| l.loss_rm),
            col(|l| l.loss_reg),
            &r.content_hash[..12.min(r.content_hash.len())],
            r.wall_time_s
        ));
    }
    out
}

/// Runs the continuous removal job.
pub fn cmd_remove(loaded: &LoadedConfig, resume: bool, stop_after: Option<usize>) -> Result<Vec<StepResult>> {
    let started = now();
    let mut results = Vec::new();
    let outcome = (|| {
        let cfg = &loaded.config;
        prepare_teacher(cfg)?;
        let mut job = cfg.job(resume)?;
        if stop_after.is_some() {
            job.stop_after = stop_after;
        }
        let h = cfg.hierarchy()?;
        let gateway = cfg.gateway()?;
        results = run_continuous(&job, &gateway, &h)?;
        print!("{}", step_table(&results));
        let layout = RunLayout::new(cfg.out_dir()?);
        Ok(results
            .iter()
            .flat_map(|r| {
                [
                    crate::backend::checkpoint_dir(&layout.root, &r.checkpoint_id),
                    layout.log_file(&r.checkpoint_id),
                    layout.calibration_file(&r.checkpoint_id),
                ]
            })
            .collect())
    })();
    finish("remove", loaded, started, &outcome)?;
    outcome.map(|_| results)
}

fn teacher_of_run(out: &Path) -> Result<ModelHandle> {
    load_checkpoint(out, "teacher").map_err(|e| match e {
        Error::NotFound(m) => Error::config("out", format!("no teacher checkpoint in the run directory ({m})")),
        other => other,
    })
}

/// Checkpoints `eval` visits: the configured list, or the teacher plus every
/// complete step of the job.
pub fn eval_checkpoints(cfg: &RunConfig) -> Result<Vec<String>> {
    if !cfg.eval.checkpoints.is_empty() {
        return Ok(cfg.eval.checkpoints.clone());
    }
    let out = cfg.out_dir()?;
    let mut ids = vec!["teacher".to_string()];
    for (i, s) in cfg.steps.iter().enumerate() {
        let id = step_checkpoint_id(i + 1, &s.concept);
        if matches!(read_manifest(out, &id), Ok(m) if m.status == CheckpointStatus::Complete) {
            ids.push(id);
        }
    }
    Ok(ids)
}

/// Evaluates each checkpoint on each configured concept and writes
/// `reports/<checkpoint>/<concept>.json`.
pub fn cmd_eval(loaded: &LoadedConfig) -> Result<Vec<PathBuf>> {
    let started = now();
    let outcome = (|| {
        let cfg = &loaded.config;
        let out = cfg.out_dir()?;
        if cfg.eval.concepts.is_empty() {
            return Err(Error::config("eval.concepts", "nothing to evaluate: add [[eval.concepts]] entries"));
        }
        let teacher = teacher_of_run(out)?;
        let metrics = cfg.metric_specs()?;
        let needs_cls = metrics.contains(&MetricSpec::RrCls);
        let gateway = if metrics.contains(&MetricSpec::RrLlm) {
            Some(cfg.gateway()?)
        } else {
            None
        };
        let layout = RunLayout::new(out);
        let mut registry = ClassifierRegistry::new(out.join("classifiers"));
        let mut written = Vec::new();
        for (ci, c) in cfg.eval.concepts.iter().enumerate() {
            let prompts = c.prompt_list()?;
            if needs_cls && c.absent_prompts.is_empty() {
                return Err(Error::config(
                    format!("eval.concepts[{ci}].absent_prompts"),
                    "rr-cls needs prompts without the concept to train its classifier",
                ));
            }
            let classifier = if needs_cls {
                let seed = mix_seed(cfg.seed, CLASSIFIER_SALT);
                let n = cfg.eval.classifier_images.max(1);
                Some(
                    registry
                        .get_or_train(&c.concept, || {
                            let present = collect_images(&teacher, &prompts, n, mix_seed(seed, 1))?;
                            let absent = collect_images(&teacher, &c.absent_prompts, n, mix_seed(seed, 2))?;
                            let ccfg = ClassifierConfig {
                                seed,
                                ..ClassifierConfig::default()
                            };
                            train_concept_classifier(&c.concept, &present, &absent, teacher.latent_shape(), &ccfg)
                        })?
                        .clone(),
                )
            } else {
                None
            };
            for id in eval_checkpoints(cfg)? {
                let model = load_checkpoint(out, &id)?;
                let ecfg = EvalConfig {
                    metrics: metrics.clone(),
                    concept: c.concept.clone(),
                    references: c.references.clone(),
                    images_per_prompt: cfg.eval.images_per_prompt,
                    seed: cfg.seed,
                };
                let res = EvalResources {
                    classifier: classifier.as_ref().map(|c| c as _),
                    gateway: gateway.as_ref(),
                };
                let dir = layout.reports().join(&id);
                let report = evaluate_checkpoint(&model, &prompts, &ecfg, &res, &dir.join(slug(&c.concept)))?;
                let path = dir.join(format!("{}.json", slug(&c.concept)));
                report.write(&path)?;
                let values: Vec<String> = report.metrics.iter().map(|m| format!("{}={:.4}", m.name, m.value)).collect();
                println!("{id} / {}: {}", c.concept, values.join(" "));
                written.push(path);
            }
        }
        Ok(written)
    })();
    finish("eval", loaded, started, &outcome)?;
    outcome
}

fn collect_images(model: &ModelHandle, prompts: &[String], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    generate_images(model, prompts, n, seed).into_iter().collect()
}

/// Writes the run summary and plots; prints the table.
pub fn cmd_report(run_dir: &Path) -> Result<(Summary, Vec<PathBuf>)> {
    if !run_dir.is_dir() {
        return Err(Error::config("out", format!("{} is not a directory", run_dir.display())));
    }
    let (summary, files) = write_report(run_dir)?;
    print!("{}", summary.to_markdown());
    Ok((summary, files))
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let load = || load_config(cli.config.as_deref(), cli.seed, cli.out.as_deref());
    match &cli.command {
        Command::Calibrate => cmd_calibrate(&load()?).map(drop),
        Command::Remove { resume, stop_after } => {
            if *stop_after == Some(0) {
                return Err(Error::config("stop_after", "must be at least 1"));
            }
            cmd_remove(&load()?, *resume, *stop_after).map(drop)
        }
        Command::Eval(overrides) => {
            let mut loaded = load()?;
            overrides.apply(&mut loaded.config)?;
            loaded.validate()?;
            cmd_eval(&loaded).map(drop)
        }
        Command::Report { run_dir } => {
            let dir = match (run_dir, &cli.out, &cli.config) {
                (Some(d), _, _) => d.clone(),
                (None, Some(o), _) => o.clone(),
                (None, None, Some(_)) => load()?.config.out_dir()?.to_path_buf(),
                (None, None, None) => return Err(Error::config("out", "give a run directory, --out or --config")),
            };
            cmd_report(&dir).map(drop)
        }
    }
}
