//! Genetic search for hard entity combinations: elitist top-k selection,
//! hierarchy-aware crossover, and LLM-backed mutation plus fuzzing.

use std::collections::{HashMap, HashSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{Fitness, GaConfig, Individual};
use crate::error::{Error, Result};
use crate::hierarchy::{Entity, EntitySource, Hierarchy, ParentMode};
use crate::llm::LlmGateway;

/// Memoised fitness values keyed by label list.
#[derive(Debug, Default)]
pub struct MdCache {
    values: HashMap<String, f64>,
    evaluations: usize,
}

impl MdCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of fitness evaluations actually performed (cache misses).
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    /// Fills in `md` for every individual, evaluating unseen label lists in parallel.
    pub fn evaluate_all(&mut self, population: &mut [Individual], fitness: &dyn Fitness) -> Result<()> {
        let mut pending: Vec<(String, &Individual)> = Vec::new();
        let mut queued = HashSet::new();
        for ind in population.iter() {
            let key = ind.key();
            if ind.md.is_none() && !self.values.contains_key(&key) && queued.insert(key.clone()) {
                pending.push((key, ind));
            }
        }
        let fresh: Vec<(String, f64)> = pending
            .par_iter()
            .map(|(key, ind)| fitness.evaluate(ind).map(|md| (key.clone(), md)))
            .collect::<Result<_>>()?;
        self.evaluations += fresh.len();
        for (key, md) in fresh {
            if !(md.is_finite() && md >= 0.0) {
                return Err(Error::Backend(format!("fitness of {key:?} is {md}, expected a finite value >= 0")));
            }
            self.values.insert(key, md);
        }
        for ind in population.iter_mut() {
            if ind.md.is_none() {
                ind.md = Some(self.values[&ind.key()]);
            }
        }
        Ok(())
    }
}

/// The `k` individuals with the highest md, evaluating any that lack one.
///
/// Ties break by the lexicographic label list, then by input order. A
/// population no larger than `k` is returned whole, sorted.
pub fn rank_and_select(
    mut population: Vec<Individual>,
    k: usize,
    fitness: &dyn Fitness,
    cache: &mut MdCache,
) -> Result<Vec<Individual>> {
    if k == 0 {
        return Err(Error::config("k", "must be at least 1"));
    }
    cache.evaluate_all(&mut population, fitness)?;
    population.sort_by(|a, b| {
        let (ma, mb) = (a.md.unwrap_or(0.0), b.md.unwrap_or(0.0));
        mb.total_cmp(&ma).then_with(|| a.labels().cmp(&b.labels()))
    });
    if population.len() < k {
        log::debug!("population of {} is smaller than k={k}; keeping all", population.len());
    }
    population.truncate(k);
    Ok(population)
}

fn attach(h: &Hierarchy, e: &Entity) -> Entity {
    match (e.node(), h.node_of(e.label())) {
        (None, Some(node)) => Entity::at_node(h, node, e.source()),
        _ => e.clone(),
    }
}

/// Hierarchy-aware crossover.
///
/// Rule 1: an entity of `a` and an entity of `b` that share a parent (per
/// `mode`) are replaced by that parent; each entity takes part in at most one
/// such merge, and labels present in both parents never merge. Rule 2: all
/// other entities are kept, `a`'s first, duplicates dropped.
pub fn crossover(a: &Individual, b: &Individual, h: &Hierarchy, mode: ParentMode) -> Individual {
    let a_labels: HashSet<&str> = a.entities.iter().map(Entity::label).collect();
    let b_labels: HashSet<&str> = b.entities.iter().map(Entity::label).collect();
    let b_resolved: Vec<Entity> = b.entities.iter().map(|e| attach(h, e)).collect();
    let mut b_used = vec![false; b.entities.len()];
    let mut out: Vec<Entity> = Vec::new();

    for ea in &a.entities {
        let ra = attach(h, ea);
        let mut merged = None;
        if !b_labels.contains(ea.label()) {
            for (j, eb) in b_resolved.iter().enumerate() {
                if b_used[j] || a_labels.contains(eb.label()) {
                    continue;
                }
                if let Some(p) = h.common_parent(&ra, eb, mode) {
                    b_used[j] = true;
                    merged = Some(Entity::at_node(h, p, EntitySource::Crossover));
                    break;
                }
            }
        }
        out.push(merged.unwrap_or_else(|| ea.clone()));
    }
    out.extend(
        b.entities
            .iter()
            .zip(&b_used)
            .filter(|(_, used)| !**used)
            .map(|(e, _)| e.clone()),
    );
    let generation = a.generation.max(b.generation) + 1;
    Individual::dedup(out, generation)
}

/// Mutation (each entity swapped for a synonym with probability
/// `mutation_rate`) followed by fuzzing (`fuzz_count` fresh single-entity
/// individuals). Gateway failures leave the affected stage as a no-op.
pub fn mutation_fuzzing(
    child: &Individual,
    gateway: &LlmGateway,
    cfg: &GaConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Individual> {
    let mut entities = Vec::with_capacity(child.entities.len());
    for e in &child.entities {
        let roll: f64 = rng.random();
        if roll < cfg.mutation_rate {
            match gateway.synonym_replace(e) {
                Ok(s) => entities.push(s),
                Err(err) => {
                    log::warn!("mutation of {:?} skipped: {err}", e.label());
                    entities.push(e.clone());
                }
            }
        } else {
            entities.push(e.clone());
        }
    }
    let mut out = vec![Individual::dedup(entities, child.generation)];
    if cfg.fuzz_count > 0 {
        match gateway.fuzz_expand(&child.entities, cfg.fuzz_count) {
            Ok(fresh) => out.extend(fresh.into_iter().map(|e| Individual::dedup(vec![e], 0))),
            Err(err) => log::warn!("fuzzing skipped: {err}"),
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub size: usize,
    pub min_md: f64,
    pub max_md: f64,
    pub offspring: usize,
}

impl GenerationStats {
    fn of(generation: usize, population: &[Individual], offspring: usize) -> Self {
        let mds = population.iter().filter_map(|i| i.md);
        Self {
            generation,
            size: population.len(),
            min_md: mds.clone().fold(f64::INFINITY, f64::min),
            max_md: mds.fold(f64::NEG_INFINITY, f64::max),
            offspring,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaOutcome {
    /// Final top-k, md-sorted.
    pub population: Vec<Individual>,
    /// Entry 0 is the seeded population; entry `g` follows generation `g`.
    pub history: Vec<GenerationStats>,
    pub evaluations: usize,
}

/// Genetic algorithm with fuzzing.
///
/// Seeds one single-entity individual per initial label, keeps the top-k by
/// fitness, then for `cfg.generations` rounds breeds `cfg.parents` randomly
/// chosen parents pairwise and re-selects the top-k from parents and offspring.
pub fn run_ga(
    initial: &[Entity],
    fitness: &dyn Fitness,
    h: &Hierarchy,
    gateway: &LlmGateway,
    cfg: &GaConfig,
) -> Result<GaOutcome> {
    cfg.validate()?;
    if initial.is_empty() {
        return Err(Error::Input("genetic search needs at least one initial entity".into()));
    }
    let mut seen = HashSet::new();
    let seeded: Vec<Individual> = initial
        .iter()
        .filter(|e| seen.insert(e.label().to_string()))
        .map(|e| Individual::dedup(vec![e.clone()], 0))
        .collect();

    let mut cache = MdCache::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut population = rank_and_select(seeded, cfg.k, fitness, &mut cache)?;
    let mut history = vec![GenerationStats::of(0, &population, 0)];

    for g in 1..=cfg.generations {
        let parents = select_parents(&population, cfg.parents, &mut rng);
        let mut offspring = Vec::new();
        for pair in parents.chunks_exact(2) {
            let child = crossover(&population[pair[0]], &population[pair[1]], h, cfg.parent_mode);
            offspring.extend(mutation_fuzzing(&child, gateway, cfg, &mut rng));
        }
        let bred = offspring.len();
        let mut keys: HashSet<String> = population.iter().map(Individual::key).collect();
        let mut pool = population;
        pool.extend(offspring.into_iter().filter(|o| keys.insert(o.key())));
        population = rank_and_select(pool, cfg.k, fitness, &mut cache)?;
        let stats = GenerationStats::of(g, &population, bred);
        log::debug!(
            "generation {g}: {} offspring, md range [{:.4}, {:.4}]",
            bred,
            stats.min_md,
            stats.max_md
        );
        history.push(stats);
    }
    Ok(GaOutcome {
        population,
        history,
        evaluations: cache.evaluations(),
    })
}

/// Indices of `m` parents: without replacement when the population allows,
/// otherwise with replacement.
fn select_parents(population: &[Individual], m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = population.len();
    if n >= m {
        index::sample(rng, n, m).into_vec()
    } else {
        (0..m).map(|_| rng.random_range(0..n)).collect()
    }
}
