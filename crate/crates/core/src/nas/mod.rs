//! Genetic architecture search under hard latency, memory and CO₂ budgets.

mod space;

use std::collections::HashMap;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::greenmeter::{co2_from_energy, estimate_energy, DEFAULT_CARBON_INTENSITY, DEFAULT_DEVICE_POWER_W};
use crate::model::{build_model, count_parameters, estimate_memory, total_flops, ArchConfig, ModelState, Precision, TokenBatch};
use crate::numcore::Scalar;
use crate::rng::derive_seed;
use crate::synthdata::Dataset;
use crate::trainer::{evaluate, train, AdamWConfig, LossSpec, SoftTargets, TrainOptions, DEFAULT_BATCH_SIZE, DEFAULT_PROXY_STEPS};

pub use space::{
    sample_genome, Component, Genome, SearchSpace, FFD_LADDER, HEAD_DIM_LADDER, HEAD_LADDER, LAYER_LADDER,
};

pub const DEFAULT_POPULATION: usize = 12;
pub const DEFAULT_GENERATIONS: usize = 8;
pub const DEFAULT_CROSSOVER_RATE: f64 = 0.7;
pub const DEFAULT_MUTATION_RATE: f64 = 0.1;
pub const ELITES: usize = 2;
pub const PARENT_POOL: usize = 4;
/// Sustained host throughput assumed by the analytic latency proxy.
pub const DEFAULT_HOST_GFLOPS: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_latency_ms: f64,
    pub max_memory_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_gco2_per_sample: Option<f64>,
}

impl Budget {
    pub fn unlimited() -> Self {
        Self { max_latency_ms: f64::INFINITY, max_memory_bytes: u64::MAX, max_gco2_per_sample: None }
    }

    pub fn validate(&self) -> Result<()> {
        let co2_ok = self.max_gco2_per_sample.is_none_or(|c| c > 0.0);
        if !(self.max_latency_ms > 0.0) || self.max_memory_bytes == 0 || !co2_ok {
            return Err(Error::InvalidConfig(format!("budget limits must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    Latency,
    Memory,
    Co2,
}

impl std::fmt::Display for Constraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Constraint::Latency => "latency",
            Constraint::Memory => "memory",
            Constraint::Co2 => "co2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LatencyMode {
    /// FLOPs divided by a fixed host throughput.
    Analytic { host_gflops: f64 },
    /// Median wall-clock of a few forwards of a randomly initialized model.
    Measured { reps: usize },
}

/// Workload shape and accounting constants that feasibility is judged on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityContext {
    pub seq_len: usize,
    pub batch: usize,
    pub precision: Precision,
    pub latency: LatencyMode,
    pub device_power_w: f64,
    pub carbon_intensity_g_per_kwh: f64,
}

impl FeasibilityContext {
    pub fn new(seq_len: usize, batch: usize) -> Self {
        Self {
            seq_len,
            batch,
            precision: Precision::Real,
            latency: LatencyMode::Analytic { host_gflops: DEFAULT_HOST_GFLOPS },
            device_power_w: DEFAULT_DEVICE_POWER_W,
            carbon_intensity_g_per_kwh: DEFAULT_CARBON_INTENSITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub feasible: bool,
    pub reasons: Vec<Constraint>,
    /// Per batch of `ctx.batch` sequences.
    pub latency_ms: f64,
    pub memory_bytes: u64,
    pub gco2_per_sample: f64,
}

fn measured_latency_ms(config: &ArchConfig, ctx: &FeasibilityContext, reps: usize) -> Result<f64> {
    let mut model: ModelState<f32> = build_model(config, 0)?;
    model.set_fake_quant(ctx.precision == Precision::Int8Weights);
    let ids: Vec<usize> = (0..ctx.batch * ctx.seq_len).map(|i| 1 + i % (config.vocab_size - 1)).collect();
    let batch = TokenBatch::new(ids, ctx.batch, ctx.seq_len)?;
    model.forward(&batch, false)?;
    let mut samples = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        std::hint::black_box(model.forward(&batch, false)?);
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    crate::greenmeter::percentile(&samples, 50.0)
}

/// Latency proxy for one batch of `ctx.batch` sequences.
pub fn latency_estimate_ms(config: &ArchConfig, ctx: &FeasibilityContext) -> Result<f64> {
    match ctx.latency {
        LatencyMode::Analytic { host_gflops } => {
            Ok(total_flops(config, ctx.seq_len) * ctx.batch as f64 / (host_gflops * 1e9) * 1e3)
        }
        LatencyMode::Measured { reps } => measured_latency_ms(config, ctx, reps),
    }
}

/// Judges `genome` (on `base`'s task head) against every budget limit.
/// Infeasibility is a value, never an error; the error path covers only a
/// failed measured forward.
pub fn check_feasibility(genome: &Genome, base: &ArchConfig, budget: &Budget, ctx: &FeasibilityContext) -> Result<Feasibility> {
    let config = genome.apply(base);
    let memory_bytes = estimate_memory(&config, ctx.batch, ctx.seq_len, ctx.precision);
    let latency_ms = latency_estimate_ms(&config, ctx)?;
    let energy = estimate_energy(latency_ms / 1e3, ctx.device_power_w);
    let gco2_per_sample = co2_from_energy(energy, ctx.carbon_intensity_g_per_kwh) / ctx.batch.max(1) as f64;
    let mut reasons = Vec::new();
    if latency_ms > budget.max_latency_ms {
        reasons.push(Constraint::Latency);
    }
    if memory_bytes > budget.max_memory_bytes {
        reasons.push(Constraint::Memory);
    }
    if budget.max_gco2_per_sample.is_some_and(|c| gco2_per_sample > c) {
        reasons.push(Constraint::Co2);
    }
    Ok(Feasibility { feasible: reasons.is_empty(), reasons, latency_ms, memory_bytes, gco2_per_sample })
}

/// How candidates are trained before scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxySettings {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    /// Train and score through quantize∘dequantize weights.
    pub fake_quant: bool,
    pub loss: LossSpec,
}

impl Default for ProxySettings {
    fn default() -> Self {
        Self {
            steps: DEFAULT_PROXY_STEPS,
            batch_size: DEFAULT_BATCH_SIZE,
            optim: AdamWConfig::default(),
            fake_quant: false,
            loss: LossSpec::HardLabel,
        }
    }
}

/// Train and validation splits plus optional teacher targets for the train split.
#[derive(Debug, Clone, Copy)]
pub struct ProxyData<'a, S> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub targets: Option<&'a SoftTargets<S>>,
}

/// Builds `config` from `seed`, proxy-trains it and returns the model with
/// its validation metrics.
pub fn proxy_train<S: Scalar>(
    config: &ArchConfig,
    data: ProxyData<'_, S>,
    settings: &ProxySettings,
    seed: u64,
) -> Result<(ModelState<S>, crate::trainer::EvalMetrics)> {
    let mut model = build_model::<S>(config, seed)?;
    model.set_fake_quant(settings.fake_quant);
    let opts = TrainOptions { batch_size: settings.batch_size, optim: settings.optim, ..TrainOptions::new(settings.steps, seed) };
    train(&mut model, data.train, &settings.loss, data.targets, &opts)?;
    let metrics = evaluate(&model, data.val)?;
    Ok((model, metrics))
}

/// Validation loss after proxy training. Divergence scores `+∞`.
pub fn evaluate_fitness<S: Scalar>(
    genome: &Genome,
    base: &ArchConfig,
    data: ProxyData<'_, S>,
    settings: &ProxySettings,
    seed: u64,
) -> Result<f64> {
    match proxy_train(&genome.apply(base), data, settings, seed) {
        Ok((_, m)) if m.mean_loss.is_finite() => Ok(m.mean_loss),
        Ok(_) | Err(Error::NonFinite(_)) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub genome: Genome,
    pub fitness: f64,
    pub parameters: usize,
}

/// Lower fitness first, then fewer parameters, then lexicographic genome.
pub fn rank(scored: &mut [Scored]) {
    scored.sort_by(|a, b| {
        a.fitness.total_cmp(&b.fitness).then(a.parameters.cmp(&b.parameters)).then(a.genome.cmp(&b.genome))
    });
}

/// Next generation from ranked, feasible candidates: the best two carried
/// verbatim, the rest bred from the top four.
pub fn evolve(
    ranked: &[Scored],
    population_size: usize,
    space: &SearchSpace,
    crossover_rate: f64,
    mutation_rate: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Genome>> {
    if population_size < PARENT_POOL {
        return Err(Error::InvalidConfig(format!("population {population_size} is smaller than {PARENT_POOL}")));
    }
    if !(0.0..=1.0).contains(&crossover_rate) || !(0.0..=1.0).contains(&mutation_rate) {
        return Err(Error::InvalidConfig("crossover and mutation rates must be in [0, 1]".into()));
    }
    if ranked.is_empty() {
        return Ok((0..population_size).map(|_| sample_genome(space, rng)).collect());
    }
    let mut next: Vec<Genome> = ranked.iter().take(ELITES).map(|s| s.genome).collect();
    let pool = &ranked[..ranked.len().min(PARENT_POOL)];
    while next.len() < population_size {
        let a = pool[rng.random_range(0..pool.len())].genome;
        let b = pool[rng.random_range(0..pool.len())].genome;
        let mut child = if rng.random_bool(crossover_rate) {
            Component::ALL.iter().fold(a, |g, &c| if rng.random_bool(0.5) { g.with(c, b.get(c)) } else { g })
        } else {
            a
        };
        for c in Component::ALL {
            if rng.random_bool(mutation_rate) {
                child = child.with(c, space.sample_field(c, rng));
            }
        }
        next.push(child);
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NasSettings {
    pub population_size: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub proxy: ProxySettings,
    pub context: FeasibilityContext,
}

impl NasSettings {
    pub fn new(context: FeasibilityContext) -> Self {
        Self {
            population_size: DEFAULT_POPULATION,
            generations: DEFAULT_GENERATIONS,
            crossover_rate: DEFAULT_CROSSOVER_RATE,
            mutation_rate: DEFAULT_MUTATION_RATE,
            proxy: ProxySettings::default(),
            context,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub slot: usize,
    pub genome: Genome,
    pub parameters: usize,
    pub feasibility: Feasibility,
    /// Absent for infeasible genomes, which are never trained.
    pub fitness: Option<f64>,
    /// Position in this generation's ranking.
    pub rank: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub generation: usize,
    pub feasible_fraction: f64,
    pub best_fitness: Option<f64>,
    pub mean_fitness: Option<f64>,
    pub best_ever_fitness: Option<f64>,
    pub best_ever: Option<Genome>,
    pub entries: Vec<AuditEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchLog {
    pub budget: Budget,
    pub master_seed: u64,
    pub generations: Vec<GenerationLog>,
    /// Distinct genomes actually trained.
    pub trained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NasOutcome {
    pub genome: Genome,
    pub config: ArchConfig,
    pub fitness: f64,
    /// Seed the winner was built and proxy-trained with.
    pub seed: u64,
    pub log: SearchLog,
}

fn binding_constraint(log: &SearchLog) -> String {
    let mut counts: HashMap<Constraint, usize> = HashMap::new();
    for e in log.generations.iter().flat_map(|g| &g.entries) {
        for &r in &e.feasibility.reasons {
            *counts.entry(r).or_default() += 1;
        }
    }
    let mut v: Vec<(Constraint, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    match v.first() {
        Some((c, _)) => c.to_string(),
        None => "none".into(),
    }
}

/// Evolves a population for a fixed number of generations and returns the
/// best feasible genome ever scored.
///
/// Each distinct genome is trained once; its seed derives from the master
/// seed and the (generation, slot) where it first appeared, so reruns with
/// one master seed reproduce the whole search.
pub fn run_nas<S: Scalar>(
    space: &SearchSpace,
    budget: &Budget,
    base: &ArchConfig,
    data: ProxyData<'_, S>,
    settings: &NasSettings,
    seed: u64,
) -> Result<NasOutcome> {
    space.validate()?;
    budget.validate()?;
    if settings.population_size < PARENT_POOL {
        return Err(Error::InvalidConfig(format!("population {} is smaller than {PARENT_POOL}", settings.population_size)));
    }
    if !(0.0..=1.0).contains(&settings.crossover_rate) || !(0.0..=1.0).contains(&settings.mutation_rate) {
        return Err(Error::InvalidConfig("crossover and mutation rates must be in [0, 1]".into()));
    }
    if settings.generations == 0 {
        return Err(Error::InvalidConfig("generations must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX]));
    let mut population: Vec<Genome> = (0..settings.population_size).map(|_| sample_genome(space, &mut rng)).collect();
    let mut cache: HashMap<Genome, (f64, u64)> = HashMap::new();
    let mut feas_cache: HashMap<Genome, Feasibility> = HashMap::new();
    let mut log = SearchLog { budget: *budget, master_seed: seed, generations: Vec::new(), trained: 0 };
    let mut best: Option<(Scored, u64)> = None;

    for generation in 0..settings.generations {
        let mut entries = Vec::with_capacity(population.len());
        let mut scored = Vec::new();
        for (slot, genome) in population.iter().enumerate() {
            let feasibility = match feas_cache.get(genome) {
                Some(f) => f.clone(),
                None => {
                    let f = check_feasibility(genome, base, budget, &settings.context)?;
                    feas_cache.insert(*genome, f.clone());
                    f
                }
            };
            let parameters = count_parameters(&genome.apply(base));
            let (fitness, cand_seed) = if feasibility.feasible {
                let (f, s) = match cache.get(genome) {
                    Some(&v) => v,
                    None => {
                        let s = derive_seed(seed, &[generation as u64, slot as u64]);
                        let f = evaluate_fitness(genome, base, data, &settings.proxy, s)?;
                        cache.insert(*genome, (f, s));
                        log.trained += 1;
                        (f, s)
                    }
                };
                scored.push(Scored { genome: *genome, fitness: f, parameters });
                (Some(f), Some(s))
            } else {
                (None, None)
            };
            entries.push(AuditEntry { slot, genome: *genome, parameters, feasibility, fitness, rank: None, seed: cand_seed });
        }

        rank(&mut scored);
        // duplicates share a rank position by first occurrence
        for e in entries.iter_mut().filter(|e| e.fitness.is_some()) {
            e.rank = scored.iter().position(|s| s.genome == e.genome);
        }
        if let Some(top) = scored.first() {
            let better = best.as_ref().is_none_or(|(b, _)| {
                let mut pair = [*top, *b];
                rank(&mut pair);
                pair[0] == *top && pair[0] != *b
            });
            if better {
                best = Some((*top, cache[&top.genome].1));
            }
        }
        let finite: Vec<f64> = scored.iter().map(|s| s.fitness).filter(|f| f.is_finite()).collect();
        log.generations.push(GenerationLog {
            generation,
            feasible_fraction: scored.len() as f64 / population.len() as f64,
            best_fitness: scored.first().map(|s| s.fitness),
            mean_fitness: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
            best_ever_fitness: best.as_ref().map(|(b, _)| b.fitness),
            best_ever: best.as_ref().map(|(b, _)| b.genome),
            entries,
        });

        if generation + 1 < settings.generations {
            let mut distinct: Vec<Scored> = Vec::with_capacity(scored.len());
            for s in scored {
                if !distinct.iter().any(|d| d.genome == s.genome) {
                    distinct.push(s);
                }
            }
            population = evolve(
                &distinct,
                settings.population_size,
                space,
                settings.crossover_rate,
                settings.mutation_rate,
                &mut rng,
            )?;
        }
    }

    match best {
        Some((b, s)) => Ok(NasOutcome { genome: b.genome, config: b.genome.apply(base), fitness: b.fitness, seed: s, log }),
        None => Err(Error::BudgetInfeasible { binding: binding_constraint(&log) }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ArchConfig {
        ArchConfig::encoder_classifier(6, 12, 16, 768, 32, 32, 2)
    }

    #[test]
    fn unlimited_budget_always_feasible() {
        let ctx = FeasibilityContext::new(20, 32);
        let f = check_feasibility(&Genome::new(12, 12, 128, 3072), &base(), &Budget::unlimited(), &ctx).unwrap();
        assert!(f.feasible && f.reasons.is_empty());
    }

    #[test]
    fn tiny_memory_budget_names_memory() {
        let ctx = FeasibilityContext::new(20, 32);
        let budget = Budget { max_memory_bytes: 10, ..Budget::unlimited() };
        let f = check_feasibility(&Genome::new(2, 2, 2, 4), &base(), &budget, &ctx).unwrap();
        assert_eq!(f.reasons, vec![Constraint::Memory]);
    }

    #[test]
    fn ten_layer_hidden_32_genome_representable() {
        let g = Genome::new(10, 8, 4, 96);
        assert_eq!(g.hidden_dim(), 32);
        assert!(g.apply(&base()).validate().is_ok());
    }

    #[test]
    fn evolve_without_variation_copies_parents() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ranked: Vec<Scored> = (0..6)
            .map(|i| Scored { genome: Genome::new(2 + i, 2, 4, 8), fitness: i as f64, parameters: 0 })
            .collect();
        let next = evolve(&ranked, 10, &space, 0.0, 0.0, &mut rng).unwrap();
        assert_eq!(next.len(), 10);
        assert_eq!(&next[..2], &[ranked[0].genome, ranked[1].genome]);
        assert!(next.iter().all(|g| ranked[..4].iter().any(|s| s.genome == *g)));
        assert!(evolve(&ranked, 3, &space, 0.7, 0.1, &mut rng).is_err());
    }

    #[test]
    fn ranking_tie_breaks() {
        let mut v = vec![
            Scored { genome: Genome::new(3, 2, 2, 4), fitness: 1.0, parameters: 50 },
            Scored { genome: Genome::new(2, 4, 2, 4), fitness: 1.0, parameters: 50 },
            Scored { genome: Genome::new(9, 2, 2, 4), fitness: 1.0, parameters: 10 },
            Scored { genome: Genome::new(9, 9, 9, 9), fitness: 0.5, parameters: 99 },
        ];
        rank(&mut v);
        let order: Vec<usize> = v.iter().map(|s| s.genome.num_layers).collect();
        assert_eq!(order, vec![9, 9, 2, 3]);
    }
}
