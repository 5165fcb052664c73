//! End-to-end compression runs, ablations and teacher/student comparison.

mod config;
mod report;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compressor::{quantize_aware_init, quantize_model, structured_prune, PruneLog, PruneSettings};
use crate::distiller::distill_with_targets;
use crate::error::{Error, Result};
use crate::greenmeter::{measure_inference, GreenReport};
use crate::model::{count_parameters, estimate_memory, total_flops, ArchConfig, ModelState, Precision};
use crate::nas::{
    proxy_train, run_nas, Budget, FeasibilityContext, Genome, LatencyMode, NasSettings, ProxyData, ProxySettings,
    SearchLog, SearchSpace,
};
use crate::rng::derive_seed;
use crate::synthdata::{generate_clone_dataset, generate_lm_dataset, split, Dataset};
use crate::trainer::{evaluate, train, EvalMetrics, LossHistory, LossSpec, SoftTargets};

pub use config::{PipelineConfig, Task};
pub use report::{
    compare_summaries, extra_vs_student_pct, render_table, ComparisonRow, ComparisonTable, ComponentReport,
    ComponentRow, OrderingRow, OrderingTable,
};

/// Compute precision of every pipeline model.
pub type Real = f32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StageId {
    Nas,
    Prune,
    Quant,
    Kd,
}

impl std::fmt::Display for StageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StageId::Nas => "NAS",
            StageId::Prune => "PRUNE",
            StageId::Quant => "QUANT",
            StageId::Kd => "KD",
        })
    }
}

impl std::str::FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NAS" => Ok(StageId::Nas),
            "PRUNE" => Ok(StageId::Prune),
            "QUANT" => Ok(StageId::Quant),
            "KD" => Ok(StageId::Kd),
            other => Err(Error::Validation(format!("unknown stage {other:?}"))),
        }
    }
}

/// Three compression stages in some order, then distillation.
pub fn validate_ordering(ordering: &[StageId]) -> Result<()> {
    let compress = [StageId::Nas, StageId::Prune, StageId::Quant];
    let ok = ordering.len() == 4
        && ordering[3] == StageId::Kd
        && compress.iter().all(|s| ordering[..3].contains(s));
    if !ok {
        let shown: Vec<String> = ordering.iter().map(ToString::to_string).collect();
        return Err(Error::Validation(format!(
            "ordering [{}] must be a permutation of NAS, PRUNE, QUANT followed by KD",
            shown.join(", ")
        )));
    }
    Ok(())
}

/// Parses `"nas,prune,quant,kd"`; a missing trailing KD is appended.
pub fn parse_ordering(s: &str) -> Result<Vec<StageId>> {
    let mut v = s.split([',', '>', ' ']).filter(|t| !t.trim().is_empty()).map(str::parse).collect::<Result<Vec<StageId>>>()?;
    if v.len() == 3 && !v.contains(&StageId::Kd) {
        v.push(StageId::Kd);
    }
    validate_ordering(&v)?;
    Ok(v)
}

pub fn ordering_label(ordering: &[StageId]) -> String {
    ordering.iter().map(ToString::to_string).collect::<Vec<_>>().join(" -> ")
}

pub const DEFAULT_ORDERING: [StageId; 4] = [StageId::Nas, StageId::Prune, StageId::Quant, StageId::Kd];

/// The three orderings compared in the reference ablation.
pub fn reference_orderings() -> Vec<Vec<StageId>> {
    use StageId::*;
    vec![vec![Nas, Prune, Quant, Kd], vec![Prune, Quant, Nas, Kd], vec![Quant, Nas, Prune, Kd]]
}

/// All six permutations of the compression stages, KD last.
pub fn all_orderings() -> Vec<Vec<StageId>> {
    use StageId::*;
    let c = [Nas, Prune, Quant];
    let mut out = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                if i != j && j != k && i != k {
                    out.push(vec![c[i], c[j], c[k], Kd]);
                }
            }
        }
    }
    out
}

/// Generated splits for the configured task.
pub fn generate_data(config: &PipelineConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let len_range = (config.min_len, config.max_len);
    let data = match config.task {
        Task::Clone => generate_clone_dataset(config.seed, config.n_examples, config.vocab(), len_range)?,
        Task::Lm => generate_lm_dataset(config.seed, config.n_examples, len_range)?,
    };
    split(&data, (config.train_fraction, config.val_fraction, config.test_fraction), derive_seed(config.seed, &[0x5b17]))
}

pub fn train_teacher(config: &PipelineConfig, train_data: &Dataset) -> Result<(ModelState<Real>, LossHistory)> {
    let arch = config.teacher_arch();
    let mut teacher = crate::model::build_model::<Real>(&arch, derive_seed(config.seed, &[0x7eac, 1]))?;
    let history = train(&mut teacher, train_data, &LossSpec::HardLabel, None, &config.teacher_train_options())?;
    Ok((teacher, history))
}

/// Quality and efficiency of one model on the shared evaluation workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub config: ArchConfig,
    pub precision: Precision,
    pub parameters: usize,
    /// Analytic estimate for one timing batch.
    pub memory_bytes: u64,
    pub val: EvalMetrics,
    pub test: EvalMetrics,
    pub green: GreenReport,
}

pub fn summarize(model: &ModelState<Real>, val: &Dataset, test: &Dataset, config: &PipelineConfig) -> Result<ModelSummary> {
    let green = measure_inference(model, test, config.timing_batch, config.timing_warmup, config.timing_reps, &config.meter())?;
    Ok(ModelSummary {
        config: model.config().clone(),
        precision: model.precision(),
        parameters: count_parameters(model.config()),
        memory_bytes: estimate_memory(model.config(), config.timing_batch.min(test.len()), test.max_input_len(), model.precision()),
        val: evaluate(model, val)?,
        test: evaluate(model, test)?,
        green,
    })
}

/// Data, teacher and cached teacher outputs shared by every run.
#[derive(Debug, Clone)]
pub struct Workbench {
    pub config: PipelineConfig,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Slice of `train` used for proxy training.
    pub proxy_train: Dataset,
    pub teacher: ModelState<Real>,
    pub teacher_history: LossHistory,
    pub teacher_summary: ModelSummary,
    teacher_targets: SoftTargets<Real>,
    proxy_targets: Option<SoftTargets<Real>>,
}

impl Workbench {
    /// Generates data and trains a teacher unless one is supplied.
    pub fn prepare(config: &PipelineConfig, teacher: Option<ModelState<Real>>) -> Result<Self> {
        config.validate()?;
        let (train_data, val, test) = generate_data(config)?;
        let (teacher, teacher_history) = match teacher {
            Some(t) => {
                if *t.config() != config.teacher_arch() {
                    return Err(Error::TaskMismatch(format!(
                        "teacher checkpoint {:?} does not match the configured teacher {:?}",
                        t.config(),
                        config.teacher_arch()
                    )));
                }
                (t, LossHistory::default())
            }
            None => train_teacher(config, &train_data)?,
        };
        let proxy_train = match config.proxy_examples {
            0 => train_data.clone(),
            n => train_data.subset(0..n.min(train_data.len())),
        };
        let teacher_targets = SoftTargets::from_teacher(&teacher, &train_data, 64)?;
        let proxy_targets =
            if config.nas_distill { Some(SoftTargets::from_teacher(&teacher, &proxy_train, 64)?) } else { None };
        let teacher_summary = summarize(&teacher, &val, &test, config)?;
        Ok(Self {
            config: config.clone(),
            train: train_data,
            val,
            test,
            proxy_train,
            teacher,
            teacher_history,
            teacher_summary,
            teacher_targets,
            proxy_targets,
        })
    }

    fn proxy_data(&self) -> ProxyData<'_, Real> {
        ProxyData { train: &self.proxy_train, val: &self.val, targets: self.proxy_targets.as_ref() }
    }

    fn proxy_settings(&self, fake_quant: bool) -> ProxySettings {
        let c = &self.config;
        ProxySettings {
            steps: c.proxy_steps,
            batch_size: c.batch_size,
            optim: c.optim(c.lr),
            fake_quant,
            loss: if c.nas_distill { c.distill_config().loss_spec() } else { LossSpec::HardLabel },
        }
    }

    pub fn feasibility_context(&self, precision: Precision) -> FeasibilityContext {
        let c = &self.config;
        FeasibilityContext {
            seq_len: self.test.max_input_len(),
            batch: c.timing_batch,
            precision,
            latency: if c.measured_latency {
                LatencyMode::Measured { reps: 3 }
            } else {
                LatencyMode::Analytic { host_gflops: c.host_gflops }
            },
            device_power_w: c.device_power_w,
            carbon_intensity_g_per_kwh: c.carbon_intensity,
        }
    }

    /// Budget from the configured absolute limits, or else as fractions of
    /// the real-precision teacher's analytic footprint.
    pub fn budget(&self) -> Budget {
        let c = &self.config;
        let ctx = self.feasibility_context(Precision::Real);
        let arch = self.teacher.config();
        let teacher_mem = estimate_memory(arch, ctx.batch, ctx.seq_len, Precision::Real) as f64;
        let teacher_lat = total_flops(arch, ctx.seq_len) * ctx.batch as f64 / (c.host_gflops * 1e9) * 1e3;
        Budget {
            max_latency_ms: c.budget_latency_ms.unwrap_or(teacher_lat * c.budget_latency_fraction),
            max_memory_bytes: c.budget_memory_mb.map_or(teacher_mem * c.budget_memory_fraction, |mb| mb * 1024.0 * 1024.0)
                as u64,
            max_gco2_per_sample: c.budget_gco2_per_sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageDetail {
    Nas { genome: Genome, fitness: f64, seed: u64, log: SearchLog },
    Prune { log: PruneLog },
    Quant,
    Kd { first_loss: Option<f64>, last_loss: Option<f64>, steps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: StageId,
    pub input_config: ArchConfig,
    pub output_config: ArchConfig,
    /// Whether the output trains and scores under fake-quant int8 weights.
    pub quantized: bool,
    pub parameters: usize,
    pub memory_bytes: u64,
    pub val: EvalMetrics,
    pub green: GreenReport,
    pub wall_s: f64,
    pub detail: StageDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub ordering: Vec<StageId>,
    pub task: Task,
    pub seed: u64,
    pub budget: Budget,
    pub stages: Vec<StageRecord>,
    pub teacher: ModelSummary,
    /// The student right before distillation, hard-quantized.
    pub compressed_no_kd: ModelSummary,
    pub student: ModelSummary,
    pub retention: ComparisonTable,
    pub wall_s: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: PipelineReport,
    pub student: ModelState<Real>,
    pub compressed_no_kd: ModelState<Real>,
}

fn hard_quantized(model: &ModelState<Real>, quant: bool) -> Result<ModelState<Real>> {
    if !quant {
        return Ok(model.clone());
    }
    let mut m = model.clone();
    m.set_fake_quant(false);
    quantize_model(&m)
}

/// Runs `ordering` against the workbench teacher, threading one student
/// through every stage.
pub fn run_pipeline(ordering: &[StageId], wb: &Workbench) -> Result<PipelineRun> {
    validate_ordering(ordering)?;
    let started = Instant::now();
    let c = &wb.config;
    let budget = wb.budget();
    let mut model = wb.teacher.clone();
    let mut quant = false;
    let mut stages = Vec::with_capacity(ordering.len());
    let mut pre_kd: Option<ModelState<Real>> = None;

    for &stage in ordering {
        let t = Instant::now();
        let input_config = model.config().clone();
        let detail = match stage {
            StageId::Nas => {
                let space = SearchSpace::capped_at(&input_config)?;
                let precision = if quant { Precision::Int8Weights } else { Precision::Real };
                let settings = NasSettings {
                    population_size: c.population,
                    generations: c.generations,
                    crossover_rate: c.crossover_rate,
                    mutation_rate: c.mutation_rate,
                    proxy: wb.proxy_settings(quant),
                    context: wb.feasibility_context(precision),
                };
                let out = run_nas(&space, &budget, &input_config, wb.proxy_data(), &settings, derive_seed(c.seed, &[0x2a5]))?;
                model = proxy_train(&out.config, wb.proxy_data(), &settings.proxy, out.seed)?.0;
                StageDetail::Nas { genome: out.genome, fitness: out.fitness, seed: out.seed, log: out.log }
            }
            StageId::Prune => {
                let settings = PruneSettings { epsilon: c.epsilon, proxy: wb.proxy_settings(quant), space: SearchSpace::default() };
                let out = structured_prune(&input_config, wb.proxy_data(), &settings, derive_seed(c.seed, &[0x9a7e]))?;
                model = out.model;
                StageDetail::Prune { log: out.log }
            }
            StageId::Quant => {
                model = quantize_aware_init(&model)?;
                quant = true;
                StageDetail::Quant
            }
            StageId::Kd => {
                pre_kd = Some(hard_quantized(&model, quant)?);
                let opts = c.kd_train_options();
                let h = distill_with_targets(&mut model, &wb.train, &wb.teacher_targets, &c.distill_config(), &opts)?;
                StageDetail::Kd { first_loss: h.first(), last_loss: h.last(), steps: opts.steps }
            }
        };
        let precision = if quant { Precision::Int8Weights } else { Precision::Real };
        let green = measure_inference(&model, &wb.test, c.timing_batch, c.timing_warmup, c.timing_reps, &c.meter())?;
        stages.push(StageRecord {
            stage,
            input_config,
            output_config: model.config().clone(),
            quantized: quant,
            parameters: count_parameters(model.config()),
            memory_bytes: estimate_memory(model.config(), c.timing_batch.min(wb.test.len()), wb.test.max_input_len(), precision),
            val: evaluate(&model, &wb.val)?,
            green,
            wall_s: t.elapsed().as_secs_f64(),
            detail,
        });
    }

    let student = hard_quantized(&model, quant)?;
    let compressed_no_kd = pre_kd.expect("validated ordering ends with KD");
    let student_summary = summarize(&student, &wb.val, &wb.test, c)?;
    let retention = compare_summaries(&wb.teacher_summary, &student_summary);
    let report = PipelineReport {
        ordering: ordering.to_vec(),
        task: c.task,
        seed: c.seed,
        budget,
        stages,
        teacher: wb.teacher_summary.clone(),
        compressed_no_kd: summarize(&compressed_no_kd, &wb.val, &wb.test, c)?,
        student: student_summary,
        retention,
        wall_s: started.elapsed().as_secs_f64(),
    };
    Ok(PipelineRun { report, student, compressed_no_kd })
}

/// One row per ordering, all against the same teacher and data. A failed
/// ordering becomes a failed row.
pub fn ablate_orderings(orderings: &[Vec<StageId>], wb: &Workbench) -> Result<OrderingTable> {
    if orderings.len() < 2 {
        return Err(Error::Validation("an ordering ablation needs at least two orderings".into()));
    }
    let rows = orderings
        .iter()
        .map(|o| {
            let label = ordering_label(o);
            match run_pipeline(o, wb) {
                Ok(run) => OrderingRow::from_report(label, &run.report),
                Err(e) => OrderingRow::failed(label, o.clone(), &e),
            }
        })
        .collect();
    Ok(OrderingTable { rows })
}

/// Teacher, compressed student without distillation, and the full
/// pipeline student.
pub fn ablate_components(wb: &Workbench) -> Result<(ComponentReport, PipelineRun)> {
    let run = run_pipeline(&DEFAULT_ORDERING, wb)?;
    let r = &run.report;
    let report = ComponentReport {
        rows: vec![
            ComponentRow::new("teacher", &r.teacher),
            ComponentRow::new("compressed, no KD", &r.compressed_no_kd),
            ComponentRow::new("full pipeline", &r.student),
        ],
    };
    Ok((report, run))
}

/// Retention and reduction table of `student` against `teacher`.
pub fn compare_models(
    teacher: &ModelState<Real>,
    student: &ModelState<Real>,
    val: &Dataset,
    test: &Dataset,
    config: &PipelineConfig,
) -> Result<ComparisonTable> {
    let (tc, sc) = (teacher.config(), student.config());
    if tc.arch_kind != sc.arch_kind || tc.vocab_size != sc.vocab_size {
        return Err(Error::TaskMismatch(format!("{:?} teacher vs {:?} student", tc.arch_kind, sc.arch_kind)));
    }
    let t = summarize(teacher, val, test, config)?;
    let s = summarize(student, val, test, config)?;
    Ok(compare_summaries(&t, &s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_rules() {
        assert!(validate_ordering(&DEFAULT_ORDERING).is_ok());
        assert!(parse_ordering("kd,nas,prune,quant").is_err());
        assert!(parse_ordering("nas,nas,quant,kd").is_err());
        assert_eq!(parse_ordering("prune, quant, nas").unwrap(), reference_orderings()[1]);
        let all = all_orderings();
        assert_eq!(all.len(), 6);
        assert!(all.iter().all(|o| validate_ordering(o).is_ok()));
        for r in reference_orderings() {
            assert!(all.contains(&r));
        }
    }
}
