use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use slimformer::compressor::{quantize_model, structured_prune, PruneSettings};
use slimformer::diagnostics::{profile_layers, NormScaling};
use slimformer::distiller::{distill, DistillConfig};
use slimformer::greenmeter::measure_inference;
use slimformer::model::checkpoint;
use slimformer::nas::{proxy_train, run_nas, Genome, NasSettings, ProxyData, SearchSpace};
use slimformer::pipeline::{
    ablate_components, ablate_orderings, all_orderings, compare_models, generate_data, parse_ordering, reference_orderings,
    run_pipeline, train_teacher, PipelineConfig, Real, Task, Workbench,
};
use slimformer::trainer::evaluate;
use slimformer::{Error, Model32, Result};

#[derive(Parser)]
#[command(name = "slimformer", version, about = "Compress small transformers under latency, memory and carbon budgets")]
struct Cli {
    /// Flat `key = value` config file; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// `clone` or `lm`.
    #[arg(long, global = true)]
    task: Option<Task>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct TeacherArg {
    /// Teacher checkpoint; trained from the config when absent.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/val/test splits as JSON lines.
    GenData,
    /// Train the teacher and save it.
    TrainTeacher {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Genetic architecture search under the configured budget.
    Nas {
        #[arg(long)]
        budget_latency_ms: Option<f64>,
        #[arg(long)]
        budget_memory_mb: Option<f64>,
        #[arg(long)]
        pop: Option<usize>,
        #[arg(long)]
        gens: Option<usize>,
        #[arg(long)]
        proxy_steps: Option<usize>,
        /// Time real forwards instead of the FLOP-based latency proxy.
        #[arg(long)]
        measured: bool,
        #[command(flatten)]
        teacher: TeacherArg,
    },
    /// Structured accept/revert pruning of a checkpoint's architecture.
    Prune {
        /// Checkpoint whose architecture is pruned; the configured teacher
        /// architecture when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        proxy_steps: Option<usize>,
    },
    /// Int8 weight quantization of a checkpoint.
    Quantize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Distill a teacher checkpoint into a student checkpoint.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Full compression pipeline.
    Pipeline {
        /// Comma-separated stages, e.g. `nas,prune,quant,kd`.
        #[arg(long, default_value = "nas,prune,quant,kd")]
        ordering: String,
        #[command(flatten)]
        teacher: TeacherArg,
    },
    /// Compare stage orderings on one teacher and dataset.
    AblateOrder {
        /// All six permutations instead of the three reference orderings.
        #[arg(long)]
        all_six: bool,
        #[command(flatten)]
        teacher: TeacherArg,
    },
    /// Teacher vs compressed-without-distillation vs full pipeline.
    AblateComponents {
        #[command(flatten)]
        teacher: TeacherArg,
    },
    /// Per-layer redundancy metrics of a checkpoint.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        /// Calibration examples taken from the validation split.
        #[arg(long, default_value_t = 64)]
        examples: usize,
        #[arg(long)]
        scale_by_dim: bool,
    },
    /// Retention and reduction table of a student against a teacher.
    Compare {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
    },
    /// Latency, memory, energy and CO₂ of inference over the test split.
    Measure {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        power_w: Option<f64>,
        #[arg(long)]
        intensity: Option<f64>,
        #[arg(long)]
        interval_s: Option<f64>,
        #[arg(long)]
        measured_memory: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::BudgetInfeasible { .. } => 2,
        Error::InvalidConfig(_)
        | Error::Validation(_)
        | Error::TaskMismatch(_)
        | Error::SequenceTooLong { .. }
        | Error::TokenOutOfVocab { .. }
        | Error::LabelOutOfRange { .. }
        | Error::EmptyDataset
        | Error::Checkpoint(_) => 3,
        _ => 1,
    }
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value)?)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    println!("{text}");
    Ok(())
}

fn save_model(dir: &Path, name: &str, model: &Model32) -> Result<()> {
    let path = dir.join(name);
    checkpoint::save(model, &path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn load_teacher(arg: &TeacherArg) -> Result<Option<Model32>> {
    arg.teacher.as_ref().map(checkpoint::load::<Real>).transpose()
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(t) = cli.task {
        config.task = t;
    }
    let out = cli.out_dir.as_path();
    std::fs::create_dir_all(out)?;

    match cli.command {
        Command::GenData => {
            config.validate()?;
            let (train, val, test) = generate_data(&config)?;
            for (name, d) in [("train", &train), ("val", &val), ("test", &test)] {
                let path = out.join(format!("{name}.jsonl"));
                d.write_jsonl(&path)?;
                eprintln!("wrote {} ({} examples)", path.display(), d.len());
            }
        }
        Command::TrainTeacher { steps } => {
            if let Some(s) = steps {
                config.teacher_steps = s;
            }
            config.validate()?;
            let (train, val, _) = generate_data(&config)?;
            let (teacher, history) = train_teacher(&config, &train)?;
            history.write_csv(out.join("teacher_loss.csv"))?;
            save_model(out, "teacher.ckpt", &teacher)?;
            let metrics = evaluate(&teacher, &val)?;
            println!("teacher validation primary metric {:.4}", metrics.primary());
            write_json(out, "teacher_metrics.json", &metrics)?;
        }
        Command::Nas { budget_latency_ms, budget_memory_mb, pop, gens, proxy_steps, measured, teacher } => {
            config.budget_latency_ms = budget_latency_ms.or(config.budget_latency_ms);
            config.budget_memory_mb = budget_memory_mb.or(config.budget_memory_mb);
            config.population = pop.unwrap_or(config.population);
            config.generations = gens.unwrap_or(config.generations);
            config.proxy_steps = proxy_steps.unwrap_or(config.proxy_steps);
            config.measured_latency |= measured;
            let wb = Workbench::prepare(&config, load_teacher(&teacher)?)?;
            let base = config.teacher_arch();
            let settings = NasSettings {
                population_size: config.population,
                generations: config.generations,
                crossover_rate: config.crossover_rate,
                mutation_rate: config.mutation_rate,
                proxy: proxy_settings(&config),
                context: wb.feasibility_context(slimformer::model::Precision::Real),
            };
            let data = ProxyData { train: &wb.proxy_train, val: &wb.val, targets: None };
            let outcome = run_nas(&SearchSpace::capped_at(&base)?, &wb.budget(), &base, data, &settings, config.seed)?;
            println!("best genome {} fitness {:.4}", outcome.genome, outcome.fitness);
            let (model, _) = proxy_train(&outcome.config, data, &settings.proxy, outcome.seed)?;
            write_json(out, "nas_log.json", &outcome)?;
            save_model(out, "nas_best.ckpt", &model)?;
        }
        Command::Prune { input, epsilon, proxy_steps } => {
            config.epsilon = epsilon.unwrap_or(config.epsilon);
            config.proxy_steps = proxy_steps.unwrap_or(config.proxy_steps);
            config.validate()?;
            let arch = match &input {
                Some(p) => checkpoint::load::<Real>(p)?.config().clone(),
                None => config.teacher_arch(),
            };
            let (train, val, _) = generate_data(&config)?;
            let train = if config.proxy_examples > 0 { train.subset(0..config.proxy_examples.min(train.len())) } else { train };
            let settings = PruneSettings { epsilon: config.epsilon, proxy: proxy_settings(&config), space: SearchSpace::default() };
            let data = ProxyData { train: &train, val: &val, targets: None };
            let outcome = structured_prune::<Real>(&arch, data, &settings, config.seed)?;
            println!("pruned {} -> {}", Genome::of(&arch), Genome::of(&outcome.config));
            write_json(out, "prune_log.json", &outcome.log)?;
            save_model(out, "pruned.ckpt", &outcome.model)?;
        }
        Command::Quantize { input, output } => {
            let model = checkpoint::load::<Real>(&input)?;
            let q = quantize_model(&model)?;
            checkpoint::save(&q, &output)?;
            eprintln!("wrote {}", output.display());
        }
        Command::Distill { teacher, student, temperature, alpha, steps } => {
            config.temperature = temperature.unwrap_or(config.temperature);
            if let Some(a) = alpha {
                config.alpha = a;
                config.kd_only = a == 1.0;
            }
            config.kd_steps = steps.unwrap_or(config.kd_steps);
            config.validate()?;
            let teacher = checkpoint::load::<Real>(&teacher)?;
            let mut student = checkpoint::load::<Real>(&student)?;
            let (train, val, _) = generate_data(&config)?;
            let dc: DistillConfig = config.distill_config();
            let history = distill(&teacher, &mut student, &train, &dc, &config.kd_train_options())?;
            history.write_csv(out.join("distill_loss.csv"))?;
            println!("student validation primary metric {:.4}", evaluate(&student, &val)?.primary());
            save_model(out, "distilled.ckpt", &student)?;
        }
        Command::Pipeline { ordering, teacher } => {
            let ordering = parse_ordering(&ordering)?;
            let wb = Workbench::prepare(&config, load_teacher(&teacher)?)?;
            let run = run_pipeline(&ordering, &wb)?;
            write_json(out, "pipeline_report.json", &run.report)?;
            write_text(out, "retention.txt", &run.report.retention.render())?;
            save_model(out, "student.ckpt", &run.student)?;
            save_model(out, "teacher.ckpt", &wb.teacher)?;
        }
        Command::AblateOrder { all_six, teacher } => {
            let wb = Workbench::prepare(&config, load_teacher(&teacher)?)?;
            let orderings = if all_six { all_orderings() } else { reference_orderings() };
            let table = ablate_orderings(&orderings, &wb)?;
            write_json(out, "ordering_ablation.json", &table)?;
            write_text(out, "ordering_ablation.txt", &table.render())?;
        }
        Command::AblateComponents { teacher } => {
            let wb = Workbench::prepare(&config, load_teacher(&teacher)?)?;
            let (report, run) = ablate_components(&wb)?;
            write_json(out, "component_ablation.json", &report)?;
            write_json(out, "pipeline_report.json", &run.report)?;
            write_text(out, "component_ablation.txt", &report.render())?;
        }
        Command::Diagnose { model, examples, scale_by_dim } => {
            let model = checkpoint::load::<Real>(&model)?;
            let (_, val, _) = generate_data(&config)?;
            let calib = val.subset(0..examples.min(val.len()));
            let scaling = if scale_by_dim { NormScaling::Dim } else { NormScaling::SqrtDim };
            let profile = profile_layers(&model, &calib, scaling)?;
            profile.write_csv(out.join("layers.csv"))?;
            write_json(out, "diagnostics.json", &profile.summary_json())?;
            print!("{}", profile.to_csv());
        }
        Command::Compare { teacher, student } => {
            let teacher = checkpoint::load::<Real>(&teacher)?;
            let student = checkpoint::load::<Real>(&student)?;
            let (_, val, test) = generate_data(&config)?;
            let table = compare_models(&teacher, &student, &val, &test, &config)?;
            write_json(out, "comparison.json", &table)?;
            write_text(out, "comparison.txt", &table.render())?;
        }
        Command::Measure { model, power_w, intensity, interval_s, measured_memory } => {
            config.device_power_w = power_w.unwrap_or(config.device_power_w);
            config.carbon_intensity = intensity.unwrap_or(config.carbon_intensity);
            config.sampling_interval_s = interval_s.unwrap_or(config.sampling_interval_s);
            config.measured_memory |= measured_memory;
            config.validate()?;
            let model = checkpoint::load::<Real>(&model)?;
            let (_, _, test) = generate_data(&config)?;
            let report =
                measure_inference(&model, &test, config.timing_batch, config.timing_warmup, config.timing_reps, &config.meter())?;
            println!(
                "p50 {:.3} ms  p95 {:.3} ms  {:.3e} gCO2/sample  peak {} bytes",
                report.p50_ms, report.p95_ms, report.co2_g_per_sample, report.peak_memory_bytes
            );
            write_json(out, "green_report.json", &report)?;
        }
    }
    Ok(())
}

fn proxy_settings(config: &PipelineConfig) -> slimformer::nas::ProxySettings {
    slimformer::nas::ProxySettings {
        steps: config.proxy_steps,
        batch_size: config.batch_size,
        optim: config.optim(config.lr),
        ..Default::default()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
