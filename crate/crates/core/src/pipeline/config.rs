use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compressor::DEFAULT_EPSILON;
use crate::distiller::{DistillConfig, DEFAULT_ALPHA, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::greenmeter::{MemoryMode, MeterSettings, DEFAULT_CARBON_INTENSITY, DEFAULT_DEVICE_POWER_W, DEFAULT_SAMPLING_INTERVAL_S};
use crate::model::{ArchConfig, ArchKind};
use crate::nas::{DEFAULT_CROSSOVER_RATE, DEFAULT_GENERATIONS, DEFAULT_HOST_GFLOPS, DEFAULT_MUTATION_RATE, DEFAULT_POPULATION};
use crate::synthdata::LM_VOCAB_SIZE;
use crate::trainer::{AdamWConfig, TrainOptions, DEFAULT_BATCH_SIZE, DEFAULT_PROXY_STEPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Clone,
    Lm,
}

impl Task {
    pub fn arch_kind(self) -> ArchKind {
        match self {
            Task::Clone => ArchKind::EncoderClassifier,
            Task::Lm => ArchKind::DecoderLm,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clone" => Ok(Task::Clone),
            "lm" => Ok(Task::Lm),
            _ => Err(Error::InvalidConfig(format!("unknown task {s:?} (expected clone or lm)"))),
        }
    }
}

/// Every knob of a run as one flat table, so a config file is a list of
/// `key = value` lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub task: Task,

    pub n_examples: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,

    pub teacher_layers: usize,
    pub teacher_heads: usize,
    pub teacher_head_dim: usize,
    pub teacher_ffd: usize,
    pub max_seq_len: usize,
    pub teacher_steps: usize,
    pub teacher_lr: f64,

    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,

    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub proxy_steps: usize,
    /// Proxy training subset size; 0 uses the whole train split.
    pub proxy_examples: usize,
    /// NAS fitness with the hybrid distillation loss instead of hard labels.
    pub nas_distill: bool,
    /// Budgets as fractions of the teacher's estimate; an absolute value
    /// below takes precedence when set.
    pub budget_memory_fraction: f64,
    pub budget_latency_fraction: f64,
    pub budget_memory_mb: Option<f64>,
    pub budget_latency_ms: Option<f64>,
    pub budget_gco2_per_sample: Option<f64>,
    pub host_gflops: f64,
    pub measured_latency: bool,

    pub epsilon: f64,

    pub temperature: f64,
    pub alpha: f64,
    /// Pure mimicry regardless of task.
    pub kd_only: bool,
    pub raw_kl: bool,
    pub kd_steps: usize,
    pub kd_lr: f64,

    pub device_power_w: f64,
    pub carbon_intensity: f64,
    pub sampling_interval_s: f64,
    pub measured_memory: bool,
    pub timing_batch: usize,
    pub timing_warmup: usize,
    pub timing_reps: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            task: Task::Clone,
            n_examples: 10000,
            vocab_size: 32,
            min_len: 4,
            max_len: 6,
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            teacher_layers: 6,
            teacher_heads: 12,
            teacher_head_dim: 16,
            teacher_ffd: 768,
            max_seq_len: 32,
            teacher_steps: 2500,
            teacher_lr: AdamWConfig::default().lr,
            batch_size: DEFAULT_BATCH_SIZE,
            lr: AdamWConfig::default().lr,
            weight_decay: AdamWConfig::default().weight_decay,
            population: DEFAULT_POPULATION,
            generations: DEFAULT_GENERATIONS,
            crossover_rate: DEFAULT_CROSSOVER_RATE,
            mutation_rate: DEFAULT_MUTATION_RATE,
            proxy_steps: DEFAULT_PROXY_STEPS,
            proxy_examples: 0,
            nas_distill: false,
            budget_memory_fraction: 0.05,
            budget_latency_fraction: 0.1,
            budget_memory_mb: None,
            budget_latency_ms: None,
            budget_gco2_per_sample: None,
            host_gflops: DEFAULT_HOST_GFLOPS,
            measured_latency: false,
            epsilon: DEFAULT_EPSILON,
            temperature: DEFAULT_TEMPERATURE,
            alpha: DEFAULT_ALPHA,
            kd_only: false,
            raw_kl: false,
            kd_steps: 3000,
            kd_lr: 1e-3,
            device_power_w: DEFAULT_DEVICE_POWER_W,
            carbon_intensity: DEFAULT_CARBON_INTENSITY,
            sampling_interval_s: DEFAULT_SAMPLING_INTERVAL_S,
            measured_memory: false,
            timing_batch: DEFAULT_BATCH_SIZE,
            timing_warmup: 2,
            timing_reps: 3,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail(format!("split fractions {fr:?} must be in [0, 1] and sum to 1"));
        }
        if self.min_len > self.max_len || self.n_examples == 0 {
            return fail("need n_examples > 0 and min_len <= max_len".into());
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) || !(0.0..=1.0).contains(&self.mutation_rate) {
            return fail("crossover_rate and mutation_rate must be in [0, 1]".into());
        }
        if !(self.budget_memory_fraction > 0.0 && self.budget_latency_fraction > 0.0) {
            return fail("budget fractions must be positive".into());
        }
        if self.batch_size == 0 || self.timing_batch == 0 || self.timing_reps == 0 {
            return fail("batch sizes and timing_reps must be positive".into());
        }
        if !(self.host_gflops > 0.0) {
            return fail("host_gflops must be positive".into());
        }
        if self.epsilon.is_nan() {
            return fail("epsilon must not be NaN".into());
        }
        self.distill_config().validate()?;
        self.teacher_arch().validate()
    }

    pub fn vocab(&self) -> usize {
        match self.task {
            Task::Clone => self.vocab_size,
            Task::Lm => LM_VOCAB_SIZE,
        }
    }

    pub fn teacher_arch(&self) -> ArchConfig {
        let (l, h, hd, f) = (self.teacher_layers, self.teacher_heads, self.teacher_head_dim, self.teacher_ffd);
        match self.task {
            Task::Clone => ArchConfig::encoder_classifier(l, h, hd, f, self.vocab(), self.max_seq_len, 2),
            Task::Lm => ArchConfig::decoder_lm(l, h, hd, f, self.vocab(), self.max_seq_len),
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        let mut c = match (self.task, self.kd_only) {
            (Task::Clone, _) | (_, true) => DistillConfig::kd_only(self.temperature),
            (Task::Lm, false) => DistillConfig::hybrid(self.alpha, self.temperature),
        };
        c.raw_kl = self.raw_kl;
        c
    }

    pub fn optim(&self, lr: f64) -> AdamWConfig {
        AdamWConfig { lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }

    pub fn teacher_train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            optim: self.optim(self.teacher_lr),
            ..TrainOptions::new(self.teacher_steps, crate::rng::derive_seed(self.seed, &[0x7eac]))
        }
    }

    pub fn kd_train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            optim: self.optim(self.kd_lr),
            raw_kl: self.raw_kl,
            ..TrainOptions::new(self.kd_steps, crate::rng::derive_seed(self.seed, &[0xd157]))
        }
    }

    pub fn meter(&self) -> MeterSettings {
        MeterSettings {
            device_power_w: self.device_power_w,
            carbon_intensity_g_per_kwh: self.carbon_intensity,
            sampling_interval_s: self.sampling_interval_s,
            memory_mode: if self.measured_memory { MemoryMode::Measured } else { MemoryMode::Analytic },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_toml_roundtrip() {
        let c = PipelineConfig { epsilon: 0.05, budget_memory_mb: Some(2.0), ..Default::default() };
        let back = PipelineConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = PipelineConfig::from_toml_str("seed = 9\ntask = \"lm\"\nkd_steps = 10\n").unwrap();
        assert_eq!((c.seed, c.task, c.kd_steps), (9, Task::Lm, 10));
        assert_eq!(c.epsilon, DEFAULT_EPSILON);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(PipelineConfig::from_toml_str("sede = 1").is_err());
        assert!(PipelineConfig::from_toml_str("train_fraction = 0.9").is_err());
    }
}
