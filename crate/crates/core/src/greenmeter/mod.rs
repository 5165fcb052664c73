//! Inference timing and energy / CO₂ accounting.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{estimate_memory, ModelState};
use crate::numcore::Scalar;
use crate::synthdata::Dataset;
use crate::trainer::{check_task, make_batch};

/// Grid carbon intensity used unless overridden, gCO₂ per kWh.
pub const DEFAULT_CARBON_INTENSITY: f64 = 170.043;
pub const DEFAULT_DEVICE_POWER_W: f64 = 65.0;
pub const DEFAULT_SAMPLING_INTERVAL_S: f64 = 15.0;

const JOULES_PER_KWH: f64 = 3.6e6;

/// Nearest-rank percentile: the value at rank `ceil(p/100 · n)` of the
/// ascending sort.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::Validation(format!("percentile {p} outside (0, 100]")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// kWh drawn by `power_w` over `duration_s`.
pub fn estimate_energy(duration_s: f64, power_w: f64) -> f64 {
    power_w * duration_s / JOULES_PER_KWH
}

pub fn co2_from_energy(kwh: f64, intensity_g_per_kwh: f64) -> f64 {
    kwh * intensity_g_per_kwh
}

/// Seconds since an arbitrary origin; never decreasing.
pub trait Clock {
    fn now_s(&self) -> f64;
}

#[derive(Debug, Clone)]
pub struct MonotonicClock {
    origin: Instant,
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for MonotonicClock {
    fn now_s(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

/// Clock advanced by hand; clones share the same time.
#[derive(Debug, Clone, Default)]
pub struct ManualClock {
    bits: Arc<AtomicU64>,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, seconds: f64) {
        let now = f64::from_bits(self.bits.load(Ordering::SeqCst));
        self.bits.store((now + seconds).to_bits(), Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_s(&self) -> f64 {
        f64::from_bits(self.bits.load(Ordering::SeqCst))
    }
}

/// Device power draw as a function of time into the run.
pub trait PowerModel {
    fn power_w(&self, t_s: f64) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantPower(pub f64);

impl Default for ConstantPower {
    fn default() -> Self {
        Self(DEFAULT_DEVICE_POWER_W)
    }
}

impl PowerModel for ConstantPower {
    fn power_w(&self, _t_s: f64) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    #[default]
    Analytic,
    Measured,
}

/// What a measured workload reports back.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadOutput {
    pub n_samples: usize,
    pub latency_ms: Vec<f64>,
    pub peak_memory_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreenReport {
    pub n_samples: usize,
    pub latency_ms: Vec<f64>,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub total_wall_s: f64,
    pub peak_memory_bytes: u64,
    pub memory_mode: MemoryMode,
    pub energy_kwh: f64,
    pub co2_g: f64,
    pub co2_g_per_sample: f64,
    pub carbon_intensity_g_per_kwh: f64,
    pub device_power_w: f64,
    pub sampling_interval_s: f64,
}

impl GreenReport {
    /// Recompute the derived fields and compare exactly.
    pub fn is_consistent(&self) -> bool {
        let pct = |p| percentile(&self.latency_ms, p).ok();
        self.co2_g == co2_from_energy(self.energy_kwh, self.carbon_intensity_g_per_kwh)
            && self.co2_g_per_sample == self.co2_g / self.n_samples as f64
            && self.p50_ms <= self.p95_ms
            && (self.latency_ms.is_empty() || (pct(50.0) == Some(self.p50_ms) && pct(95.0) == Some(self.p95_ms)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeterSettings {
    pub device_power_w: f64,
    pub carbon_intensity_g_per_kwh: f64,
    pub sampling_interval_s: f64,
    pub memory_mode: MemoryMode,
}

impl Default for MeterSettings {
    fn default() -> Self {
        Self {
            device_power_w: DEFAULT_DEVICE_POWER_W,
            carbon_intensity_g_per_kwh: DEFAULT_CARBON_INTENSITY,
            sampling_interval_s: DEFAULT_SAMPLING_INTERVAL_S,
            memory_mode: MemoryMode::Analytic,
        }
    }
}

/// Integrate power over fixed sampling intervals; the last interval is
/// pro-rated to the end of the run.
fn integrate_energy_kwh(power: &impl PowerModel, duration_s: f64, interval_s: f64) -> f64 {
    let mut joules = 0.0;
    let mut t = 0.0;
    while t < duration_s {
        let dt = interval_s.min(duration_s - t);
        joules += power.power_w(t) * dt;
        t += interval_s;
    }
    joules / JOULES_PER_KWH
}

/// Run `workload` once under the meter. A failing workload discards the
/// partial report.
pub fn measure_run(
    workload: impl FnOnce() -> Result<WorkloadOutput>,
    power: &impl PowerModel,
    clock: &impl Clock,
    settings: &MeterSettings,
) -> Result<GreenReport> {
    if !(settings.sampling_interval_s > 0.0) {
        return Err(Error::InvalidConfig("sampling interval must be positive".into()));
    }
    let start = clock.now_s();
    let out = workload()?;
    let total_wall_s = clock.now_s() - start;
    if out.n_samples == 0 {
        return Err(Error::EmptyDataset);
    }
    let energy_kwh = integrate_energy_kwh(power, total_wall_s, settings.sampling_interval_s);
    let co2_g = co2_from_energy(energy_kwh, settings.carbon_intensity_g_per_kwh);
    let (p50_ms, p95_ms) = if out.latency_ms.is_empty() {
        (0.0, 0.0)
    } else {
        (percentile(&out.latency_ms, 50.0)?, percentile(&out.latency_ms, 95.0)?)
    };
    Ok(GreenReport {
        n_samples: out.n_samples,
        p50_ms,
        p95_ms,
        latency_ms: out.latency_ms,
        total_wall_s,
        peak_memory_bytes: out.peak_memory_bytes,
        memory_mode: settings.memory_mode,
        energy_kwh,
        co2_g,
        co2_g_per_sample: co2_g / out.n_samples as f64,
        carbon_intensity_g_per_kwh: settings.carbon_intensity_g_per_kwh,
        device_power_w: power.power_w(0.0),
        sampling_interval_s: settings.sampling_interval_s,
    })
}

/// Wall-clock milliseconds per batch, in execution order. `warmup` batches
/// run first and are not recorded; then every batch is timed `reps` times.
pub fn time_inference<S: Scalar>(
    model: &ModelState<S>,
    data: &Dataset,
    batch_size: usize,
    warmup: usize,
    reps: usize,
) -> Result<Vec<f64>> {
    check_task(model, data)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if reps == 0 || batch_size == 0 {
        return Err(Error::Validation("reps and batch_size must be positive".into()));
    }
    let batches = data
        .examples
        .chunks(batch_size)
        .map(|c| make_batch(c.iter()))
        .collect::<Result<Vec<_>>>()?;
    for b in batches.iter().cycle().take(warmup) {
        std::hint::black_box(model.forward(b, false)?);
    }
    let mut samples = Vec::with_capacity(batches.len() * reps);
    for b in &batches {
        for _ in 0..reps {
            let t = Instant::now();
            std::hint::black_box(model.forward(b, false)?);
            // floor at 1 ns so a sample is never zero
            samples.push((t.elapsed().as_secs_f64() * 1e3).max(1e-6));
        }
    }
    Ok(samples)
}

/// Peak resident set size of this process, where the OS reports it.
pub fn process_peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Time inference over `data` under the meter, with analytic or probed
/// peak memory.
pub fn measure_inference<S: Scalar>(
    model: &ModelState<S>,
    data: &Dataset,
    batch_size: usize,
    warmup: usize,
    reps: usize,
    settings: &MeterSettings,
) -> Result<GreenReport> {
    let workload = || {
        let latency_ms = time_inference(model, data, batch_size, warmup, reps)?;
        let seq_len = data.max_input_len();
        let analytic = estimate_memory(model.config(), batch_size.min(data.len()), seq_len, model.precision());
        let peak_memory_bytes = match settings.memory_mode {
            MemoryMode::Analytic => analytic,
            MemoryMode::Measured => process_peak_rss_bytes().unwrap_or(analytic),
        };
        Ok(WorkloadOutput { n_samples: data.len() * reps, latency_ms, peak_memory_bytes })
    };
    measure_run(workload, &ConstantPower(settings.device_power_w), &MonotonicClock::default(), settings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&s, 50.0).unwrap(), 50.0);
        assert_eq!(percentile(&s, 95.0).unwrap(), 95.0);
        assert_eq!(percentile(&s, 100.0).unwrap(), 100.0);
        assert_eq!(percentile(&[7.5], 1.0).unwrap(), 7.5);
        assert_eq!(percentile(&[2.0; 9], 95.0).unwrap(), 2.0);
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&s, 0.0).is_err());
    }

    #[test]
    fn energy_and_co2_arithmetic() {
        assert_eq!(estimate_energy(0.0, 100.0), 0.0);
        assert_eq!(estimate_energy(36.0, 100.0), 1e-3);
        assert_eq!(estimate_energy(72.0, 100.0), 2.0 * estimate_energy(36.0, 100.0));
        assert_eq!(co2_from_energy(1e-3, DEFAULT_CARBON_INTENSITY), 0.170043);
        assert_eq!(co2_from_energy(1.0, DEFAULT_CARBON_INTENSITY), 170.043);
        assert_eq!(co2_from_energy(1.0, 0.0), 0.0);
    }

    fn fixed_workload(clock: &ManualClock, secs: f64, n: usize) -> impl FnOnce() -> Result<WorkloadOutput> + '_ {
        move || {
            clock.advance(secs);
            Ok(WorkloadOutput { n_samples: n, latency_ms: vec![1.0, 3.0, 2.0], peak_memory_bytes: 10 })
        }
    }

    #[test]
    fn measure_run_with_manual_clock() {
        let clock = ManualClock::new();
        let settings = MeterSettings { device_power_w: 100.0, ..Default::default() };
        let r = measure_run(fixed_workload(&clock, 36.0, 10), &ConstantPower(100.0), &clock, &settings).unwrap();
        assert_eq!(r.co2_g, 0.170043);
        assert_eq!(r.total_wall_s, 36.0);
        assert!(r.is_consistent());
        let r2 = measure_run(fixed_workload(&clock, 36.0, 20), &ConstantPower(100.0), &clock, &settings).unwrap();
        assert_eq!(r2.co2_g_per_sample, r.co2_g_per_sample / 2.0);

        let long = MeterSettings { sampling_interval_s: 1000.0, ..settings };
        let r3 = measure_run(fixed_workload(&clock, 36.0, 10), &ConstantPower(100.0), &clock, &long).unwrap();
        assert_eq!(r3.energy_kwh, estimate_energy(36.0, 100.0));
    }

    #[test]
    fn failing_workload_propagates() {
        let clock = ManualClock::new();
        let r = measure_run(|| Err(Error::EmptyDataset), &ConstantPower(1.0), &clock, &MeterSettings::default());
        assert!(r.is_err());
    }
}
