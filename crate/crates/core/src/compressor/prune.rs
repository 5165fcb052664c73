use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_parameters, ArchConfig, ModelState};
use crate::nas::{proxy_train, Component, Genome, ProxyData, ProxySettings, SearchSpace};
use crate::numcore::Scalar;
use crate::rng::derive_seed;
use crate::trainer::EvalMetrics;

pub const DEFAULT_EPSILON: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneDecision {
    Accepted,
    Reverted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub component: Component,
    pub from_value: usize,
    pub to_value: usize,
    pub metric_before: f64,
    pub metric_after: f64,
    pub parameters_before: usize,
    pub parameters_after: usize,
    pub decision: PruneDecision,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneLog {
    pub records: Vec<PruneRecord>,
    /// Components whose ladder ran out before any rejection.
    pub exhausted: Vec<Component>,
}

impl PruneLog {
    /// Applies the accepted records to `input` in order.
    pub fn replay(&self, input: &ArchConfig) -> Result<ArchConfig> {
        let mut g = Genome::of(input);
        for r in self.records.iter().filter(|r| r.decision == PruneDecision::Accepted) {
            if g.get(r.component) != r.from_value {
                return Err(Error::Validation(format!(
                    "record {:?} {} -> {} does not start from {}",
                    r.component,
                    r.from_value,
                    r.to_value,
                    g.get(r.component)
                )));
            }
            g = g.with(r.component, r.to_value);
        }
        Ok(g.apply(input))
    }

    pub fn accepted(&self) -> usize {
        self.records.iter().filter(|r| r.decision == PruneDecision::Accepted).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSettings {
    /// Largest tolerated drop of the primary metric per accepted step.
    pub epsilon: f64,
    pub proxy: ProxySettings,
    pub space: SearchSpace,
}

impl Default for PruneSettings {
    fn default() -> Self {
        Self { epsilon: DEFAULT_EPSILON, proxy: ProxySettings::default(), space: SearchSpace::default() }
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome<S> {
    pub config: ArchConfig,
    pub log: PruneLog,
    /// Proxy-trained weights of the final accepted configuration.
    pub model: ModelState<S>,
    pub metrics: EvalMetrics,
}

/// Greedy accept/revert pruning: each component in turn is stepped down
/// its ladder while the proxy-trained primary metric drops by at most
/// `epsilon` against the last accepted configuration. Every candidate is
/// trained from scratch with its own derived seed.
pub fn structured_prune<S: Scalar>(
    arch: &ArchConfig,
    data: ProxyData<'_, S>,
    settings: &PruneSettings,
    seed: u64,
) -> Result<PruneOutcome<S>> {
    arch.validate()?;
    settings.space.validate()?;
    if settings.epsilon.is_nan() {
        return Err(Error::InvalidConfig("epsilon must not be NaN".into()));
    }
    let mut trials = 0u64;
    let mut next_seed = || {
        trials += 1;
        derive_seed(seed, &[trials])
    };
    let (mut model, mut metrics) = proxy_train(arch, data, &settings.proxy, next_seed())?;
    let mut current = Genome::of(arch);
    let mut log = PruneLog::default();

    for c in Component::ALL {
        loop {
            let Some(to) = settings.space.step_down(c, current.get(c)) else {
                log.exhausted.push(c);
                break;
            };
            let candidate = current.with(c, to);
            let before = metrics.primary();
            let outcome = proxy_train(&candidate.apply(arch), data, &settings.proxy, next_seed());
            // a diverged candidate counts as an unbounded drop
            let (cand_model, cand_metrics, after) = match outcome {
                Ok((m, e)) => {
                    let p = e.primary();
                    (Some(m), Some(e), if p.is_finite() { p } else { f64::NEG_INFINITY })
                }
                Err(Error::NonFinite(_)) => (None, None, f64::NEG_INFINITY),
                Err(e) => return Err(e),
            };
            let accept = before - after <= settings.epsilon;
            log.records.push(PruneRecord {
                component: c,
                from_value: current.get(c),
                to_value: to,
                metric_before: before,
                metric_after: after,
                parameters_before: count_parameters(&current.apply(arch)),
                parameters_after: count_parameters(&candidate.apply(arch)),
                decision: if accept { PruneDecision::Accepted } else { PruneDecision::Reverted },
            });
            match (accept, cand_model, cand_metrics) {
                (true, Some(m), Some(e)) => {
                    current = candidate;
                    model = m;
                    metrics = e;
                }
                _ => break,
            }
        }
    }
    Ok(PruneOutcome { config: current.apply(arch), log, model, metrics })
}
