//! Two-stage function generator: sample `(x0, a, T)` around literature
//! values, score the resulting trajectory family, search spreads, and
//! materialize irregularly sampled datasets.

mod dataset;
mod score;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::SystemSpec;
use crate::gradscore::ScoreError;
use crate::rng::{tags, CounterRng};

pub use dataset::{
    lorenz_dataset, lorenz_protocol, materialize_dataset, Dataset, DatasetMetadata, ImtsInstance,
    InstanceRejections, Observation, DEFAULT_SPLIT_FRACTION, LORENZ_BOXES, LORENZ_DURATION,
    LORENZ_INSTANCES, LORENZ_SPLIT_FRACTION, RETRY_FRACTION,
};
pub use score::{
    find_explosion, optimize_spreads, score_config, OptimizeOutcome, Optimized, RejectCause,
    RejectionLog, ScoreOutcome, SpreadGrid, Verdict, JGD_TIE_TOLERANCE,
};

pub const DEFAULT_SIGMA_INITIAL_GRID: [f64; 3] = [0.1, 0.3, 0.5];
pub const DEFAULT_SIGMA_CONST_GRID: [f64; 3] = [0.05, 0.1, 0.3];
/// Multiples of the system's reference duration.
pub const DEFAULT_SIGMA_DUR_GRID: [f64; 5] = [0.33, 1.0, 3.3, 10.0, 30.0];
pub const EXPLOSION_FACTOR: f64 = 10.0;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("retry budget exhausted: {rejected} instances rejected, budget {budget}")]
    RetryBudgetExhausted { rejected: usize, budget: usize },
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Widths of the initial-value, constant, and duration distributions.
/// `sigma_dur` is an absolute duration in the system's time unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadConfig {
    pub sigma_initial: f64,
    pub sigma_const: f64,
    pub sigma_dur: f64,
}

impl SpreadConfig {
    pub fn new(sigma_initial: f64, sigma_const: f64, sigma_dur: f64) -> Result<Self, GenerateError> {
        let s = Self { sigma_initial, sigma_const, sigma_dur };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        let ok = self.sigma_initial >= 0.0
            && self.sigma_const >= 0.0
            && self.sigma_dur > 0.0
            && self.sigma_initial.is_finite()
            && self.sigma_const.is_finite()
            && self.sigma_dur.is_finite();
        if ok {
            Ok(())
        } else {
            Err(GenerateError::InvalidConfig(format!("invalid spreads {self:?}")))
        }
    }

    /// Lexicographic sort key `(initial, const, dur)`.
    pub fn key(&self) -> (f64, f64, f64) {
        (self.sigma_initial, self.sigma_const, self.sigma_dur)
    }
}

/// How initial states are drawn.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    /// Multiplicative uniform spread around the literature values.
    #[default]
    Spread,
    /// Independent uniform draws from per-channel intervals.
    Boxes { bounds: Vec<(f64, f64)> },
}

/// Evaluation protocol for scoring one spread configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub eval_samples: usize,
    pub eval_steps: usize,
    pub score_window: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { eval_samples: 100, eval_steps: 100, score_window: 50 }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<(), GenerateError> {
        if self.eval_samples == 0 || self.eval_steps < 2 || self.score_window < 2 || self.score_window > self.eval_steps
        {
            return Err(GenerateError::InvalidConfig(format!("invalid evaluation protocol {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub system: String,
    pub spread: SpreadConfig,
    #[serde(default)]
    pub initial_law: InitialLaw,
    pub protocol: EvalProtocol,
    pub master_seed: u64,
}

impl GeneratorConfig {
    pub fn new(system: impl Into<String>, spread: SpreadConfig, master_seed: u64) -> Self {
        Self {
            system: system.into(),
            spread,
            initial_law: InitialLaw::Spread,
            protocol: EvalProtocol::default(),
            master_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub instances: usize,
    pub grid_steps: usize,
    pub window_steps: usize,
    pub onset_range: usize,
    pub dropout: f64,
    pub noise_std: f64,
    pub master_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            instances: 2000,
            grid_steps: 200,
            window_steps: 100,
            onset_range: 100,
            dropout: 0.8,
            noise_std: 0.05,
            master_seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), GenerateError> {
        let bad = |m: String| Err(GenerateError::InvalidConfig(m));
        if self.instances == 0 {
            return bad("instances must be positive".into());
        }
        if self.window_steps < 2 || self.onset_range == 0 {
            return bad("window_steps must be >= 2 and onset_range >= 1".into());
        }
        if self.window_steps + self.onset_range > self.grid_steps {
            return bad(format!(
                "window_steps + onset_range ({}) exceeds grid_steps ({})",
                self.window_steps + self.onset_range,
                self.grid_steps
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledTriple {
    pub initial: Vec<f64>,
    pub constants: Vec<f64>,
    pub duration: f64,
}

/// `v * (1 + sigma * u)` for `u ~ U(-1, 1)`; additive `sigma * u` when `v == 0`.
/// Always consumes one draw so the stream layout does not depend on `sigma`.
fn perturb(value: f64, sigma: f64, rng: &mut CounterRng) -> f64 {
    let u = rng.symmetric();
    if sigma == 0.0 {
        value
    } else if value == 0.0 {
        sigma * u
    } else {
        value * (1.0 + sigma * u)
    }
}

/// Draws `(x0, a, T)` from the stream keyed by `seed`.
///
/// Initial values are drawn first in channel order, then constants in
/// declaration order. Zero spreads return literature values exactly.
pub fn sample_triple(spec: &SystemSpec, spread: &SpreadConfig, seed: u64) -> SampledTriple {
    sample_triple_with(spec, spread, &InitialLaw::Spread, seed)
}

pub fn sample_triple_with(spec: &SystemSpec, spread: &SpreadConfig, law: &InitialLaw, seed: u64) -> SampledTriple {
    let mut rng = CounterRng::new(seed).child(tags::TRIPLE);
    let initial = match law {
        InitialLaw::Spread => spec
            .initial_values
            .iter()
            .map(|&v| perturb(v, spread.sigma_initial, &mut rng))
            .collect(),
        InitialLaw::Boxes { bounds } => bounds.iter().map(|&(lo, hi)| rng.uniform(lo, hi)).collect(),
    };
    let constants = spec
        .constants
        .iter()
        .map(|&(_, v)| perturb(v, spread.sigma_const, &mut rng))
        .collect();
    SampledTriple { initial, constants, duration: spread.sigma_dur }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::Registry;

    #[test]
    fn zero_spread_returns_literature_values() {
        let reg = Registry::builtin();
        let spec = reg.get("lorenz").unwrap();
        let spread = SpreadConfig::new(0.0, 0.0, 7.5).unwrap();
        for seed in [0, 1, u64::MAX] {
            let triple = sample_triple(&spec, &spread, seed);
            assert_eq!(triple.initial, spec.initial_values);
            assert_eq!(triple.constants, spec.constant_values());
            assert_eq!(triple.duration, 7.5);
        }
    }

    #[test]
    fn multiplicative_uniform_moments() {
        let reg = Registry::builtin();
        let spec = reg.get("lin").unwrap();
        let spread = SpreadConfig::new(0.5, 0.0, 1.0).unwrap();
        let draws: Vec<f64> = (0..10_000u64).map(|s| sample_triple(&spec, &spread, s).initial[0]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!(draws.iter().all(|&x| (0.5..=1.5).contains(&x)));
    }

    #[test]
    fn zero_literature_values_move_additively() {
        let reg = Registry::builtin();
        let spec = reg.get("harmonic").unwrap();
        let spread = SpreadConfig::new(0.3, 0.0, 1.0).unwrap();
        let draws: Vec<f64> = (0..1000u64).map(|s| sample_triple(&spec, &spread, s).initial[1]).collect();
        assert!(draws.iter().all(|&v| v.abs() <= 0.3));
        assert!(draws.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let reg = Registry::builtin();
        let spec = reg.get("lotka_volterra").unwrap();
        let spread = SpreadConfig::new(0.3, 0.1, 3.3).unwrap();
        let a = sample_triple(&spec, &spread, 99);
        let b = sample_triple(&spec, &spread, 99);
        assert_eq!(a, b);
        // frozen draw: guards against silent changes to the stream layout
        let bits: Vec<u64> = a.initial.iter().chain(&a.constants).map(|v| v.to_bits()).collect();
        assert_eq!(bits, FROZEN_LV_SEED99.to_vec());
        assert_ne!(a, sample_triple(&spec, &spread, 100));
    }

    const FROZEN_LV_SEED99: [u64; 6] = [
        4622921922321733569,
        4617751413610936556,
        4609730619956483524,
        4606337393864012314,
        4607425272422352171,
        4613788411501904221,
    ];

    #[test]
    fn boxes_law() {
        let reg = Registry::builtin();
        let spec = reg.get("lorenz").unwrap();
        let law = InitialLaw::Boxes { bounds: LORENZ_BOXES.to_vec() };
        let spread = SpreadConfig::new(0.0, 0.0, 1.0).unwrap();
        for seed in 0..500 {
            let t = sample_triple_with(&spec, &spread, &law, seed);
            for (v, (lo, hi)) in t.initial.iter().zip(LORENZ_BOXES) {
                assert!((lo..=hi).contains(v));
            }
            assert_eq!(t.constants, vec![28.0, 10.0, 8.0 / 3.0]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SpreadConfig::new(-0.1, 0.0, 1.0).is_err());
        assert!(SpreadConfig::new(0.1, 0.0, 0.0).is_err());
        assert!(DatasetConfig::default().validate().is_ok());
        assert!(DatasetConfig { onset_range: 101, ..DatasetConfig::default() }.validate().is_err());
        assert!(DatasetConfig { dropout: 1.0, ..DatasetConfig::default() }.validate().is_err());
        assert!(EvalProtocol { score_window: 101, ..EvalProtocol::default() }.validate().is_err());
    }
}
