use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::score::{score_config, Verdict};
use super::{
    sample_triple_with, DatasetConfig, EvalProtocol, GenerateError, GeneratorConfig, InitialLaw,
    SpreadConfig, EXPLOSION_FACTOR,
};
use crate::dsl::SystemSpec;
use crate::gradscore::ChannelStats;
use crate::rng::{split, tags, CounterRng, RNG_ALGORITHM};
use crate::solver::{regular_grid, solve_to_matrix, SolverOptions};

pub const LORENZ_BOXES: [(f64, f64); 3] = [(1.0, 3.0), (0.0, 2.0), (0.0, 2.0)];
/// Solve horizon for the Lorenz benchmark; each window spans about half of it.
pub const LORENZ_DURATION: f64 = 10.0;
pub const LORENZ_INSTANCES: usize = 200;
pub const LORENZ_SPLIT_FRACTION: f64 = 5.0 / 6.0;
pub const DEFAULT_SPLIT_FRACTION: f64 = 0.5;
/// Rejected instances tolerated, as a fraction of the target count.
pub const RETRY_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Step index inside the window.
    pub step: usize,
    pub t: f64,
    pub channel: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImtsInstance {
    pub id: usize,
    /// Seed of the accepted attempt.
    pub seed: u64,
    pub attempt: u64,
    pub onset: usize,
    pub initial: Vec<f64>,
    pub constants: Vec<f64>,
    pub duration: f64,
    /// Sorted by `(step, channel)`.
    pub observations: Vec<Observation>,
    /// Noiseless `window_steps x channels` block, row-major.
    pub ground_truth: Vec<f64>,
}

impl ImtsInstance {
    pub fn truth(&self, step: usize, channel: usize, channels: usize) -> f64 {
        self.ground_truth[step * channels + channel]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRejections {
    pub solver_failure: usize,
    pub explosion: usize,
}

impl InstanceRejections {
    pub fn total(&self) -> usize {
        self.solver_failure + self.explosion
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub system: String,
    /// Canonical DSL rendering of the system.
    pub system_source: String,
    pub channels: usize,
    pub spread: SpreadConfig,
    pub initial_law: InitialLaw,
    pub dataset: DatasetConfig,
    pub protocol: EvalProtocol,
    /// Master seed of the scoring stage (evaluation samples).
    pub eval_seed: u64,
    pub rng_algorithm: String,
    pub solver: SolverOptions,
    pub aggregated_jgd: f64,
    /// Per-channel mean/std over all ground-truth window values.
    pub normalization: Vec<ChannelStats>,
    /// Evaluation-stage channel stats used for the explosion check.
    pub guard: Vec<ChannelStats>,
    pub rejections: InstanceRejections,
    /// Slots whose first attempt was rejected.
    pub regenerated: usize,
    pub split_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub metadata: DatasetMetadata,
    pub instances: Vec<ImtsInstance>,
}

impl Dataset {
    /// Absolute times of the window steps of instance `i`.
    pub fn window_times(&self, i: usize) -> Vec<f64> {
        let inst = &self.instances[i];
        let cfg = &self.metadata.dataset;
        regular_grid(inst.duration, cfg.grid_steps)[inst.onset..inst.onset + cfg.window_steps].to_vec()
    }
}

enum Attempt {
    Accepted(ImtsInstance),
    SolverFailure,
    Explosion,
}

fn attempt_seed(master_seed: u64, slot: usize, attempt: u64) -> u64 {
    let slot_key = split(split(master_seed, tags::INSTANCE), slot as u64);
    split(split(slot_key, tags::ATTEMPT), attempt)
}

#[allow(clippy::too_many_arguments)]
fn try_instance(
    spec: &SystemSpec,
    spread: &SpreadConfig,
    law: &InitialLaw,
    guard: &[ChannelStats],
    ds: &DatasetConfig,
    options: SolverOptions,
    slot: usize,
    attempt: u64,
) -> Attempt {
    let seed = attempt_seed(ds.master_seed, slot, attempt);
    let triple = sample_triple_with(spec, spread, law, seed);
    let Ok(traj) = solve_to_matrix(spec, &triple.constants, &triple.initial, triple.duration, ds.grid_steps, options)
    else {
        return Attempt::SolverFailure;
    };
    let root = CounterRng::new(seed);
    let onset = root.child(tags::ONSET).below(ds.onset_range);
    let channels = spec.channels;
    let mut ground_truth = Vec::with_capacity(ds.window_steps * channels);
    for k in 0..ds.window_steps {
        ground_truth.extend_from_slice(traj.row(onset + k));
    }
    let exploded = ground_truth
        .chunks(channels)
        .any(|row| row.iter().zip(guard).any(|(v, g)| (v - g.mean).abs() > EXPLOSION_FACTOR * g.std));
    if exploded {
        return Attempt::Explosion;
    }
    let mut keep = root.child(tags::DROPOUT);
    let mut noise = root.child(tags::NOISE);
    let mut observations = Vec::new();
    for k in 0..ds.window_steps {
        let t = traj.grid()[onset + k];
        for c in 0..channels {
            let retained = keep.bernoulli(1.0 - ds.dropout);
            let eps = noise.standard_normal();
            if retained {
                let value = ground_truth[k * channels + c] + ds.noise_std * eps;
                observations.push(Observation { step: k, t, channel: c, value });
            }
        }
    }
    Attempt::Accepted(ImtsInstance {
        id: slot,
        seed,
        attempt,
        onset,
        initial: triple.initial,
        constants: triple.constants,
        duration: triple.duration,
        observations,
        ground_truth,
    })
}

fn ground_truth_stats(instances: &[ImtsInstance], channels: usize) -> Vec<ChannelStats> {
    (0..channels)
        .map(|c| {
            let mut count = 0usize;
            let mut sum = 0.0;
            for inst in instances {
                for row in inst.ground_truth.chunks(channels) {
                    sum += row[c];
                    count += 1;
                }
            }
            let mean = sum / count as f64;
            let mut ss = 0.0;
            for inst in instances {
                for row in inst.ground_truth.chunks(channels) {
                    ss += (row[c] - mean) * (row[c] - mean);
                }
            }
            ChannelStats { mean, std: (ss / count as f64).sqrt() }
        })
        .collect()
}

/// Scores `gen` to obtain the explosion guard, then materializes
/// `ds.instances` irregularly sampled instances.
///
/// Slot `i` tries seeds derived from `(ds.master_seed, i, attempt)` until one
/// is accepted. More than `floor(0.2 * instances)` rejections in total fail
/// the whole run. Output is independent of the worker count.
pub fn materialize_dataset(
    spec: &SystemSpec,
    gen: &GeneratorConfig,
    ds: &DatasetConfig,
    options: SolverOptions,
) -> Result<Dataset, GenerateError> {
    ds.validate()?;
    if let InitialLaw::Boxes { bounds } = &gen.initial_law {
        if bounds.len() != spec.channels {
            return Err(GenerateError::InvalidConfig(format!(
                "{} initial-value boxes for {} channels",
                bounds.len(),
                spec.channels
            )));
        }
    }
    let scored = score_config(spec, gen, options)?;
    let (Verdict::Accepted, Some(report), Some(guard)) = (scored.verdict, scored.report, scored.eval_stats) else {
        return Err(GenerateError::InvalidConfig(format!(
            "spreads {:?} are not admissible for `{}`: {:?}",
            gen.spread, spec.name, scored.verdict
        )));
    };

    let budget = (RETRY_FRACTION * ds.instances as f64).floor() as usize;
    let slots: Vec<(Option<ImtsInstance>, InstanceRejections)> = (0..ds.instances)
        .into_par_iter()
        .map(|slot| {
            let mut rejections = InstanceRejections::default();
            for attempt in 0..=budget as u64 {
                match try_instance(spec, &gen.spread, &gen.initial_law, &guard, ds, options, slot, attempt) {
                    Attempt::Accepted(inst) => return (Some(inst), rejections),
                    Attempt::SolverFailure => rejections.solver_failure += 1,
                    Attempt::Explosion => rejections.explosion += 1,
                }
            }
            (None, rejections)
        })
        .collect();

    let mut rejections = InstanceRejections::default();
    let mut regenerated = 0;
    let mut instances = Vec::with_capacity(ds.instances);
    for (inst, r) in slots {
        rejections.solver_failure += r.solver_failure;
        rejections.explosion += r.explosion;
        if r.total() > 0 {
            regenerated += 1;
        }
        if let Some(inst) = inst {
            instances.push(inst);
        }
    }
    if rejections.total() > budget || instances.len() < ds.instances {
        return Err(GenerateError::RetryBudgetExhausted { rejected: rejections.total(), budget });
    }

    let normalization = ground_truth_stats(&instances, spec.channels);
    Ok(Dataset {
        metadata: DatasetMetadata {
            system: spec.name.clone(),
            system_source: spec.render(),
            channels: spec.channels,
            spread: gen.spread,
            initial_law: gen.initial_law.clone(),
            dataset: *ds,
            protocol: gen.protocol,
            eval_seed: gen.master_seed,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            solver: options,
            aggregated_jgd: report.aggregated_jgd,
            normalization,
            guard,
            rejections,
            regenerated,
            split_fraction: DEFAULT_SPLIT_FRACTION,
        },
        instances,
    })
}

/// Generator and dataset configs of the Lorenz benchmark: literature
/// constants, initial states uniform in [`LORENZ_BOXES`], 200 instances.
pub fn lorenz_protocol(seed: u64) -> (GeneratorConfig, DatasetConfig) {
    let gen = GeneratorConfig {
        system: "lorenz".into(),
        spread: SpreadConfig { sigma_initial: 0.0, sigma_const: 0.0, sigma_dur: LORENZ_DURATION },
        initial_law: InitialLaw::Boxes { bounds: LORENZ_BOXES.to_vec() },
        protocol: EvalProtocol::default(),
        master_seed: seed,
    };
    let ds = DatasetConfig { instances: LORENZ_INSTANCES, master_seed: seed, ..DatasetConfig::default() };
    (gen, ds)
}

/// Materializes the Lorenz benchmark; `spec` must be the Lorenz system.
pub fn lorenz_dataset(spec: &SystemSpec, seed: u64, options: SolverOptions) -> Result<Dataset, GenerateError> {
    let (gen, ds) = lorenz_protocol(seed);
    let mut dataset = materialize_dataset(spec, &gen, &ds, options)?;
    dataset.metadata.split_fraction = LORENZ_SPLIT_FRACTION;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_system;
    use crate::registry::Registry;

    fn small(instances: usize, dropout: f64, noise_std: f64, seed: u64) -> DatasetConfig {
        DatasetConfig { instances, dropout, noise_std, master_seed: seed, ..DatasetConfig::default() }
    }

    fn harmonic_gen(seed: u64) -> GeneratorConfig {
        let mut gen = GeneratorConfig::new("harmonic", SpreadConfig::new(0.3, 0.1, 10.0).unwrap(), seed);
        gen.protocol.eval_samples = 30;
        gen
    }

    #[test]
    fn no_dropout_no_noise_observes_everything() {
        let spec = Registry::builtin().get("harmonic").unwrap();
        let d = materialize_dataset(&spec, &harmonic_gen(1), &small(12, 0.0, 0.0, 3), SolverOptions::default()).unwrap();
        assert_eq!(d.instances.len(), 12);
        for inst in &d.instances {
            assert_eq!(inst.observations.len(), 100 * 2);
            for o in &inst.observations {
                assert_eq!(o.value, inst.truth(o.step, o.channel, 2));
            }
            assert!(inst.onset < 100);
        }
    }

    #[test]
    fn window_arithmetic() {
        let spec = Registry::builtin().get("harmonic").unwrap();
        let d = materialize_dataset(&spec, &harmonic_gen(1), &small(20, 0.5, 0.05, 9), SolverOptions::default()).unwrap();
        for i in 0..d.instances.len() {
            let times = d.window_times(i);
            let span = times[99] - times[0];
            assert!((span - 99.0 / 199.0 * 10.0).abs() < 1e-12);
            for o in &d.instances[i].observations {
                assert_eq!(o.t, times[o.step]);
            }
            let keys: Vec<_> = d.instances[i].observations.iter().map(|o| (o.step, o.channel)).collect();
            let mut sorted = keys.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(keys, sorted);
        }
    }

    #[test]
    fn seed_isolation_and_worker_independence() {
        let spec = Registry::builtin().get("harmonic").unwrap();
        let gen = harmonic_gen(4);
        let a = materialize_dataset(&spec, &gen, &small(10, 0.8, 0.05, 5), SolverOptions::default()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool
            .install(|| materialize_dataset(&spec, &gen, &small(10, 0.8, 0.05, 5), SolverOptions::default()))
            .unwrap();
        assert_eq!(a, b);
        // a longer run shares its prefix
        let c = materialize_dataset(&spec, &gen, &small(15, 0.8, 0.05, 5), SolverOptions::default()).unwrap();
        assert_eq!(a.instances[..], c.instances[..10]);
        let other = materialize_dataset(&spec, &gen, &small(10, 0.8, 0.05, 6), SolverOptions::default()).unwrap();
        assert_ne!(a.instances[0], other.instances[0]);
    }

    #[test]
    fn retention_and_noise_statistics() {
        let spec = Registry::builtin().get("harmonic").unwrap();
        let d = materialize_dataset(&spec, &harmonic_gen(2), &small(300, 0.8, 0.05, 11), SolverOptions::default()).unwrap();
        let cells = 300.0 * 100.0 * 2.0;
        let observed: usize = d.instances.iter().map(|i| i.observations.len()).sum();
        let rate = observed as f64 / cells;
        assert!((rate - 0.2).abs() < 0.01, "{rate}");
        let msd = d
            .instances
            .iter()
            .flat_map(|i| i.observations.iter().map(move |o| (o.value - i.truth(o.step, o.channel, 2)).powi(2)))
            .sum::<f64>()
            / observed as f64;
        assert!((msd - 0.0025).abs() < 0.0003, "{msd}");
    }

    #[test]
    fn normalization_covers_ground_truth() {
        let spec = Registry::builtin().get("harmonic").unwrap();
        let d = materialize_dataset(&spec, &harmonic_gen(2), &small(8, 0.8, 0.05, 1), SolverOptions::default()).unwrap();
        let col: Vec<f64> = d.instances.iter().flat_map(|i| i.ground_truth.iter().step_by(2).copied()).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        assert!((d.metadata.normalization[0].mean - mean).abs() < 1e-12);
        assert_eq!(d.metadata.rng_algorithm, RNG_ALGORITHM);
    }

    #[test]
    fn rejected_spreads_are_refused() {
        let spec = parse_system("system q\nchannels 1\ninit 1\nd0 = x0 ^ 2\n").unwrap();
        let gen = GeneratorConfig::new("q", SpreadConfig::new(0.1, 0.0, 5.0).unwrap(), 1);
        let err = materialize_dataset(&spec, &gen, &small(5, 0.8, 0.05, 1), SolverOptions::default());
        assert!(matches!(err, Err(GenerateError::InvalidConfig(_))));
    }

    #[test]
    fn retry_budget() {
        // Blow-up time is 1/x0 with x0 in [0.5, 1.5]; T = 0.9 admits most
        // evaluation draws but rejects the x0 > 1.11 instances.
        let spec = parse_system("system q\nchannels 1\ninit 1\nd0 = x0 ^ 2\n").unwrap();
        let ds = small(50, 0.8, 0.05, 2);
        let gen = (0..100)
            .map(|seed| {
                let mut gen = GeneratorConfig::new("q", SpreadConfig::new(0.5, 0.0, 0.9).unwrap(), seed);
                gen.protocol.eval_samples = 3;
                gen
            })
            .find(|g| score_config(&spec, g, SolverOptions::default()).unwrap().verdict == Verdict::Accepted)
            .expect("some evaluation seed avoids blow-up");
        let out = materialize_dataset(&spec, &gen, &ds, SolverOptions::default());
        assert!(matches!(out, Err(GenerateError::RetryBudgetExhausted { budget: 10, .. })), "{out:?}");
    }

    #[test]
    fn lorenz_protocol_shape() {
        let spec = Registry::builtin().get("lorenz").unwrap();
        let d = lorenz_dataset(&spec, 3, SolverOptions::default()).unwrap();
        assert_eq!(d.instances.len(), 200);
        assert_eq!(d.metadata.channels, 3);
        assert_eq!(d.metadata.split_fraction, LORENZ_SPLIT_FRACTION);
        for inst in &d.instances {
            for (v, (lo, hi)) in inst.initial.iter().zip(LORENZ_BOXES) {
                assert!((lo..=hi).contains(v));
            }
            assert_eq!(inst.constants, vec![28.0, 10.0, 8.0 / 3.0]);
        }
    }
}
