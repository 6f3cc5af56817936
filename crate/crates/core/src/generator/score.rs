use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    sample_triple_with, EvalProtocol, GenerateError, GeneratorConfig, InitialLaw, SpreadConfig,
    DEFAULT_SIGMA_CONST_GRID, DEFAULT_SIGMA_DUR_GRID, DEFAULT_SIGMA_INITIAL_GRID, EXPLOSION_FACTOR,
};
use crate::dsl::SystemSpec;
use crate::gradscore::{jgd_estimate, ChannelStats, DifficultyReport, GriddedSample, ScoreError};
use crate::rng::{split, tags};
use crate::solver::{solve_to_matrix, SolverOptions, Trajectory};

/// Absolute JGD difference below which two configurations count as tied.
pub const JGD_TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectCause {
    SolverFailure,
    Explosion,
    DegenerateChannel,
}

impl std::fmt::Display for RejectCause {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RejectCause::SolverFailure => "solver_failure",
            RejectCause::Explosion => "explosion",
            RejectCause::DegenerateChannel => "degenerate_channel",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected(RejectCause),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOutcome {
    pub spread: SpreadConfig,
    pub verdict: Verdict,
    /// Present when accepted.
    pub report: Option<DifficultyReport>,
    /// Channel mean/std over all evaluation samples and steps; the
    /// reference for explosion checks on dataset instances.
    pub eval_stats: Option<Vec<ChannelStats>>,
}

impl ScoreOutcome {
    pub fn aggregated_jgd(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.aggregated_jgd)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectionLog {
    pub solver_failure: usize,
    pub explosion: usize,
    pub degenerate_channel: usize,
    pub verdicts: Vec<(SpreadConfig, Verdict)>,
}

impl RejectionLog {
    pub fn record(&mut self, spread: SpreadConfig, verdict: Verdict) {
        if let Verdict::Rejected(cause) = verdict {
            *self.counter(cause) += 1;
        }
        self.verdicts.push((spread, verdict));
    }

    fn counter(&mut self, cause: RejectCause) -> &mut usize {
        match cause {
            RejectCause::SolverFailure => &mut self.solver_failure,
            RejectCause::Explosion => &mut self.explosion,
            RejectCause::DegenerateChannel => &mut self.degenerate_channel,
        }
    }

    pub fn count(&self, cause: RejectCause) -> usize {
        match cause {
            RejectCause::SolverFailure => self.solver_failure,
            RejectCause::Explosion => self.explosion,
            RejectCause::DegenerateChannel => self.degenerate_channel,
        }
    }

    pub fn rejected(&self) -> usize {
        self.solver_failure + self.explosion + self.degenerate_channel
    }
}

/// First value, in (instance, step, channel) order, farther than
/// `10 * std` from its channel mean.
pub fn find_explosion(sample: &GriddedSample, stats: &[ChannelStats]) -> Option<(usize, usize, usize)> {
    for n in 0..sample.instances() {
        for m in 0..sample.steps() {
            for (c, s) in stats.iter().enumerate() {
                if (sample.get(n, m, c) - s.mean).abs() > EXPLOSION_FACTOR * s.std {
                    return Some((n, m, c));
                }
            }
        }
    }
    None
}

/// Seed of evaluation sample `index` under `master_seed`.
pub(crate) fn eval_seed(master_seed: u64, index: usize) -> u64 {
    split(split(master_seed, tags::EVAL), index as u64)
}

fn rejected(spread: SpreadConfig, cause: RejectCause) -> ScoreOutcome {
    ScoreOutcome { spread, verdict: Verdict::Rejected(cause), report: None, eval_stats: None }
}

/// Scores one spread configuration on `eval_samples` fully observed
/// trajectories, keeping only the final `score_window` steps for the JGD.
pub fn score_config(
    spec: &SystemSpec,
    cfg: &GeneratorConfig,
    options: SolverOptions,
) -> Result<ScoreOutcome, GenerateError> {
    cfg.spread.validate()?;
    cfg.protocol.validate()?;
    let spread = cfg.spread;
    let protocol = cfg.protocol;
    let solved: Vec<Option<Trajectory>> = (0..protocol.eval_samples)
        .into_par_iter()
        .map(|n| {
            let triple = sample_triple_with(spec, &spread, &cfg.initial_law, eval_seed(cfg.master_seed, n));
            solve_to_matrix(spec, &triple.constants, &triple.initial, triple.duration, protocol.eval_steps, options)
                .ok()
        })
        .collect();
    let Some(trajectories) = solved.into_iter().collect::<Option<Vec<_>>>() else {
        return Ok(rejected(spread, RejectCause::SolverFailure));
    };
    let sample = GriddedSample::from_trajectories(&trajectories, spread.sigma_dur)?;
    let stats = sample.channel_stats();
    if find_explosion(&sample, &stats).is_some() {
        return Ok(rejected(spread, RejectCause::Explosion));
    }
    let window = sample.window(protocol.eval_steps - protocol.score_window, protocol.score_window)?;
    match jgd_estimate(&window) {
        Ok(report) => Ok(ScoreOutcome {
            spread,
            verdict: Verdict::Accepted,
            report: Some(report),
            eval_stats: Some(stats),
        }),
        Err(ScoreError::DegenerateChannel { .. }) => Ok(rejected(spread, RejectCause::DegenerateChannel)),
        Err(e) => Err(e.into()),
    }
}

/// Candidate values per spread axis. `sigma_dur` holds absolute durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadGrid {
    pub sigma_initial: Vec<f64>,
    pub sigma_const: Vec<f64>,
    pub sigma_dur: Vec<f64>,
}

impl SpreadGrid {
    /// The default 3 x 3 x 5 grid with durations scaled by `duration_unit`.
    pub fn defaults(duration_unit: f64) -> Self {
        Self {
            sigma_initial: DEFAULT_SIGMA_INITIAL_GRID.to_vec(),
            sigma_const: DEFAULT_SIGMA_CONST_GRID.to_vec(),
            sigma_dur: DEFAULT_SIGMA_DUR_GRID.iter().map(|m| m * duration_unit).collect(),
        }
    }

    /// All grid points in lexicographic `(initial, const, dur)` order.
    pub fn points(&self) -> Vec<SpreadConfig> {
        let axis = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        let (a, b, c) = (axis(&self.sigma_initial), axis(&self.sigma_const), axis(&self.sigma_dur));
        let mut out = Vec::with_capacity(a.len() * b.len() * c.len());
        for &i in &a {
            for &k in &b {
                for &d in &c {
                    out.push(SpreadConfig { sigma_initial: i, sigma_const: k, sigma_dur: d });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimized {
    Best(ScoreOutcome),
    AllRejected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    pub result: Optimized,
    pub log: RejectionLog,
    /// Every grid point in lexicographic order.
    pub evaluations: Vec<ScoreOutcome>,
}

impl OptimizeOutcome {
    pub fn best(&self) -> Option<&ScoreOutcome> {
        match &self.result {
            Optimized::Best(o) => Some(o),
            Optimized::AllRejected => None,
        }
    }
}

/// Index of the accepted outcome with the largest aggregated JGD. `outcomes`
/// must be in lexicographic spread order; near-ties keep the earlier one.
pub(crate) fn select_best(outcomes: &[ScoreOutcome]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in outcomes.iter().enumerate() {
        let Some(jgd) = o.aggregated_jgd() else { continue };
        match best {
            Some((_, b)) if jgd <= b + JGD_TIE_TOLERANCE => {}
            _ => best = Some((i, jgd)),
        }
    }
    best.map(|(i, _)| i)
}

/// Exhaustive search over `grid` for the spreads maximizing aggregated JGD.
/// Every grid point is scored with the same evaluation seeds.
pub fn optimize_spreads(
    spec: &SystemSpec,
    grid: &SpreadGrid,
    protocol: EvalProtocol,
    initial_law: &InitialLaw,
    master_seed: u64,
    options: SolverOptions,
) -> Result<OptimizeOutcome, GenerateError> {
    let points = grid.points();
    if points.is_empty() {
        return Err(GenerateError::InvalidConfig("spread grid has no points".into()));
    }
    let evaluations: Vec<ScoreOutcome> = points
        .par_iter()
        .map(|&spread| {
            let cfg = GeneratorConfig {
                system: spec.name.clone(),
                spread,
                initial_law: initial_law.clone(),
                protocol,
                master_seed,
            };
            score_config(spec, &cfg, options)
        })
        .collect::<Result<_, _>>()?;
    let mut log = RejectionLog::default();
    for o in &evaluations {
        log.record(o.spread, o.verdict);
    }
    let result = match select_best(&evaluations) {
        Some(i) => Optimized::Best(evaluations[i].clone()),
        None => Optimized::AllRejected,
    };
    Ok(OptimizeOutcome { result, log, evaluations })
}
