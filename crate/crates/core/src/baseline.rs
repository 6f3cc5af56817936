//! Forecasting tasks over generated datasets, time-constant baselines, and
//! the k-fold MSE protocol.
//!
//! Values are normalized per channel with the dataset's ground-truth
//! statistics. Targets are the noiseless ground truth unless noisy targets
//! are requested. MSE pools every query of every test instance.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::{Dataset, Observation};
use crate::gradscore::ChannelStats;
use crate::rng::{split, tags, CounterRng};

pub const DEFAULT_FOLDS: usize = 5;
pub const TRAIN_FRACTION: f64 = 0.7;
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("split fraction must lie in (0, 1), got {0}")]
    InvalidSplit(f64),
    #[error("instance {instance} has no observations after the split time")]
    EmptyHorizon { instance: usize },
    #[error("length mismatch: {targets} targets vs {predictions} predictions")]
    LengthMismatch { targets: usize, predictions: usize },
    #[error("need at least {needed} {what}, got {found}")]
    TooFew { what: &'static str, needed: usize, found: usize },
    #[error("fold {fold} has no test queries")]
    EmptyTestFold { fold: usize },
    #[error("rank correlation is undefined: all values of one variable are equal")]
    Degenerate,
    #[error("unknown baseline `{0}`")]
    UnknownBaseline(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    HistoryMean,
    LastObservation,
    GlobalTrainMean,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::HistoryMean, Baseline::LastObservation, Baseline::GlobalTrainMean];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::HistoryMean => "history_mean",
            Baseline::LastObservation => "last_observation",
            Baseline::GlobalTrainMean => "global_train_mean",
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Baseline {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| EvalError::UnknownBaseline(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub t: f64,
    pub channel: usize,
}

/// One instance cut at `t_split`; all values normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastTask {
    pub instance: usize,
    pub t_split: f64,
    pub channels: usize,
    /// Observations with `t <= t_split`, in time order.
    pub history: Vec<Observation>,
    pub queries: Vec<Query>,
    pub answers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet {
    pub tasks: Vec<ForecastTask>,
    /// Instance ids skipped for lack of forecast-horizon observations.
    pub skipped: Vec<usize>,
}

fn normalize(v: f64, s: &ChannelStats) -> f64 {
    let scale = if s.std > 0.0 { s.std } else { 1.0 };
    (v - s.mean) / scale
}

/// Splits instance `index` at `window start + fraction * window span`.
/// Queries are the retained observation slots after the split.
pub fn make_task(
    dataset: &Dataset,
    index: usize,
    split_fraction: f64,
    noisy_targets: bool,
) -> Result<ForecastTask, EvalError> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(EvalError::InvalidSplit(split_fraction));
    }
    let inst = &dataset.instances[index];
    let stats = &dataset.metadata.normalization;
    let channels = dataset.metadata.channels;
    let times = dataset.window_times(index);
    let (start, end) = (times[0], times[times.len() - 1]);
    let t_split = start + split_fraction * (end - start);
    let mut task = ForecastTask {
        instance: inst.id,
        t_split,
        channels,
        history: Vec::new(),
        queries: Vec::new(),
        answers: Vec::new(),
    };
    for o in &inst.observations {
        let s = &stats[o.channel];
        if o.t <= t_split {
            task.history.push(Observation { value: normalize(o.value, s), ..*o });
        } else {
            task.queries.push(Query { t: o.t, channel: o.channel });
            let y = if noisy_targets { o.value } else { inst.truth(o.step, o.channel, channels) };
            task.answers.push(normalize(y, s));
        }
    }
    if task.queries.is_empty() {
        return Err(EvalError::EmptyHorizon { instance: inst.id });
    }
    Ok(task)
}

pub fn make_tasks(dataset: &Dataset, split_fraction: f64, noisy_targets: bool) -> Result<TaskSet, EvalError> {
    let mut set = TaskSet { tasks: Vec::new(), skipped: Vec::new() };
    for i in 0..dataset.instances.len() {
        match make_task(dataset, i, split_fraction, noisy_targets) {
            Ok(task) => set.tasks.push(task),
            Err(EvalError::EmptyHorizon { instance }) => set.skipped.push(instance),
            Err(e) => return Err(e),
        }
    }
    Ok(set)
}

/// Per-channel history mean, last value, and count.
fn history_summary(task: &ForecastTask) -> Vec<(f64, f64, usize)> {
    let mut acc = vec![(0.0, 0.0, 0usize); task.channels];
    let mut last_t = vec![f64::NEG_INFINITY; task.channels];
    for o in &task.history {
        let a = &mut acc[o.channel];
        a.0 += o.value;
        a.2 += 1;
        if o.t >= last_t[o.channel] {
            last_t[o.channel] = o.t;
            a.1 = o.value;
        }
    }
    for a in &mut acc {
        if a.2 > 0 {
            a.0 /= a.2 as f64;
        }
    }
    acc
}

/// One constant per channel; query times are never consulted.
///
/// Channels without history fall back to `train_means[c]` (or 0 when absent).
pub fn channel_constants(task: &ForecastTask, mode: Baseline, train_means: &[f64]) -> Vec<f64> {
    let fallback = |c: usize| train_means.get(c).copied().unwrap_or(0.0);
    history_summary(task)
        .into_iter()
        .enumerate()
        .map(|(c, (mean, last, n))| match mode {
            Baseline::GlobalTrainMean => fallback(c),
            _ if n == 0 => fallback(c),
            Baseline::HistoryMean => mean,
            Baseline::LastObservation => last,
        })
        .collect()
}

pub fn predict_constant(task: &ForecastTask, mode: Baseline, train_means: &[f64]) -> Vec<f64> {
    let constants = channel_constants(task, mode, train_means);
    task.queries.iter().map(|q| constants[q.channel]).collect()
}

/// Sum of squared errors and count.
fn sse(y: &[f64], yhat: &[f64]) -> Result<(f64, usize), EvalError> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch { targets: y.len(), predictions: yhat.len() });
    }
    Ok((y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum(), y.len()))
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    let (s, n) = sse(y, yhat)?;
    if n == 0 {
        return Err(EvalError::TooFew { what: "targets", needed: 1, found: 0 });
    }
    Ok(s / n as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Sorts and shuffles `ids` once with `seed`, then rotates the order by
/// `fold * n / folds` per fold. Train gets `floor(0.7 n)`, validation
/// `floor(0.2 n)`, test the remainder.
pub fn split_plans(ids: &[usize], folds: usize, seed: u64) -> Vec<SplitPlan> {
    let mut order = ids.to_vec();
    order.sort_unstable();
    order.dedup();
    CounterRng::new(split(seed, tags::FOLDS)).shuffle(&mut order);
    let n = order.len();
    let n_train = (TRAIN_FRACTION * n as f64).floor() as usize;
    let n_val = (VAL_FRACTION * n as f64).floor() as usize;
    (0..folds)
        .map(|fold| {
            let mut rotated = order.clone();
            if n > 0 {
                rotated.rotate_left(fold * n / folds % n);
            }
            let test = rotated.split_off(n_train + n_val);
            let val = rotated.split_off(n_train);
            SplitPlan { fold, train: rotated, val, test }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub baselines: Vec<Baseline>,
    pub folds: usize,
    pub split_fraction: f64,
    pub seed: u64,
    pub noisy_targets: bool,
}

impl EvalConfig {
    pub fn new(split_fraction: f64, seed: u64) -> Self {
        Self { baselines: Baseline::ALL.to_vec(), folds: DEFAULT_FOLDS, split_fraction, seed, noisy_targets: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub baseline: Baseline,
    pub fold: usize,
    pub mse: f64,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineSummary {
    pub baseline: Baseline,
    pub mean: f64,
    /// Population standard deviation across folds.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub folds: Vec<FoldResult>,
    pub summary: Vec<BaselineSummary>,
    pub tasks: usize,
    pub skipped: usize,
}

impl EvalReport {
    /// The baseline with the lowest mean test MSE.
    pub fn best(&self) -> Option<&BaselineSummary> {
        self.summary.iter().min_by(|a, b| a.mean.total_cmp(&b.mean))
    }
}

/// Train-split channel means of the observed (normalized) history and
/// horizon values.
fn train_means(tasks: &[&ForecastTask], channels: usize) -> Vec<f64> {
    let mut sum = vec![0.0; channels];
    let mut count = vec![0usize; channels];
    for task in tasks {
        for o in &task.history {
            sum[o.channel] += o.value;
            count[o.channel] += 1;
        }
    }
    sum.iter().zip(&count).map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 }).collect()
}

pub fn evaluate(dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    if cfg.folds == 0 {
        return Err(EvalError::TooFew { what: "folds", needed: 1, found: 0 });
    }
    let set = make_tasks(dataset, cfg.split_fraction, cfg.noisy_targets)?;
    let by_id: std::collections::HashMap<usize, &ForecastTask> = set.tasks.iter().map(|t| (t.instance, t)).collect();
    let ids: Vec<usize> = dataset.instances.iter().map(|i| i.id).collect();
    let plans = split_plans(&ids, cfg.folds, cfg.seed);
    let channels = dataset.metadata.channels;

    let mut folds = Vec::new();
    for plan in &plans {
        let pick = |ids: &[usize]| ids.iter().filter_map(|i| by_id.get(i).copied()).collect::<Vec<_>>();
        let train = pick(&plan.train);
        let test = pick(&plan.test);
        let means = train_means(&train, channels);
        for &baseline in &cfg.baselines {
            let (mut total, mut n) = (0.0, 0);
            for task in &test {
                let (s, k) = sse(&task.answers, &predict_constant(task, baseline, &means))?;
                total += s;
                n += k;
            }
            if n == 0 {
                return Err(EvalError::EmptyTestFold { fold: plan.fold });
            }
            folds.push(FoldResult { baseline, fold: plan.fold, mse: total / n as f64, queries: n });
        }
    }
    let summary = cfg
        .baselines
        .iter()
        .map(|&baseline| {
            let v: Vec<f64> = folds.iter().filter(|f| f.baseline == baseline).map(|f| f.mse).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
            BaselineSummary { baseline, mean, std: var.sqrt() }
        })
        .collect();
    Ok(EvalReport { folds, summary, tasks: set.tasks.len(), skipped: set.skipped.len() })
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch { targets: x.len(), predictions: y.len() });
    }
    if x.len() < 3 {
        return Err(EvalError::TooFew { what: "datasets", needed: 3, found: x.len() });
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::Degenerate);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(step: usize, t: f64, channel: usize, value: f64) -> Observation {
        Observation { step, t, channel, value }
    }

    fn task(history: Vec<Observation>, queries: Vec<Query>, channels: usize) -> ForecastTask {
        let answers = vec![0.0; queries.len()];
        ForecastTask { instance: 0, t_split: 0.5, channels, history, queries, answers }
    }

    #[test]
    fn history_mean_and_last_observation() {
        let t = task(
            vec![obs(0, 0.1, 0, 1.0), obs(1, 0.2, 0, 3.0), obs(1, 0.2, 1, 4.0), obs(2, 0.3, 1, 7.0)],
            vec![Query { t: 0.6, channel: 0 }, Query { t: 0.7, channel: 0 }, Query { t: 0.8, channel: 1 }],
            2,
        );
        assert_eq!(predict_constant(&t, Baseline::HistoryMean, &[]), vec![2.0, 2.0, 5.5]);
        assert_eq!(predict_constant(&t, Baseline::LastObservation, &[]), vec![3.0, 3.0, 7.0]);
        assert_eq!(predict_constant(&t, Baseline::GlobalTrainMean, &[0.5, -0.5]), vec![0.5, 0.5, -0.5]);
    }

    #[test]
    fn fallbacks() {
        let t = task(vec![obs(0, 0.1, 0, 1.0)], vec![Query { t: 0.6, channel: 1 }], 2);
        assert_eq!(predict_constant(&t, Baseline::HistoryMean, &[9.0, 0.0]), vec![0.0]);
        assert_eq!(predict_constant(&t, Baseline::LastObservation, &[9.0, 0.25]), vec![0.25]);
        assert_eq!(predict_constant(&t, Baseline::HistoryMean, &[]), vec![0.0]);
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(mse(&[0.0], &[]), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn split_partition_is_exact() {
        for n in [10usize, 17, 200, 2000] {
            let ids: Vec<usize> = (0..n).collect();
            let plans = split_plans(&ids, 5, 42);
            assert_eq!(plans.len(), 5);
            for p in &plans {
                assert_eq!(p.train.len(), 7 * n / 10);
                assert_eq!(p.val.len(), 2 * n / 10);
                let mut all: Vec<usize> = p.train.iter().chain(&p.val).chain(&p.test).copied().collect();
                all.sort();
                assert_eq!(all, ids);
            }
            assert_ne!(plans[0].test, plans[1].test);
        }
        let mut shuffled: Vec<usize> = (0..50).rev().collect();
        shuffled.swap(3, 17);
        assert_eq!(split_plans(&shuffled, 5, 1), split_plans(&(0..50).collect::<Vec<_>>(), 5, 1));
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(EvalError::Degenerate));
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn baseline_names_roundtrip() {
        for b in Baseline::ALL {
            assert_eq!(b.name().parse::<Baseline>().unwrap(), b);
        }
        assert!("mean".parse::<Baseline>().is_err());
    }

    fn arb_task() -> impl Strategy<Value = ForecastTask> {
        (1usize..4)
            .prop_flat_map(|channels| {
                (
                    Just(channels),
                    prop::collection::vec((0..channels, 0.0f64..0.5, -5.0f64..5.0), 0..20),
                    prop::collection::vec((0..channels, 0.5f64..1.0, -5.0f64..5.0), 1..20),
                )
            })
            .prop_map(|(channels, hist, qs)| {
                let mut history: Vec<Observation> =
                    hist.into_iter().map(|(c, t, v)| obs(0, t, c, v)).collect();
                history.sort_by(|a, b| a.t.total_cmp(&b.t));
                let queries = qs.iter().map(|&(c, t, _)| Query { t, channel: c }).collect();
                let answers = qs.iter().map(|&(_, _, v)| v).collect();
                ForecastTask { instance: 0, t_split: 0.5, channels, history, queries, answers }
            })
    }

    proptest! {
        #[test]
        fn predictions_are_constant_per_channel(t in arb_task(), m0 in -1.0f64..1.0) {
            for mode in Baseline::ALL {
                let p = predict_constant(&t, mode, &[m0, 0.0, 0.3]);
                for c in 0..t.channels {
                    let vals: Vec<f64> = t.queries.iter().zip(&p).filter(|(q, _)| q.channel == c).map(|(_, v)| *v).collect();
                    prop_assert!(vals.windows(2).all(|w| w[0].to_bits() == w[1].to_bits()));
                }
            }
        }

        #[test]
        fn blind_to_query_times(t in arb_task(), seed in any::<u64>()) {
            let mut permuted = t.clone();
            let mut times: Vec<f64> = permuted.queries.iter().map(|q| q.t).collect();
            CounterRng::new(seed).shuffle(&mut times);
            for (q, time) in permuted.queries.iter_mut().zip(times) {
                q.t = time;
            }
            for mode in Baseline::ALL {
                let a = mse(&t.answers, &predict_constant(&t, mode, &[])).unwrap();
                let b = mse(&permuted.answers, &predict_constant(&permuted, mode, &[])).unwrap();
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn mse_ignores_pair_order(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50), seed in any::<u64>()) {
            let (y, yh): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let mut shuffled = pairs.clone();
            CounterRng::new(seed).shuffle(&mut shuffled);
            let (y2, yh2): (Vec<f64>, Vec<f64>) = shuffled.into_iter().unzip();
            let (a, b) = (mse(&y, &yh).unwrap(), mse(&y2, &yh2).unwrap());
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
}
