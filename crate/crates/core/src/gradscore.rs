//! Gradient-deviation difficulty scores on evenly spaced samples.
//!
//! * MGD of one series: population std of its divided differences
//!   `(x_t - x_{t-1}) / eps`.
//! * MPGD of a family: mean over time steps of the population std, across
//!   instances, of the divided differences at that step.
//! * JGD: `MPGD * mean(MGD)`, per channel on standardized values, aggregated
//!   as the mean of the (at most) ten largest channel scores.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::solver::{regular_grid, Trajectory};

pub const TOP_CHANNELS: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("channel {channel} is degenerate (constant values)")]
    DegenerateChannel { channel: usize },
}

/// `N` instances x `M` steps x `C` channels on a shared regular grid over
/// `[0, duration]`, stored as `values[(n * M + m) * C + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedSample {
    instances: usize,
    steps: usize,
    channels: usize,
    duration: f64,
    values: Vec<f64>,
}

impl GriddedSample {
    pub fn new(
        instances: usize,
        steps: usize,
        channels: usize,
        duration: f64,
        values: Vec<f64>,
    ) -> Result<Self, ScoreError> {
        let invalid = |m: String| Err(ScoreError::InvalidSample(m));
        if instances == 0 || steps < 2 || channels == 0 {
            return invalid(format!("need N >= 1, M >= 2, C >= 1 (got {instances}, {steps}, {channels})"));
        }
        if !(duration > 0.0 && duration.is_finite()) {
            return invalid(format!("duration must be positive, got {duration}"));
        }
        if values.len() != instances * steps * channels {
            return invalid(format!("expected {} values, got {}", instances * steps * channels, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("values must be finite".into());
        }
        Ok(Self { instances, steps, channels, duration, values })
    }

    /// Stacks trajectories that share one grid over `[0, duration]`.
    pub fn from_trajectories(trajectories: &[Trajectory], duration: f64) -> Result<Self, ScoreError> {
        let Some(first) = trajectories.first() else {
            return Err(ScoreError::InvalidSample("no trajectories".into()));
        };
        if trajectories.iter().any(|t| t.len() != first.len() || t.channels() != first.channels()) {
            return Err(ScoreError::InvalidSample("trajectories differ in shape".into()));
        }
        let values = trajectories.iter().flat_map(|t| t.values().iter().copied()).collect();
        Self::new(trajectories.len(), first.len(), first.channels(), duration, values)
    }

    pub fn instances(&self) -> usize {
        self.instances
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn step_size(&self) -> f64 {
        self.duration / (self.steps - 1) as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, n: usize, m: usize, c: usize) -> f64 {
        self.values[(n * self.steps + m) * self.channels + c]
    }

    pub fn series(&self, n: usize, c: usize) -> Vec<f64> {
        (0..self.steps).map(|m| self.get(n, m, c)).collect()
    }

    /// The sub-sample of steps `start..start + len`, keeping the step size.
    pub fn window(&self, start: usize, len: usize) -> Result<Self, ScoreError> {
        if len < 2 || start + len > self.steps {
            return Err(ScoreError::InvalidSample(format!(
                "window {start}..{} outside 0..{}",
                start + len,
                self.steps
            )));
        }
        let mut values = Vec::with_capacity(self.instances * len * self.channels);
        for n in 0..self.instances {
            let from = (n * self.steps + start) * self.channels;
            values.extend_from_slice(&self.values[from..from + len * self.channels]);
        }
        let duration = self.step_size() * (len - 1) as f64;
        Self::new(self.instances, len, self.channels, duration, values)
    }

    /// Per-channel population mean and std over all instances and steps.
    pub fn channel_stats(&self) -> Vec<ChannelStats> {
        (0..self.channels)
            .map(|c| {
                let (mean, std) =
                    mean_std((0..self.instances).flat_map(|n| (0..self.steps).map(move |m| (n, m))).map(|(n, m)| self.get(n, m, c)));
                ChannelStats { mean, std }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut count = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
        count += 1;
    }
    if count == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / count as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / count as f64).sqrt())
}

/// Population standard deviation (divisor `K`).
pub fn numstd(values: &[f64]) -> f64 {
    mean_std(values.iter().copied()).1
}

/// MGD estimate of one series sampled with step `eps`.
pub fn mgd_estimate(series: &[f64], eps: f64) -> f64 {
    if series.len() < 2 {
        return 0.0;
    }
    let diffs: Vec<f64> = series.windows(2).map(|w| (w[1] - w[0]) / eps).collect();
    numstd(&diffs)
}

/// MPGD estimate of one channel: `(eps / T) * sum_t numstd_n(diff_{n,t})`.
pub fn mpgd_estimate(sample: &GriddedSample, channel: usize) -> f64 {
    let eps = sample.step_size();
    let mut column = vec![0.0; sample.instances];
    let mut total = 0.0;
    for m in 1..sample.steps {
        for (n, slot) in column.iter_mut().enumerate() {
            *slot = (sample.get(n, m, channel) - sample.get(n, m - 1, channel)) / eps;
        }
        total += numstd(&column);
    }
    eps / sample.duration * total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyReport {
    pub per_channel_mgd_mean: Vec<f64>,
    pub per_channel_mpgd: Vec<f64>,
    pub per_channel_jgd: Vec<f64>,
    pub aggregated_jgd: f64,
    pub normalization: Vec<ChannelStats>,
}

/// Channel indices ordered by score descending, index ascending on ties.
pub fn rank_channels(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// Mean of the `min(10, C)` largest channel scores.
pub fn aggregate_top_channels(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let order = rank_channels(scores);
    let k = scores.len().min(TOP_CHANNELS);
    order[..k].iter().map(|&c| scores[c]).sum::<f64>() / k as f64
}

/// Standardizes each channel, then scores it with `MPGD * mean MGD`.
///
/// A channel is degenerate when its values have zero spread, or when every
/// instance is constant in time on that channel.
pub fn jgd_estimate(sample: &GriddedSample) -> Result<DifficultyReport, ScoreError> {
    let stats = sample.channel_stats();
    for (c, s) in stats.iter().enumerate() {
        if s.std == 0.0 || !s.std.is_finite() {
            return Err(ScoreError::DegenerateChannel { channel: c });
        }
        let flat = (0..sample.instances)
            .all(|n| (1..sample.steps).all(|m| sample.get(n, m, c) == sample.get(n, m - 1, c)));
        if flat {
            return Err(ScoreError::DegenerateChannel { channel: c });
        }
    }
    let normalized: Vec<f64> = sample
        .values
        .chunks_exact(sample.channels)
        .flat_map(|row| row.iter().zip(&stats).map(|(v, s)| (v - s.mean) / s.std))
        .collect();
    let z = GriddedSample { values: normalized, ..sample.clone() };
    let eps = z.step_size();

    let mut mgd_mean = Vec::with_capacity(z.channels);
    let mut mpgd = Vec::with_capacity(z.channels);
    let mut jgd = Vec::with_capacity(z.channels);
    for c in 0..z.channels {
        let mean_mgd =
            (0..z.instances).map(|n| mgd_estimate(&z.series(n, c), eps)).sum::<f64>() / z.instances as f64;
        let p = mpgd_estimate(&z, c);
        mgd_mean.push(mean_mgd);
        mpgd.push(p);
        jgd.push(p * mean_mgd);
    }
    Ok(DifficultyReport {
        aggregated_jgd: aggregate_top_channels(&jgd),
        per_channel_mgd_mean: mgd_mean,
        per_channel_mpgd: mpgd,
        per_channel_jgd: jgd,
        normalization: stats,
    })
}

/// Estimator error `|mgd_estimate - exact|` of `f` on `[0, duration]` for
/// each step size. Step sizes are snapped to `duration / round(duration / eps)`.
pub fn mgd_convergence_probe(
    f: impl Fn(f64) -> f64,
    duration: f64,
    exact: f64,
    epsilons: &[f64],
) -> Vec<(f64, f64)> {
    epsilons
        .iter()
        .map(|&eps| {
            let intervals = (duration / eps).round().max(1.0) as usize;
            let grid = regular_grid(duration, intervals + 1);
            let series: Vec<f64> = grid.iter().map(|&t| f(t)).collect();
            let step = duration / intervals as f64;
            (step, (mgd_estimate(&series, step) - exact).abs())
        })
        .collect()
}
