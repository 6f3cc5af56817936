//! Dormand-Prince 5(4) integration with PI step control and dense output.
//!
//! The integrator always starts at `t = 0` from the supplied initial state and
//! integrates up to the last grid time. Grid values come from the
//! fourth-order continuous extension of each accepted step, so the step
//! sequence does not depend on where the grid points fall.

use thiserror::Error;

use crate::dsl::{DomainKind, EvalError, SystemSpec};

pub const DEFAULT_RTOL: f64 = 1e-6;
pub const DEFAULT_ATOL: f64 = 1e-8;
pub const DEFAULT_MAX_STEPS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { rtol: DEFAULT_RTOL, atol: DEFAULT_ATOL, max_steps: DEFAULT_MAX_STEPS }
    }
}

impl SolverOptions {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveRequest<'a> {
    pub spec: &'a SystemSpec,
    pub constants: &'a [f64],
    pub initial: &'a [f64],
    pub grid: &'a [f64],
    pub options: SolverOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FailureCause {
    StepSizeUnderflow,
    MaxStepsExceeded,
    Domain(EvalError),
    NonFiniteState,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("invalid solve request: {0}")]
    InvalidRequest(String),
    #[error("integration failed at t = {time}: {cause:?}")]
    StepFailure { time: f64, cause: FailureCause },
}

/// Values of all channels on a time grid, row-major (`values[m * C + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: Vec<f64>,
    channels: usize,
    values: Vec<f64>,
    min: Vec<f64>,
    max: Vec<f64>,
}

impl Trajectory {
    pub fn new(grid: Vec<f64>, channels: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len() * channels);
        let mut min = vec![f64::INFINITY; channels];
        let mut max = vec![f64::NEG_INFINITY; channels];
        for row in values.chunks_exact(channels.max(1)) {
            for (c, &v) in row.iter().enumerate() {
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        Self { grid, channels, values, min, max }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.values[m * self.channels..(m + 1) * self.channels]
    }

    pub fn get(&self, m: usize, c: usize) -> f64 {
        self.values[m * self.channels + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|m| self.get(m, c)).collect()
    }

    pub fn channel_min(&self) -> &[f64] {
        &self.min
    }

    pub fn channel_max(&self) -> &[f64] {
        &self.max
    }
}

/// `steps` evenly spaced times from 0 to `duration`, ending exactly at `duration`.
pub fn regular_grid(duration: f64, steps: usize) -> Vec<f64> {
    let last = steps.saturating_sub(1);
    (0..steps)
        .map(|m| if m == last { duration } else { m as f64 * duration / last as f64 })
        .collect()
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Continuous extension.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

// Step control.
const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const PI_BETA: f64 = 0.04;

struct Rhs<'a> {
    spec: &'a SystemSpec,
    constants: &'a [f64],
}

impl Rhs<'_> {
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), SolveError> {
        self.spec.eval_rhs_into(t, x, self.constants, out).map_err(|e| SolveError::StepFailure {
            time: t,
            cause: if e.kind == DomainKind::NonFiniteInput {
                FailureCause::NonFiniteState
            } else {
                FailureCause::Domain(e)
            },
        })
    }
}

fn validate(req: &SolveRequest<'_>) -> Result<(), SolveError> {
    let bad = |msg: &str| Err(SolveError::InvalidRequest(msg.to_string()));
    let c = req.spec.channels;
    if req.initial.len() != c {
        return bad("initial state length differs from channel count");
    }
    if req.constants.len() != req.spec.constants.len() {
        return bad("constant vector length differs from declared constants");
    }
    if req.initial.iter().chain(req.constants).any(|v| !v.is_finite()) {
        return bad("initial state and constants must be finite");
    }
    if req.grid.is_empty() {
        return bad("grid is empty");
    }
    if req.grid.iter().any(|t| !t.is_finite()) || req.grid[0] < 0.0 {
        return bad("grid times must be finite and non-negative");
    }
    if req.grid.windows(2).any(|w| w[1] <= w[0]) {
        return bad("grid must be strictly increasing");
    }
    let opts = req.options;
    if !(opts.rtol > 0.0 && opts.atol > 0.0) || opts.max_steps == 0 {
        return bad("tolerances and max_steps must be positive");
    }
    Ok(())
}

fn error_norm(y: &[f64], y_new: &[f64], err: &[f64], opts: &SolverOptions) -> f64 {
    let n = y.len() as f64;
    let sum: f64 = y
        .iter()
        .zip(y_new)
        .zip(err)
        .map(|((&a, &b), &e)| {
            let sk = opts.atol + opts.rtol * a.abs().max(b.abs());
            (e / sk).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

fn initial_step(
    rhs: &Rhs<'_>,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    h_max: f64,
    opts: &SolverOptions,
) -> Result<f64, SolveError> {
    let n = y0.len();
    let mut dnf = 0.0;
    let mut dny = 0.0;
    for i in 0..n {
        let sk = opts.atol + opts.rtol * y0[i].abs();
        dnf += (f0[i] / sk).powi(2);
        dny += (y0[i] / sk).powi(2);
    }
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 { 1e-6 } else { (dny / dnf).sqrt() * 0.01 };
    h = h.min(h_max);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h * f).collect();
    let mut f1 = vec![0.0; n];
    rhs.eval(t0 + h, &y1, &mut f1)?;
    let mut der2 = 0.0;
    for i in 0..n {
        let sk = opts.atol + opts.rtol * y0[i].abs();
        der2 += ((f1[i] - f0[i]) / sk).powi(2);
    }
    let der2 = der2.sqrt() / h;
    let der12 = der2.abs().max(dnf.sqrt());
    let h1 = if der12 <= 1e-15 { (h * 1e-3).max(1e-6) } else { (0.01 / der12).powf(1.0 / 5.0) };
    Ok((100.0 * h).min(h1).min(h_max))
}

/// Integrates the system and reports values on the requested grid.
pub fn solve(req: &SolveRequest<'_>) -> Result<Trajectory, SolveError> {
    validate(req)?;
    let n = req.spec.channels;
    let opts = req.options;
    let rhs = Rhs { spec: req.spec, constants: req.constants };
    let grid = req.grid;
    let t_end = *grid.last().expect("validated non-empty");

    let mut out = Vec::with_capacity(grid.len() * n);
    let mut next = 0;
    while next < grid.len() && grid[next] == 0.0 {
        out.extend_from_slice(req.initial);
        next += 1;
    }
    if next == grid.len() {
        return Ok(Trajectory::new(grid.to_vec(), n, out));
    }

    let mut t = 0.0f64;
    let mut y = req.initial.to_vec();
    let mut k1 = vec![0.0; n];
    rhs.eval(t, &y, &mut k1)?;
    let h_max = t_end;
    let mut h = initial_step(&rhs, t, &y, &k1, h_max, &opts)?;

    let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut ytmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut cont = vec![[0.0f64; 5]; n];

    let expo1 = 0.2 - PI_BETA * 0.75;
    let mut fac_old = 1e-4f64;
    let mut rejected_last = false;
    let mut steps = 0usize;
    let mut last = false;

    loop {
        if steps >= opts.max_steps {
            return Err(SolveError::StepFailure { time: t, cause: FailureCause::MaxStepsExceeded });
        }
        if 0.1 * h.abs() <= t.abs() * f64::EPSILON {
            return Err(SolveError::StepFailure { time: t, cause: FailureCause::StepSizeUnderflow });
        }
        if t + 1.01 * h - t_end > 0.0 {
            h = t_end - t;
            last = true;
        }
        steps += 1;

        for i in 0..n {
            ytmp[i] = y[i] + h * A21 * k1[i];
        }
        rhs.eval(t + C2 * h, &ytmp, &mut k2)?;
        for i in 0..n {
            ytmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        rhs.eval(t + C3 * h, &ytmp, &mut k3)?;
        for i in 0..n {
            ytmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        rhs.eval(t + C4 * h, &ytmp, &mut k4)?;
        for i in 0..n {
            ytmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        rhs.eval(t + C5 * h, &ytmp, &mut k5)?;
        for i in 0..n {
            ytmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        let t_new = if last { t_end } else { t + h };
        rhs.eval(t_new, &ytmp, &mut k6)?;
        for i in 0..n {
            y_new[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        if y_new.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::StepFailure { time: t, cause: FailureCause::NonFiniteState });
        }
        rhs.eval(t_new, &y_new, &mut k7)?;
        for i in 0..n {
            err[i] = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let err_norm = error_norm(&y, &y_new, &err, &opts);
        if !err_norm.is_finite() {
            return Err(SolveError::StepFailure { time: t, cause: FailureCause::NonFiniteState });
        }

        let fac11 = err_norm.powf(expo1);
        let fac = (fac11 / fac_old.powf(PI_BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
        let mut h_new = h / fac;

        if err_norm <= 1.0 {
            fac_old = err_norm.max(1e-4);
            for i in 0..n {
                let dy = y_new[i] - y[i];
                let bspl = h * k1[i] - dy;
                cont[i] = [
                    y[i],
                    dy,
                    bspl,
                    dy - h * k7[i] - bspl,
                    h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]),
                ];
            }
            while next < grid.len() && grid[next] <= t_new {
                if grid[next] == t_new {
                    out.extend_from_slice(&y_new);
                } else {
                    let theta = (grid[next] - t) / h;
                    let theta1 = 1.0 - theta;
                    out.extend(cont.iter().map(|r| {
                        r[0] + theta * (r[1] + theta1 * (r[2] + theta * (r[3] + theta1 * r[4])))
                    }));
                }
                next += 1;
            }
            std::mem::swap(&mut k1, &mut k7);
            std::mem::swap(&mut y, &mut y_new);
            t = t_new;
            if last {
                break;
            }
            h_new = h_new.min(h_max);
            if rejected_last {
                h_new = h_new.min(h);
            }
            rejected_last = false;
        } else {
            h_new = h / (1.0 / FAC_MIN).min(fac11 / SAFETY);
            rejected_last = true;
            last = false;
        }
        h = h_new;
    }

    debug_assert_eq!(next, grid.len());
    Ok(Trajectory::new(grid.to_vec(), n, out))
}

/// Solves on the regular grid `t_m = m * duration / (steps - 1)`.
pub fn solve_to_matrix(
    spec: &SystemSpec,
    constants: &[f64],
    initial: &[f64],
    duration: f64,
    steps: usize,
    options: SolverOptions,
) -> Result<Trajectory, SolveError> {
    if steps < 2 {
        return Err(SolveError::InvalidRequest(format!("need at least 2 steps, got {steps}")));
    }
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(SolveError::InvalidRequest(format!("duration must be positive, got {duration}")));
    }
    let grid = regular_grid(duration, steps);
    solve(&SolveRequest { spec, constants, initial, grid: &grid, options })
}
