//! Coordinate-descent search for the rate-maximizing protocol parameters.
//!
//! Each sweep visits the six axes in the fixed order `(s, mu, nu, p_s, p_mu,
//! p_nu)` and replaces one coordinate at a time by the best value found with a
//! coarse-to-fine line search: sample the axis evenly, keep the best sample,
//! then resample between its two neighbours, and so on. Samples that violate
//! `nu < mu` or the probability budget are skipped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::keyrate::{key_rate, ExperimentParams, KeyRateError, ProtocolParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error("starting point has zero key rate")]
    StartInfeasible,
    #[error("starting point violates the protocol constraints or search bounds")]
    InvalidStart,
    #[error("no positive-rate point found in {0} scattershot trials")]
    NotFound(usize),
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("distances must be strictly ascending and non-negative")]
    NotAscending,
    #[error(transparent)]
    KeyRate(#[from] KeyRateError),
}

/// Closed search interval per axis; joint constraints are checked separately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchBounds {
    pub lower: [f64; 6],
    pub upper: [f64; 6],
}

impl Default for SearchBounds {
    fn default() -> Self {
        let lo = 1e-4;
        Self {
            lower: [lo; 6],
            upper: [1.0, 1.0, 1.0, 1.0 - lo, 1.0 - lo, 1.0 - lo],
        }
    }
}

impl SearchBounds {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        for axis in 0..6 {
            if !(self.lower[axis] < self.upper[axis]) {
                return Err(OptimizeError::InvalidConfig(format!(
                    "empty interval on axis {}",
                    ProtocolParams::NAMES[axis]
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &ProtocolParams) -> bool {
        p.to_array()
            .iter()
            .enumerate()
            .all(|(i, v)| (self.lower[i]..=self.upper[i]).contains(v))
    }

    fn admits(&self, p: &ProtocolParams) -> bool {
        p.is_feasible() && self.contains(p)
    }

    /// The part of `axis` that can hold a feasible value with the other five
    /// coordinates of `p` fixed.
    fn axis_interval(&self, p: &ProtocolParams, axis: usize) -> (f64, f64) {
        let (mut lo, mut hi) = (self.lower[axis], self.upper[axis]);
        match axis {
            1 => lo = lo.max(p.nu),
            2 => hi = hi.min(p.mu),
            3 => hi = hi.min(1.0 - p.p_mu - p.p_nu),
            4 => hi = hi.min(1.0 - p.p_s - p.p_nu),
            5 => hi = hi.min(1.0 - p.p_s - p.p_mu),
            _ => {}
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdConfig {
    pub coarse_points: usize,
    pub refine_rounds: usize,
    /// Relative rate improvement per sweep below which the search stops.
    pub sweep_tol: f64,
    pub max_sweeps: usize,
    pub scattershot_trials: usize,
    pub rng_seed: u64,
}

impl Default for CdConfig {
    fn default() -> Self {
        Self {
            coarse_points: 16,
            refine_rounds: 6,
            sweep_tol: 1e-6,
            max_sweeps: 30,
            scattershot_trials: 2000,
            rng_seed: 0,
        }
    }
}

impl CdConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        if self.coarse_points < 3 {
            return Err(OptimizeError::InvalidConfig(
                "coarse_points must be >= 3".into(),
            ));
        }
        if self.refine_rounds < 1 || self.max_sweeps < 1 {
            return Err(OptimizeError::InvalidConfig(
                "refine_rounds and max_sweeps must be >= 1".into(),
            ));
        }
        if !(self.sweep_tol >= 0.0) {
            return Err(OptimizeError::InvalidConfig(
                "sweep_tol must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Hard cap on objective evaluations for one descent.
    pub fn evaluation_budget(&self) -> u64 {
        (self.max_sweeps * 6 * self.coarse_points * self.refine_rounds) as u64
    }

    /// Sample spacing of the last refinement round on an axis of width `width`.
    pub fn final_step(&self, width: f64) -> f64 {
        let shrink = 2.0 / (self.coarse_points - 1) as f64;
        width / (self.coarse_points - 1) as f64 * shrink.powi(self.refine_rounds as i32 - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxSweeps,
    Infeasible,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::MaxSweeps => "max-sweeps",
            Status::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizationResult {
    pub p_opt: ProtocolParams,
    pub rate: f64,
    pub sweeps_used: usize,
    pub evaluations: u64,
    pub status: Status,
}

impl OptimizationResult {
    fn infeasible(p: ProtocolParams, evaluations: u64) -> Self {
        Self {
            p_opt: p,
            rate: 0.0,
            sweeps_used: 0,
            evaluations,
            status: Status::Infeasible,
        }
    }
}

/// Starting point used when nothing better is known.
pub fn reference_params() -> ProtocolParams {
    ProtocolParams::new(0.5, 0.17, 0.023, 0.9, 0.005, 0.06)
}

/// Objective wrapper that counts calls and refuses to exceed a budget.
struct Counted<F> {
    f: F,
    calls: u64,
    budget: u64,
}

impl<F: Fn(&ProtocolParams) -> f64> Counted<F> {
    fn new(f: F, budget: u64) -> Self {
        Self {
            f,
            calls: 0,
            budget,
        }
    }

    fn eval(&mut self, p: &ProtocolParams) -> Option<f64> {
        if self.calls >= self.budget {
            return None;
        }
        self.calls += 1;
        Some((self.f)(p))
    }
}

/// The key rate as a search objective. Callers only pass feasible points.
pub fn rate_objective(e: &ExperimentParams) -> impl Fn(&ProtocolParams) -> f64 + '_ {
    move |p| key_rate(e, p).unwrap_or(0.0)
}

fn search_axis<F: Fn(&ProtocolParams) -> f64>(
    objective: &mut Counted<F>,
    p: &ProtocolParams,
    rate: f64,
    axis: usize,
    bounds: &SearchBounds,
    config: &CdConfig,
) -> (ProtocolParams, f64) {
    let (lo, hi) = bounds.axis_interval(p, axis);
    if !(lo < hi) {
        return (*p, rate);
    }
    let n = config.coarse_points;
    let mut best_x = p.get(axis);
    let mut best_rate = rate;
    let (mut left, mut right) = (lo, hi);
    // Neighbours of the previous round's best sample are the endpoints of the
    // next round; their values are reused rather than re-evaluated.
    let mut known: Vec<(f64, f64)> = Vec::with_capacity(2);

    for _ in 0..config.refine_rounds {
        let width = right - left;
        let step = width / (n - 1) as f64;
        let mut grid = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        let mut round_best: Option<usize> = None;
        for i in 0..n {
            let x = if i == n - 1 {
                right
            } else {
                left + width * i as f64 / (n - 1) as f64
            };
            let candidate = p.with(axis, x);
            let r = match known.iter().find(|(kx, _)| *kx == x) {
                Some(&(_, r)) => Some(r),
                None if bounds.admits(&candidate) => objective.eval(&candidate),
                None => None,
            };
            if let Some(r) = r {
                if r > best_rate {
                    best_rate = r;
                    best_x = x;
                    round_best = Some(i);
                }
            }
            grid.push(x);
            values.push(r);
        }
        let (next_left, next_right) = match round_best {
            Some(k) => {
                let (l, r) = (k.saturating_sub(1), (k + 1).min(n - 1));
                known = [l, r]
                    .iter()
                    .filter_map(|&j| values[j].map(|v| (grid[j], v)))
                    .collect();
                (grid[l], grid[r])
            }
            None => {
                known.clear();
                ((best_x - step).max(lo), (best_x + step).min(hi))
            }
        };
        if !(next_right > next_left) {
            break;
        }
        left = next_left;
        right = next_right;
    }
    (p.with(axis, best_x), best_rate)
}

/// One coarse-to-fine line search along `axis` of an arbitrary objective.
/// Returns the updated point and its objective value.
pub fn line_search_axis_with<F: Fn(&ProtocolParams) -> f64>(
    objective: F,
    p: &ProtocolParams,
    axis: usize,
    bounds: &SearchBounds,
    config: &CdConfig,
) -> (ProtocolParams, f64) {
    assert!(axis < 6, "axis index {axis} out of range");
    let mut counted = Counted::new(objective, u64::MAX);
    let rate = (counted.f)(p);
    search_axis(&mut counted, p, rate, axis, bounds, config)
}

pub fn line_search_axis(
    e: &ExperimentParams,
    p: &ProtocolParams,
    axis: usize,
    bounds: &SearchBounds,
    config: &CdConfig,
) -> ProtocolParams {
    line_search_axis_with(rate_objective(e), p, axis, bounds, config).0
}

/// Coordinate descent on an arbitrary objective over protocol parameters.
pub fn coordinate_descent_with<F: Fn(&ProtocolParams) -> f64>(
    objective: F,
    p0: &ProtocolParams,
    bounds: &SearchBounds,
    config: &CdConfig,
) -> Result<OptimizationResult, OptimizeError> {
    config.validate()?;
    bounds.validate()?;
    if !bounds.admits(p0) {
        return Err(OptimizeError::InvalidStart);
    }
    let mut counted = Counted::new(objective, config.evaluation_budget());
    let start = counted.eval(p0).unwrap_or(0.0);
    if !(start > 0.0) {
        return Err(OptimizeError::StartInfeasible);
    }

    let mut p = *p0;
    let mut rate = start;
    let mut status = Status::MaxSweeps;
    let mut sweeps = 0;
    while sweeps < config.max_sweeps {
        sweeps += 1;
        let before = rate;
        for axis in 0..6 {
            (p, rate) = search_axis(&mut counted, &p, rate, axis, bounds, config);
        }
        if rate - before <= config.sweep_tol * before {
            status = Status::Converged;
            break;
        }
    }
    Ok(OptimizationResult {
        p_opt: p,
        rate,
        sweeps_used: sweeps,
        evaluations: counted.calls,
        status,
    })
}

pub fn coordinate_descent(
    e: &ExperimentParams,
    p0: &ProtocolParams,
    bounds: &SearchBounds,
    config: &CdConfig,
) -> Result<OptimizationResult, OptimizeError> {
    e.validate()?;
    coordinate_descent_with(rate_objective(e), p0, bounds, config)
}

/// A uniformly drawn point of the feasible region inside `bounds`.
pub fn sample_feasible<R: Rng + ?Sized>(bounds: &SearchBounds, rng: &mut R) -> ProtocolParams {
    loop {
        let mut v = [0.0; 6];
        for (axis, x) in v.iter_mut().enumerate() {
            *x = rng.random_range(bounds.lower[axis]..=bounds.upper[axis]);
        }
        let p = ProtocolParams::from_array(v);
        if p.is_feasible() {
            return p;
        }
    }
}

/// Points are drawn in batches of this size; the best positive point of the
/// first batch that has one is returned.
const SCATTERSHOT_BATCH: usize = 32;

/// Random search for any positive-rate starting point.
///
/// Returns the point, its rate and the number of evaluations spent.
pub fn scattershot_init_with<F, R>(
    objective: F,
    bounds: &SearchBounds,
    trials: usize,
    rng: &mut R,
) -> Result<(ProtocolParams, f64, u64), OptimizeError>
where
    F: Fn(&ProtocolParams) -> f64,
    R: Rng + ?Sized,
{
    bounds.validate()?;
    let mut done = 0;
    while done < trials {
        let batch = SCATTERSHOT_BATCH.min(trials - done);
        let mut best: Option<(ProtocolParams, f64)> = None;
        for _ in 0..batch {
            let p = sample_feasible(bounds, rng);
            let r = objective(&p);
            if r > 0.0 && best.is_none_or(|(_, b)| r > b) {
                best = Some((p, r));
            }
        }
        done += batch;
        if let Some((p, r)) = best {
            return Ok((p, r, done as u64));
        }
    }
    Err(OptimizeError::NotFound(trials))
}

pub fn scattershot_init<R: Rng + ?Sized>(
    e: &ExperimentParams,
    bounds: &SearchBounds,
    trials: usize,
    rng: &mut R,
) -> Result<ProtocolParams, OptimizeError> {
    e.validate()?;
    scattershot_init_with(rate_objective(e), bounds, trials, rng).map(|(p, _, _)| p)
}

fn with_extra_evaluations(mut r: OptimizationResult, extra: u64) -> OptimizationResult {
    r.evaluations += extra;
    r
}

/// Scattershot at `e`; if nothing is found, start from zero distance and walk
/// the optimum out to `e.l_bc` in steps of at most `ZERO_START_STEP_KM`.
fn cold_start<R: Rng + ?Sized>(
    e: &ExperimentParams,
    bounds: &SearchBounds,
    config: &CdConfig,
    rng: &mut R,
) -> Result<OptimizationResult, OptimizeError> {
    const ZERO_START_STEP_KM: f64 = 10.0;

    match scattershot_init_with(rate_objective(e), bounds, config.scattershot_trials, rng) {
        Ok((p0, _, spent)) => {
            let r = coordinate_descent(e, &p0, bounds, config)?;
            return Ok(with_extra_evaluations(r, spent));
        }
        Err(OptimizeError::NotFound(_)) if e.l_bc > 0.0 => {}
        Err(OptimizeError::NotFound(_)) => {
            return Ok(OptimizationResult::infeasible(
                reference_params(),
                config.scattershot_trials as u64,
            ))
        }
        Err(other) => return Err(other),
    }

    let mut spent = config.scattershot_trials as u64;
    let origin = e.at_distance(0.0);
    let (p0, _, used) = match scattershot_init_with(
        rate_objective(&origin),
        bounds,
        config.scattershot_trials,
        rng,
    ) {
        Ok(found) => found,
        Err(OptimizeError::NotFound(n)) => {
            return Ok(OptimizationResult::infeasible(
                reference_params(),
                spent + n as u64,
            ))
        }
        Err(other) => return Err(other),
    };
    spent += used;
    let steps = (e.l_bc / ZERO_START_STEP_KM).ceil().max(1.0) as usize;
    let mut p = p0;
    for k in 0..=steps {
        let here = e.at_distance(e.l_bc * k as f64 / steps as f64);
        match coordinate_descent(&here, &p, bounds, config) {
            Ok(r) if k == steps => return Ok(with_extra_evaluations(r, spent)),
            Ok(r) => {
                spent += r.evaluations;
                p = r.p_opt;
            }
            Err(OptimizeError::StartInfeasible) => {
                return Ok(OptimizationResult::infeasible(p, spent + 1))
            }
            Err(other) => return Err(other),
        }
    }
    unreachable!("loop returns at the final step")
}

/// Optimize a single point with no prior knowledge: scattershot at `e`, and
/// failing that, evolve from zero distance. A point where neither finds a
/// positive rate is reported infeasible with rate 0.
pub fn optimize_point(
    e: &ExperimentParams,
    bounds: &SearchBounds,
    config: &CdConfig,
) -> Result<OptimizationResult, OptimizeError> {
    e.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    cold_start(e, bounds, config, &mut rng)
}

/// Optimal parameters along a list of ascending distances, each point warm
/// started from the previous optimum.
pub fn optimize_trace(
    template: &ExperimentParams,
    distances: &[f64],
    bounds: &SearchBounds,
    config: &CdConfig,
) -> Result<Vec<OptimizationResult>, OptimizeError> {
    config.validate()?;
    bounds.validate()?;
    if distances.windows(2).any(|w| !(w[0] < w[1])) || distances.first().is_some_and(|d| *d < 0.0) {
        return Err(OptimizeError::NotAscending);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut results = Vec::with_capacity(distances.len());
    let mut previous: Option<ProtocolParams> = None;
    let mut zero_streak = 0;

    for &d in distances {
        let e = template.at_distance(d);
        e.validate()?;
        if zero_streak >= 2 {
            let p = previous.unwrap_or_else(reference_params);
            results.push(OptimizationResult::infeasible(p, 0));
            continue;
        }
        let result = match previous {
            Some(p) => match coordinate_descent(&e, &p, bounds, config) {
                Ok(r) => r,
                Err(OptimizeError::StartInfeasible) => {
                    match scattershot_init_with(
                        rate_objective(&e),
                        bounds,
                        config.scattershot_trials,
                        &mut rng,
                    ) {
                        Ok((p0, _, spent)) => with_extra_evaluations(
                            coordinate_descent(&e, &p0, bounds, config)?,
                            spent + 1,
                        ),
                        Err(OptimizeError::NotFound(n)) => {
                            OptimizationResult::infeasible(p, n as u64 + 1)
                        }
                        Err(other) => return Err(other),
                    }
                }
                Err(other) => return Err(other),
            },
            None => cold_start(&e, bounds, config, &mut rng)?,
        };
        if result.status == Status::Infeasible {
            zero_streak += 1;
        } else {
            zero_streak = 0;
            previous = Some(result.p_opt);
        }
        results.push(result);
    }
    Ok(results)
}

/// Coordinate descent seeded with a predicted point, falling back to the
/// cold-start path when the prediction has zero rate.
pub fn nn_seeded_descent(
    e: &ExperimentParams,
    p_nn: &ProtocolParams,
    bounds: &SearchBounds,
    config: &CdConfig,
) -> Result<OptimizationResult, OptimizeError> {
    e.validate()?;
    match coordinate_descent(e, p_nn, bounds, config) {
        Err(OptimizeError::StartInfeasible) | Err(OptimizeError::InvalidStart) => {
            let probe = u64::from(bounds.admits(p_nn));
            optimize_point(e, bounds, config).map(|r| with_extra_evaluations(r, probe))
        }
        other => other,
    }
}
