//! Per-segment route-usage program and its minute-level distribution.
//!
//! For one 15-minute segment the decision is an integer usage count per
//! route. Simulated location counts `A·r` are compared against the CV and LD
//! bands; each band contributes the squared distance from `A·r` to the band
//! (the optimal slack is the band projection residual, so slacks never appear
//! as variables). Nonfringe usage and the change from the previous segment
//! are penalized. Hard bounds on `A·r` may be added on top.

mod exact;
mod heuristic;
mod minutes;

pub use exact::solve_exact;
pub use heuristic::solve_heuristic;
pub use minutes::{distribute_minutes, MinuteSchedule, MINUTES};

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counts::{Band, CountBands};
use crate::netgraph::{IncidenceMatrix, Route};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("instance too large for exact mode: {routes} routes (limit {limit}), route bound {bound} (limit 10)")]
    TooLarge { routes: usize, limit: usize, bound: i64 },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SolveConfig {
    pub lambda_nonfringe: f64,
    pub lambda_temporal: f64,
    pub route_upper_bound: i64,
    pub grad_tol: f64,
    pub max_iters: usize,
    pub exact_mode_limit: usize,
    pub time_budget_s: f64,
    pub seed: u64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            lambda_nonfringe: 10.0,
            lambda_temporal: 10.0,
            route_upper_bound: 2000,
            grad_tol: 1e-6,
            max_iters: 100_000,
            exact_mode_limit: 8,
            time_budget_s: 60.0,
            seed: 0,
        }
    }
}

pub const EXACT_BOUND_LIMIT: i64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Lower,
    Upper,
}

/// Hard bound on one location's simulated count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardBound {
    pub location: usize,
    pub kind: BoundKind,
    pub bound: f64,
}

impl HardBound {
    pub fn violation(&self, count: f64) -> f64 {
        match self.kind {
            BoundKind::Lower => (self.bound - count).max(0.0),
            BoundKind::Upper => (count - self.bound).max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentProblem {
    pub incidence: Arc<IncidenceMatrix>,
    pub bands_cv: Vec<Option<Band>>,
    pub bands_ld: Vec<Option<Band>>,
    /// Sorted indices of routes that start or end off the fringe.
    pub nonfringe_ids: Vec<usize>,
    pub lambda_nonfringe: f64,
    pub lambda_temporal: f64,
    pub r_prev: Option<Vec<i64>>,
    pub extra_constraints: Vec<HardBound>,
    pub route_upper_bound: i64,
}

impl SegmentProblem {
    /// Problem with no bands, penalties or constraints.
    pub fn new(incidence: Arc<IncidenceMatrix>, config: &SolveConfig) -> Self {
        let m = incidence.n_locations();
        Self {
            incidence,
            bands_cv: vec![None; m],
            bands_ld: vec![None; m],
            nonfringe_ids: Vec::new(),
            lambda_nonfringe: config.lambda_nonfringe,
            lambda_temporal: config.lambda_temporal,
            r_prev: None,
            extra_constraints: Vec::new(),
            route_upper_bound: config.route_upper_bound,
        }
    }

    pub fn n_routes(&self) -> usize {
        self.incidence.n_routes()
    }

    pub fn n_locations(&self) -> usize {
        self.incidence.n_locations()
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        let (n, m) = (self.n_routes(), self.n_locations());
        if self.bands_cv.len() != m || self.bands_ld.len() != m {
            return Err(SolveError::Invalid(format!("band vectors must have {m} entries")));
        }
        if !(self.lambda_nonfringe >= 0.0 && self.lambda_temporal >= 0.0) {
            return Err(SolveError::Invalid("lambda values must be nonnegative".into()));
        }
        if let Some(p) = &self.r_prev {
            if p.len() != n {
                return Err(SolveError::Invalid(format!(
                    "previous solution has {} entries, expected {n}",
                    p.len()
                )));
            }
        }
        if self.nonfringe_ids.iter().any(|&i| i >= n) {
            return Err(SolveError::Invalid("nonfringe route index out of range".into()));
        }
        if self.route_upper_bound < 0 {
            return Err(SolveError::Invalid("route upper bound must be nonnegative".into()));
        }
        for h in &self.extra_constraints {
            if h.location >= m || !h.bound.is_finite() {
                return Err(SolveError::Invalid(format!("bad hard bound {h:?}")));
            }
        }
        Ok(())
    }

    pub fn nonfringe_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_routes()];
        for &i in &self.nonfringe_ids {
            mask[i] = true;
        }
        mask
    }

    /// Squared band residual at one location for a simulated count `y`.
    pub fn band_penalty(&self, location: usize, y: f64) -> f64 {
        let mut total = 0.0;
        for band in [self.bands_cv[location], self.bands_ld[location]].into_iter().flatten() {
            let s = slack_for(y, band);
            total += s * s;
        }
        total
    }

    /// Whether `ar` satisfies every hard bound (1e-9 tolerance).
    pub fn hard_feasible(&self, ar: &[i64]) -> bool {
        self.extra_constraints
            .iter()
            .all(|h| h.violation(ar[h.location] as f64) <= 1e-9)
    }

    pub fn route_flags(routes: &[Route]) -> Vec<usize> {
        routes.iter().filter(|r| !r.fringe).map(|r| r.id).collect()
    }
}

/// Residual that moves `y` into `band`; zero inside the band.
pub fn slack_for(y: f64, band: Band) -> f64 {
    if y < band.lo {
        band.lo - y
    } else if y > band.hi {
        band.hi - y
    } else {
        0.0
    }
}

/// Objective of an integer route vector, temporal term taken against
/// `problem.r_prev` when present.
pub fn objective(r: &[i64], problem: &SegmentProblem) -> f64 {
    let ar = problem.incidence.apply(r);
    objective_with(r, &ar, problem)
}

pub(crate) fn objective_with(r: &[i64], ar: &[i64], problem: &SegmentProblem) -> f64 {
    let mut total: f64 = ar
        .iter()
        .enumerate()
        .map(|(j, &y)| problem.band_penalty(j, y as f64))
        .sum();
    let nonfringe: i64 = problem.nonfringe_ids.iter().map(|&i| r[i]).sum();
    total += problem.lambda_nonfringe * nonfringe as f64;
    if let Some(prev) = &problem.r_prev {
        let dist: i64 = r.iter().zip(prev).map(|(a, b)| (a - b) * (a - b)).sum();
        total += problem.lambda_temporal * dist as f64;
    }
    total
}

/// Strictly better under the 1e-9 relative tie tolerance.
pub(crate) fn improves(candidate: f64, incumbent: f64) -> bool {
    candidate < incumbent - 1e-9 * incumbent.abs().max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMode {
    Exact,
    Heuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Optimal,
    LocalOptimum,
    IterationCap,
    TimeBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSolution {
    pub r: Vec<i64>,
    pub slack_cv: Vec<f64>,
    pub slack_ld: Vec<f64>,
    pub objective: f64,
    pub solver_mode: SolverMode,
    pub solve_time: f64,
    pub stop_reason: StopReason,
}

impl RouteSolution {
    pub(crate) fn assemble(
        r: Vec<i64>,
        problem: &SegmentProblem,
        solver_mode: SolverMode,
        started: Instant,
        stop_reason: StopReason,
    ) -> Self {
        let ar = problem.incidence.apply(&r);
        let slack = |bands: &[Option<Band>]| -> Vec<f64> {
            ar.iter()
                .zip(bands)
                .map(|(&y, b)| b.map_or(0.0, |b| slack_for(y as f64, b)))
                .collect()
        };
        Self {
            slack_cv: slack(&problem.bands_cv),
            slack_ld: slack(&problem.bands_ld),
            objective: objective_with(&r, &ar, problem),
            r,
            solver_mode,
            solve_time: started.elapsed().as_secs_f64(),
            stop_reason,
        }
    }

    pub fn counts(&self, incidence: &IncidenceMatrix) -> Vec<i64> {
        incidence.apply(&self.r)
    }

    pub fn total(&self) -> i64 {
        self.r.iter().sum()
    }
}

/// Exact enumeration when the instance is small enough, otherwise the
/// relax-round-repair heuristic.
pub fn solve_segment(problem: &SegmentProblem, config: &SolveConfig) -> Result<RouteSolution, SolveError> {
    if problem.n_routes() <= config.exact_mode_limit && problem.route_upper_bound <= EXACT_BOUND_LIMIT {
        solve_exact(problem, config)
    } else {
        solve_heuristic(problem, config)
    }
}

/// Solves segments in order, feeding each solution forward as the next
/// segment's previous solution. The first segment has no temporal term.
pub fn solve_day(problems: &[SegmentProblem], config: &SolveConfig) -> Result<Vec<RouteSolution>, SolveError> {
    solve_day_with_progress(problems, config, |_, _| {})
}

pub fn solve_day_with_progress(
    problems: &[SegmentProblem],
    config: &SolveConfig,
    mut progress: impl FnMut(usize, &RouteSolution),
) -> Result<Vec<RouteSolution>, SolveError> {
    let mut out: Vec<RouteSolution> = Vec::with_capacity(problems.len());
    for (t, p) in problems.iter().enumerate() {
        let mut p = p.clone();
        p.r_prev = out.last().map(|s| s.r.clone());
        let sol = solve_segment(&p, config).map_err(|e| match e {
            SolveError::Infeasible(msg) => SolveError::Infeasible(format!("segment {t}: {msg}")),
            other => other,
        })?;
        progress(t, &sol);
        out.push(sol);
    }
    Ok(out)
}

/// Builds one problem per segment from per-source bands. `hard` maps a
/// segment to its hard bounds.
pub fn day_problems(
    incidence: Arc<IncidenceMatrix>,
    routes: &[Route],
    bands_cv: &CountBands,
    bands_ld: &CountBands,
    hard: impl Fn(usize) -> Vec<HardBound>,
    segments: usize,
    config: &SolveConfig,
) -> Vec<SegmentProblem> {
    let m = incidence.n_locations();
    let nonfringe = SegmentProblem::route_flags(routes);
    (0..segments)
        .map(|t| SegmentProblem {
            bands_cv: bands_cv.segment(t, m),
            bands_ld: bands_ld.segment(t, m),
            nonfringe_ids: nonfringe.clone(),
            extra_constraints: hard(t),
            ..SegmentProblem::new(incidence.clone(), config)
        })
        .collect()
}

/// Random small instance for solver cross-checks: `n` routes over `m`
/// locations with random incidence, bands and penalties.
pub fn random_instance(seed: u64, max_routes: usize, max_locations: usize, bound: i64) -> SegmentProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_routes);
    let m = rng.random_range(1..=max_locations);
    let rows: Vec<Vec<u8>> = (0..n)
        .map(|_| (0..m).map(|_| rng.random_bool(0.5) as u8).collect())
        .collect();
    let incidence = Arc::new(IncidenceMatrix::from_dense(m, &rows));
    let band = |rng: &mut ChaCha8Rng| -> Option<Band> {
        if rng.random_bool(0.8) {
            let lo = rng.random_range(0.0..(bound as f64 * 2.5));
            let width = rng.random_range(0.0..(bound as f64));
            Some(Band::new(lo, lo + width))
        } else {
            None
        }
    };
    let bands_cv = (0..m).map(|_| band(&mut rng)).collect();
    let bands_ld = (0..m).map(|_| band(&mut rng)).collect();
    let nonfringe_ids = (0..n).filter(|_| rng.random_bool(0.3)).collect();
    let r_prev = if rng.random_bool(0.7) {
        Some((0..n).map(|_| rng.random_range(0..=bound)).collect())
    } else {
        None
    };
    SegmentProblem {
        incidence,
        bands_cv,
        bands_ld,
        nonfringe_ids,
        lambda_nonfringe: rng.random_range(0.0..2.0),
        lambda_temporal: rng.random_range(0.0..2.0),
        r_prev,
        extra_constraints: Vec::new(),
        route_upper_bound: bound,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(super) fn two_route_fixture(cv: [(f64, f64); 2]) -> SegmentProblem {
        // route 0 passes locations 0 and 1; route 1 passes location 1
        let inc = Arc::new(IncidenceMatrix::from_dense(2, &[vec![1, 1], vec![0, 1]]));
        let config = SolveConfig {
            lambda_nonfringe: 0.0,
            lambda_temporal: 0.0,
            route_upper_bound: 5,
            ..Default::default()
        };
        SegmentProblem {
            bands_cv: cv.iter().map(|&(lo, hi)| Some(Band::new(lo, hi))).collect(),
            ..SegmentProblem::new(inc, &config)
        }
    }

    #[test]
    fn slack_examples() {
        let band = Band::new(10.0, 20.0);
        assert_eq!(slack_for(15.0, band), 0.0);
        assert_eq!(slack_for(7.0, band), 3.0);
        assert_eq!(slack_for(26.0, band), -6.0);
    }

    #[test]
    fn objective_examples() {
        let zero = two_route_fixture([(0.0, 0.0), (0.0, 0.0)]);
        assert_eq!(objective(&[0, 0], &zero), 0.0);

        let p = two_route_fixture([(2.0, 2.0), (5.0, 5.0)]);
        assert_eq!(objective(&[2, 3], &p), 0.0);
        // Ar = (2, 2): slacks (1, -1)
        let q = two_route_fixture([(3.0, 3.0), (1.0, 1.0)]);
        assert_eq!(objective(&[2, 0], &q), 2.0);

        let mut t = two_route_fixture([(2.0, 2.0), (5.0, 5.0)]);
        t.lambda_temporal = 7.0;
        t.r_prev = Some(vec![2, 3]);
        assert_eq!(objective(&[2, 3], &t), 0.0);
        assert_eq!(objective(&[3, 3], &t), 7.0 + 1.0 + 1.0);
    }

    #[test]
    fn nonfringe_penalty_counts_usage() {
        let mut p = two_route_fixture([(0.0, 100.0), (0.0, 100.0)]);
        p.nonfringe_ids = vec![1];
        p.lambda_nonfringe = 2.5;
        assert_eq!(objective(&[4, 3], &p), 7.5);
    }

    #[test]
    fn validation_catches_bad_shapes() {
        let mut p = two_route_fixture([(0.0, 1.0), (0.0, 1.0)]);
        p.r_prev = Some(vec![1]);
        assert!(p.validate().is_err());
        let mut p = two_route_fixture([(0.0, 1.0), (0.0, 1.0)]);
        p.lambda_temporal = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn zero_bands_give_zero_day() {
        let p = two_route_fixture([(0.0, 0.0), (0.0, 0.0)]);
        let problems = vec![p; 96];
        let config = SolveConfig::default();
        let sols = solve_day(&problems, &config).unwrap();
        assert_eq!(sols.len(), 96);
        assert!(sols.iter().all(|s| s.r == vec![0, 0]));
    }

    #[test]
    fn large_temporal_weight_holds_previous_solution() {
        // segment 0 admits several optima; segment 1 has the same bands
        let mut p = two_route_fixture([(2.0, 4.0), (3.0, 9.0)]);
        p.lambda_temporal = 1e6;
        let config = SolveConfig::default();
        let sols = solve_day(&[p.clone(), p], &config).unwrap();
        assert_eq!(sols[0].r, sols[1].r);
        assert_eq!(sols[0].solver_mode, SolverMode::Exact);
    }

    #[test]
    fn solution_fields_consistent() {
        let p = random_instance(3, 6, 4, 5);
        let s = solve_segment(&p, &SolveConfig::default()).unwrap();
        assert!((s.objective - objective(&s.r, &p)).abs() <= 1e-9 * s.objective.abs().max(1.0));
        let ar = p.incidence.apply(&s.r);
        for j in 0..p.n_locations() {
            let expect = p.bands_cv[j].map_or(0.0, |b| slack_for(ar[j] as f64, b));
            assert_eq!(s.slack_cv[j], expect);
        }
    }
}
