//! Relax, round, repair.
//!
//! 1. The continuous relaxation over the box `[0, U]^n` is minimized by
//!    projected gradient descent (Barzilai–Borwein trial step, Armijo
//!    backtracking). Hard bounds enter as a quadratic penalty; a pure
//!    violation pass first decides whether they are satisfiable at all.
//! 2. The relaxed point is rounded to the nearest integers.
//! 3. Greedy repair: unit moves restore hard feasibility if rounding broke
//!    it, then single-coordinate ±1 moves are taken while they strictly
//!    lower the objective.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    BoundKind, RouteSolution, SegmentProblem, SolveConfig, SolveError, SolverMode, StopReason,
};

/// Minimum squared hard-bound violation above which the relaxation counts as
/// infeasible.
const INFEASIBLE_VIOLATION: f64 = 1e-6;
const PENALTY_SCHEDULE: [f64; 3] = [1e2, 1e4, 1e6];
/// Largest route count for which two-coordinate moves are searched.
const PAIR_MOVE_LIMIT: usize = 64;

pub fn solve_heuristic(problem: &SegmentProblem, config: &SolveConfig) -> Result<RouteSolution, SolveError> {
    problem.validate()?;
    let started = Instant::now();
    let deadline = started + Duration::from_secs_f64(config.time_budget_s.max(0.0));
    let n = problem.n_routes();
    let upper = problem.route_upper_bound as f64;
    let limits = LocationLimits::new(problem)?;

    let mut x: Vec<f64> = match &problem.r_prev {
        Some(p) => p.iter().map(|&v| (v as f64).clamp(0.0, upper)).collect(),
        None => vec![0.0; n],
    };
    let mut stop = StopReason::LocalOptimum;

    if limits.any {
        let phase1 = Relaxation::violation_only(problem);
        let (x1, reason) = minimize(&phase1, x, upper, config, deadline);
        x = x1;
        let violation = phase1.value_grad(&x, None);
        if violation > INFEASIBLE_VIOLATION {
            return Err(SolveError::Infeasible(format!(
                "hard bounds cannot be met by any nonnegative route usage (residual squared violation {violation:.3e})"
            )));
        }
        stop = worse(stop, reason);
        for rho in PENALTY_SCHEDULE {
            let (x2, reason) = minimize(&Relaxation::penalized(problem, rho), x, upper, config, deadline);
            x = x2;
            stop = worse(stop, reason);
        }
    } else {
        let (x1, reason) = minimize(&Relaxation::penalized(problem, 0.0), x, upper, config, deadline);
        x = x1;
        stop = worse(stop, reason);
    }

    let mut r: Vec<i64> = x
        .iter()
        .map(|&v| (v.round() as i64).clamp(0, problem.route_upper_bound))
        .collect();
    let mut repair = Repair::new(problem, &limits, &r);
    if limits.any {
        repair.restore_feasibility(&mut r)?;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    if !repair.descend(&mut r, &order, deadline) {
        stop = worse(stop, StopReason::TimeBudget);
    }

    Ok(RouteSolution::assemble(r, problem, SolverMode::Heuristic, started, stop))
}

fn worse(a: StopReason, b: StopReason) -> StopReason {
    let rank = |s: StopReason| match s {
        StopReason::Optimal => 0,
        StopReason::LocalOptimum => 1,
        StopReason::IterationCap => 2,
        StopReason::TimeBudget => 3,
    };
    if rank(b) > rank(a) {
        b
    } else {
        a
    }
}

/// Tightest hard interval per location.
struct LocationLimits {
    lo: Vec<f64>,
    hi: Vec<f64>,
    any: bool,
}

impl LocationLimits {
    fn new(problem: &SegmentProblem) -> Result<Self, SolveError> {
        let m = problem.n_locations();
        let mut lo = vec![f64::NEG_INFINITY; m];
        let mut hi = vec![f64::INFINITY; m];
        for h in &problem.extra_constraints {
            match h.kind {
                BoundKind::Lower => lo[h.location] = lo[h.location].max(h.bound),
                BoundKind::Upper => hi[h.location] = hi[h.location].min(h.bound),
            }
        }
        Ok(Self {
            lo,
            hi,
            any: !problem.extra_constraints.is_empty(),
        })
    }

    fn violation(&self, j: usize, y: f64) -> f64 {
        let v = (self.lo[j] - y).max(0.0) + (y - self.hi[j]).max(0.0);
        v * v
    }

    fn admits(&self, j: usize, y: f64) -> bool {
        self.lo[j] - 1e-9 <= y && y <= self.hi[j] + 1e-9
    }
}

/// Smooth convex surrogate over real-valued route usage.
struct Relaxation<'a> {
    problem: &'a SegmentProblem,
    nonfringe: Vec<bool>,
    rho: f64,
    violation_only: bool,
}

impl<'a> Relaxation<'a> {
    fn penalized(problem: &'a SegmentProblem, rho: f64) -> Self {
        Self {
            nonfringe: problem.nonfringe_mask(),
            problem,
            rho,
            violation_only: false,
        }
    }

    fn violation_only(problem: &'a SegmentProblem) -> Self {
        Self {
            nonfringe: problem.nonfringe_mask(),
            problem,
            rho: 1.0,
            violation_only: true,
        }
    }

    fn value_grad(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let p = self.problem;
        let y = p.incidence.apply_f64(x);
        let mut value = 0.0;
        // d value / d y_j
        let mut dy = vec![0.0; y.len()];
        if !self.violation_only {
            for (j, &yj) in y.iter().enumerate() {
                for band in [p.bands_cv[j], p.bands_ld[j]].into_iter().flatten() {
                    let s = super::slack_for(yj, band);
                    value += s * s;
                    dy[j] -= 2.0 * s;
                }
            }
        }
        if self.rho > 0.0 {
            for h in &p.extra_constraints {
                let v = h.violation(y[h.location]);
                if v > 0.0 {
                    value += self.rho * v * v;
                    dy[h.location] += match h.kind {
                        BoundKind::Lower => -2.0 * self.rho * v,
                        BoundKind::Upper => 2.0 * self.rho * v,
                    };
                }
            }
        }
        let temporal = if self.violation_only { None } else { p.r_prev.as_deref() };
        let lambda_nf = if self.violation_only { 0.0 } else { p.lambda_nonfringe };
        for (i, &xi) in x.iter().enumerate() {
            if self.nonfringe[i] {
                value += lambda_nf * xi;
            }
            if let Some(prev) = temporal {
                let d = xi - prev[i] as f64;
                value += p.lambda_temporal * d * d;
            }
        }
        if let Some(g) = grad {
            let atg = p.incidence.apply_transpose(&dy);
            for (i, gi) in g.iter_mut().enumerate() {
                *gi = atg[i];
                if self.nonfringe[i] {
                    *gi += lambda_nf;
                }
                if let Some(prev) = temporal {
                    *gi += 2.0 * p.lambda_temporal * (x[i] - prev[i] as f64);
                }
            }
        }
        value
    }
}

fn project(v: f64, upper: f64) -> f64 {
    v.clamp(0.0, upper)
}

fn projected_gradient_norm(x: &[f64], g: &[f64], upper: f64) -> f64 {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| {
            let d = xi - project(xi - gi, upper);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn minimize(
    f: &Relaxation<'_>,
    mut x: Vec<f64>,
    upper: f64,
    config: &SolveConfig,
    deadline: Instant,
) -> (Vec<f64>, StopReason) {
    let n = x.len();
    if n == 0 {
        return (x, StopReason::LocalOptimum);
    }
    let mut g = vec![0.0; n];
    let mut fx = f.value_grad(&x, Some(&mut g));
    let scale = projected_gradient_norm(&x, &g, upper).max(1.0);
    let g_inf = g.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let mut alpha = 1.0 / g_inf.max(1.0);
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];

    for _ in 0..config.max_iters {
        if projected_gradient_norm(&x, &g, upper) <= config.grad_tol * scale {
            return (x, StopReason::LocalOptimum);
        }
        if Instant::now() >= deadline {
            return (x, StopReason::TimeBudget);
        }
        let mut accepted = false;
        let mut fxn = fx;
        for _ in 0..60 {
            for i in 0..n {
                xn[i] = project(x[i] - alpha * g[i], upper);
            }
            let decrease: f64 = (0..n).map(|i| g[i] * (xn[i] - x[i])).sum();
            fxn = f.value_grad(&xn, Some(&mut gn));
            if fxn <= fx + 1e-4 * decrease {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // no descent left at machine precision
            return (x, StopReason::LocalOptimum);
        }
        let mut ss = 0.0;
        let mut sy = 0.0;
        for i in 0..n {
            let s = xn[i] - x[i];
            ss += s * s;
            sy += s * (gn[i] - g[i]);
        }
        alpha = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { (alpha * 2.0).min(1e12) };
        std::mem::swap(&mut x, &mut xn);
        std::mem::swap(&mut g, &mut gn);
        if fx - fxn <= 0.0 && ss == 0.0 {
            return (x, StopReason::LocalOptimum);
        }
        fx = fxn;
    }
    (x, StopReason::IterationCap)
}

/// Integer local search state.
struct Repair<'a> {
    problem: &'a SegmentProblem,
    limits: &'a LocationLimits,
    nonfringe: Vec<bool>,
    ar: Vec<i64>,
}

impl<'a> Repair<'a> {
    fn new(problem: &'a SegmentProblem, limits: &'a LocationLimits, r: &[i64]) -> Self {
        Self {
            problem,
            limits,
            nonfringe: problem.nonfringe_mask(),
            ar: problem.incidence.apply(r),
        }
    }

    fn objective_delta(&self, r: &[i64], i: usize, step: i64) -> f64 {
        let p = self.problem;
        let mut delta = 0.0;
        for &j in p.incidence.route_locations(i) {
            let y = self.ar[j] as f64;
            delta += p.band_penalty(j, y + step as f64) - p.band_penalty(j, y);
        }
        if self.nonfringe[i] {
            delta += p.lambda_nonfringe * step as f64;
        }
        if let Some(prev) = &p.r_prev {
            let before = (r[i] - prev[i]) as f64;
            let after = before + step as f64;
            delta += p.lambda_temporal * (after * after - before * before);
        }
        delta
    }

    fn violation_delta(&self, i: usize, step: i64) -> f64 {
        self.problem
            .incidence
            .route_locations(i)
            .iter()
            .map(|&j| {
                let y = self.ar[j] as f64;
                self.limits.violation(j, y + step as f64) - self.limits.violation(j, y)
            })
            .sum()
    }

    fn move_keeps_feasible(&self, i: usize, step: i64) -> bool {
        !self.limits.any
            || self
                .problem
                .incidence
                .route_locations(i)
                .iter()
                .all(|&j| self.limits.admits(j, (self.ar[j] + step) as f64))
    }

    fn apply(&mut self, r: &mut [i64], i: usize, step: i64) {
        r[i] += step;
        for &j in self.problem.incidence.route_locations(i) {
            self.ar[j] += step;
        }
    }

    fn in_box(&self, r: &[i64], i: usize, step: i64) -> bool {
        let v = r[i] + step;
        v >= 0 && v <= self.problem.route_upper_bound
    }

    fn violated_moves(&self) -> Vec<(usize, i64)> {
        let inc = &self.problem.incidence;
        let mut moves: Vec<(usize, i64)> = Vec::new();
        for j in 0..self.ar.len() {
            let y = self.ar[j] as f64;
            if y < self.limits.lo[j] - 1e-9 {
                moves.extend(inc.location_routes(j).iter().map(|&i| (i, 1)));
            } else if y > self.limits.hi[j] + 1e-9 {
                moves.extend(inc.location_routes(j).iter().map(|&i| (i, -1)));
            }
        }
        moves.sort_unstable();
        moves.dedup();
        moves
    }

    /// Best single move on the current violated set as
    /// (violation delta, objective delta, route, step).
    fn best_single(&self, r: &[i64], moves: &[(usize, i64)]) -> Option<(f64, f64, usize, i64)> {
        moves
            .iter()
            .filter(|&&(i, s)| self.in_box(r, i, s))
            .map(|&(i, s)| (self.violation_delta(i, s), self.objective_delta(r, i, s), i, s))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then((a.2, a.3).cmp(&(b.2, b.3))))
    }

    /// Unit moves on routes through violated locations, each chosen to cut
    /// the violation most (objective breaks ties), until feasible. When no
    /// single move helps, a non-worsening move followed by a repairing one
    /// is tried.
    fn restore_feasibility(&mut self, r: &mut [i64]) -> Result<(), SolveError> {
        loop {
            let moves = self.violated_moves();
            if moves.is_empty() {
                return Ok(());
            }
            match self.best_single(r, &moves) {
                Some((dv, _, i, s)) if dv < -1e-12 => {
                    self.apply(r, i, s);
                    continue;
                }
                _ => {}
            }
            let mut best: Option<(f64, usize, i64, usize, i64)> = None;
            for &(i, s) in &moves {
                if !self.in_box(r, i, s) {
                    continue;
                }
                let first = self.violation_delta(i, s);
                self.apply(r, i, s);
                let follow = self.violated_moves();
                if let Some((dv, _, k, t)) = self.best_single(r, &follow) {
                    let total = first + dv;
                    if total < -1e-12 && best.is_none_or(|b| total < b.0) {
                        best = Some((total, i, s, k, t));
                    }
                }
                self.apply(r, i, -s);
            }
            match best {
                Some((_, i, s, k, t)) => {
                    self.apply(r, i, s);
                    self.apply(r, k, t);
                }
                None => {
                    return Err(SolveError::Infeasible(
                        "no integer route usage satisfies the hard bounds".into(),
                    ))
                }
            }
        }
    }

    /// Coordinate descent with ±1 moves, then paired moves on small
    /// instances. Returns false if the deadline hit.
    fn descend(&mut self, r: &mut [i64], order: &[usize], deadline: Instant) -> bool {
        loop {
            let mut improved = self.single_sweep(r, order);
            if !improved && order.len() <= PAIR_MOVE_LIMIT {
                improved = self.pair_sweep(r, order);
            }
            if !improved {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
        }
    }

    fn single_sweep(&mut self, r: &mut [i64], order: &[usize]) -> bool {
        let mut improved = false;
        for &i in order {
            for step in [1, -1] {
                while self.in_box(r, i, step)
                    && self.move_keeps_feasible(i, step)
                    && self.objective_delta(r, i, step) < -1e-9
                {
                    self.apply(r, i, step);
                    improved = true;
                }
            }
        }
        improved
    }

    fn pair_sweep(&mut self, r: &mut [i64], order: &[usize]) -> bool {
        let mut improved = false;
        for (a, &i) in order.iter().enumerate() {
            for &j in &order[a + 1..] {
                for (si, sj) in [(1, -1), (-1, 1), (1, 1), (-1, -1)] {
                    if !self.in_box(r, i, si) || !self.in_box(r, j, sj) {
                        continue;
                    }
                    let first = self.objective_delta(r, i, si);
                    self.apply(r, i, si);
                    let delta = first + self.objective_delta(r, j, sj);
                    // intermediate point may break hard bounds; only the end point must hold them
                    let ok = delta < -1e-9 && self.move_keeps_feasible(j, sj) && {
                        self.apply(r, j, sj);
                        let feasible = self.problem.hard_feasible(&self.ar);
                        self.apply(r, j, -sj);
                        feasible
                    };
                    if ok {
                        self.apply(r, j, sj);
                        improved = true;
                    } else {
                        self.apply(r, i, -si);
                    }
                }
            }
        }
        improved
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::two_route_fixture;
    use super::super::{objective, random_instance, solve_exact, HardBound};
    use super::*;

    #[test]
    fn zero_bands_give_zero() {
        let p = two_route_fixture([(0.0, 0.0), (0.0, 0.0)]);
        let s = solve_heuristic(&p, &SolveConfig::default()).unwrap();
        assert_eq!(s.r, vec![0, 0]);
        assert_eq!(s.solver_mode, SolverMode::Heuristic);
    }

    #[test]
    fn reaches_fixture_optimum() {
        let p = two_route_fixture([(2.0, 2.0), (5.0, 5.0)]);
        let s = solve_heuristic(&p, &SolveConfig::default()).unwrap();
        assert_eq!(s.r, vec![2, 3]);
        assert_eq!(s.objective, 0.0);
    }

    #[test]
    fn reported_objective_is_recomputable() {
        for seed in 0..30 {
            let p = random_instance(seed, 6, 5, 5);
            let s = solve_heuristic(&p, &SolveConfig::default()).unwrap();
            let again = objective(&s.r, &p);
            assert!((s.objective - again).abs() <= 1e-9 * again.abs().max(1.0));
            assert!(s.r.iter().all(|&v| (0..=5).contains(&v)));
        }
    }

    #[test]
    fn close_to_exact_on_small_instances() {
        let cfg = SolveConfig::default();
        for seed in 100..140 {
            let p = random_instance(seed, 6, 5, 5);
            let e = solve_exact(&p, &cfg).unwrap();
            let h = solve_heuristic(&p, &cfg).unwrap();
            assert!(h.objective >= e.objective - 1e-9);
            assert!(
                h.objective <= e.objective * 1.05 + 1e-6,
                "seed {seed}: heuristic {} vs exact {}",
                h.objective,
                e.objective
            );
        }
    }

    #[test]
    fn zero_column_lower_bound_is_infeasible() {
        let mut p = two_route_fixture([(0.0, 0.0), (0.0, 0.0)]);
        p.incidence = std::sync::Arc::new(crate::netgraph::IncidenceMatrix::from_dense(
            3,
            &[vec![1, 1, 0], vec![0, 1, 0]],
        ));
        p.bands_cv.push(None);
        p.bands_ld.push(None);
        p.extra_constraints = vec![HardBound {
            location: 2,
            kind: BoundKind::Lower,
            bound: 10.0,
        }];
        assert!(matches!(
            solve_heuristic(&p, &SolveConfig::default()),
            Err(SolveError::Infeasible(_))
        ));
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let mut p = two_route_fixture([(0.0, 0.0), (0.0, 0.0)]);
        p.extra_constraints = vec![
            HardBound { location: 1, kind: BoundKind::Lower, bound: 5.0 },
            HardBound { location: 1, kind: BoundKind::Upper, bound: 3.0 },
        ];
        assert!(matches!(
            solve_heuristic(&p, &SolveConfig::default()),
            Err(SolveError::Infeasible(_))
        ));
    }

    #[test]
    fn hard_bounds_hold_exactly() {
        let mut p = two_route_fixture([(0.0, 1.0), (0.0, 1.0)]);
        p.route_upper_bound = 100;
        p.extra_constraints = vec![
            HardBound { location: 0, kind: BoundKind::Lower, bound: 12.0 },
            HardBound { location: 1, kind: BoundKind::Upper, bound: 20.0 },
            HardBound { location: 1, kind: BoundKind::Lower, bound: 17.0 },
        ];
        let s = solve_heuristic(&p, &SolveConfig::default()).unwrap();
        let ar = p.incidence.apply(&s.r);
        assert!(ar[0] >= 12 && (17..=20).contains(&ar[1]), "{ar:?}");
    }

    #[test]
    fn deterministic() {
        let p = random_instance(7, 6, 5, 5);
        let cfg = SolveConfig::default();
        assert_eq!(solve_heuristic(&p, &cfg).unwrap().r, solve_heuristic(&p, &cfg).unwrap().r);
    }
}
