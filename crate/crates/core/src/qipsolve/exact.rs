use std::time::Instant;

use super::{
    improves, objective_with, RouteSolution, SegmentProblem, SolveConfig, SolveError, SolverMode, StopReason,
    EXACT_BOUND_LIMIT,
};

/// Exhaustive search over `{0..=U}^n` in lexicographic order; the first
/// point reaching the optimum (under the tie tolerance) wins.
pub fn solve_exact(problem: &SegmentProblem, config: &SolveConfig) -> Result<RouteSolution, SolveError> {
    problem.validate()?;
    let n = problem.n_routes();
    let bound = problem.route_upper_bound;
    if n > config.exact_mode_limit || bound > EXACT_BOUND_LIMIT {
        return Err(SolveError::TooLarge {
            routes: n,
            limit: config.exact_mode_limit,
            bound,
        });
    }
    let started = Instant::now();
    let inc = &problem.incidence;

    let mut r = vec![0i64; n];
    let mut ar = vec![0i64; problem.n_locations()];
    let mut best: Option<(f64, Vec<i64>)> = None;

    loop {
        if problem.hard_feasible(&ar) {
            let value = objective_with(&r, &ar, problem);
            if best.as_ref().is_none_or(|(b, _)| improves(value, *b)) {
                best = Some((value, r.clone()));
            }
        }
        // odometer, last coordinate fastest
        let mut i = n;
        loop {
            if i == 0 {
                return match best {
                    Some((_, r)) => Ok(RouteSolution::assemble(
                        r,
                        problem,
                        SolverMode::Exact,
                        started,
                        StopReason::Optimal,
                    )),
                    None => Err(SolveError::Infeasible(
                        "no integer route vector satisfies the hard bounds".into(),
                    )),
                };
            }
            i -= 1;
            if r[i] < bound {
                r[i] += 1;
                for &j in inc.route_locations(i) {
                    ar[j] += 1;
                }
                break;
            }
            for &j in inc.route_locations(i) {
                ar[j] -= r[i];
            }
            r[i] = 0;
        }
    }
}
