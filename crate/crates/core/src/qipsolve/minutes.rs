use serde::{Deserialize, Serialize};

use super::SolveError;

pub const MINUTES: usize = 15;

/// Per-route vehicle counts for each minute of one segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinuteSchedule {
    pub rows: Vec<[i64; MINUTES]>,
}

impl MinuteSchedule {
    pub fn zeros(n: usize) -> Self {
        Self {
            rows: vec![[0; MINUTES]; n],
        }
    }

    pub fn n_routes(&self) -> usize {
        self.rows.len()
    }

    pub fn row_sums(&self) -> Vec<i64> {
        self.rows.iter().map(|row| row.iter().sum()).collect()
    }

    /// Squared distance to another schedule of the same shape.
    pub fn distance(&self, other: &MinuteSchedule) -> i64 {
        self.rows
            .iter()
            .zip(&other.rows)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
            .sum()
    }
}

/// Spreads each route's segment count over its 15 minutes, staying as close
/// as possible (squared distance) to the previous segment's pattern.
///
/// Units are placed one at a time on the minute with the smallest marginal
/// cost `2(c_m - p_m) + 1`, earliest minute first on ties. The per-route
/// problem is separable convex over `c >= 0`, so the greedy fill is optimal;
/// with no previous pattern it reduces to uniform largest-remainder.
pub fn distribute_minutes(r: &[i64], c_prev: Option<&MinuteSchedule>) -> Result<MinuteSchedule, SolveError> {
    if let Some(prev) = c_prev {
        if prev.n_routes() != r.len() {
            return Err(SolveError::Invalid(format!(
                "previous minute schedule has {} routes, expected {}",
                prev.n_routes(),
                r.len()
            )));
        }
    }
    if let Some(i) = r.iter().position(|&v| v < 0) {
        return Err(SolveError::Invalid(format!("route {i} has negative usage")));
    }
    let rows = r
        .iter()
        .enumerate()
        .map(|(i, &total)| {
            let prev = c_prev.map_or([0; MINUTES], |p| p.rows[i]);
            fill_row(total, &prev)
        })
        .collect();
    Ok(MinuteSchedule { rows })
}

fn fill_row(total: i64, prev: &[i64; MINUTES]) -> [i64; MINUTES] {
    let mut c = [0i64; MINUTES];
    let mut left = total;
    while left > 0 {
        let mut best = 0;
        for m in 1..MINUTES {
            if c[m] - prev[m] < c[best] - prev[best] {
                best = m;
            }
        }
        c[best] += 1;
        left -= 1;
    }
    c
}
