//! Synthetic demand for fixtures and benchmarks: a ground-truth day of route
//! usages and the noisy detector counts it would produce.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::counts::{CountTable, SourceKind, SEGMENTS};
use crate::netgraph::{grid_network, GridSpec, IncidenceMatrix, NetworkDoc, RoadNetwork, Route, StubSides};

/// Noise factors applied to synthetic CV counts.
pub const CV_NOISE: (f64, f64) = (0.94, 1.12);

/// Relative demand for segment `t`: low overnight, morning and evening
/// peaks. Always in (0, 1].
pub fn day_profile(t: usize) -> f64 {
    let h = (t as f64 + 0.5) * 24.0 / SEGMENTS as f64;
    let bump = |center: f64, width: f64| (-((h - center) / width).powi(2)).exp();
    (0.08 + 0.55 * bump(8.0, 1.5) + 0.75 * bump(17.0, 1.8) + 0.35 * bump(12.5, 3.0)).min(1.0)
}

/// Route usages per segment: each route gets a base rate in
/// `[0, peak_max]` (nonfringe routes a tenth of that), scaled by
/// [`day_profile`] and rounded.
pub fn ground_truth_day(routes: &[Route], peak_max: f64, seed: u64) -> Vec<Vec<i64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = routes
        .iter()
        .map(|r| {
            let b = rng.random_range(0.0..=peak_max);
            if r.fringe {
                b
            } else {
                b * 0.1
            }
        })
        .collect();
    (0..SEGMENTS)
        .map(|t| {
            let p = day_profile(t);
            base.iter().map(|b| (b * p).round() as i64).collect()
        })
        .collect()
}

/// Counts a detector would report if it saw `A·r / u` with `u` drawn
/// uniformly from `[factor_lo, factor_hi]` per cell, so that the true count
/// lies in `[factor_lo·f, factor_hi·f]` up to rounding.
pub fn noisy_counts(
    incidence: &IncidenceMatrix,
    truth: &[Vec<i64>],
    source: SourceKind,
    factor_lo: f64,
    factor_hi: f64,
    seed: u64,
) -> CountTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = CountTable::new();
    for (t, r) in truth.iter().enumerate() {
        for (j, &y) in incidence.apply(r).iter().enumerate() {
            if incidence.location_routes(j).is_empty() {
                continue;
            }
            let u = rng.random_range(factor_lo..=factor_hi);
            table.insert(source, j, t, (y as f64 / u).round() as u64);
        }
    }
    table
}

/// A grid with stubs on every side and turn connectors, a ground-truth day
/// and the CV counts it produces.
#[derive(Debug, Clone)]
pub struct GridFixture {
    pub doc: NetworkDoc,
    pub network: Arc<RoadNetwork>,
    pub routes: Vec<Route>,
    pub incidence: Arc<IncidenceMatrix>,
    pub truth: Vec<Vec<i64>>,
    pub counts: CountTable,
}

pub fn grid_fixture(rows: usize, cols: usize, peak_max: f64, seed: u64) -> GridFixture {
    let doc = grid_network(&GridSpec::new(rows, cols).stubs(StubSides::ALL).turn_connectors(true));
    let network = RoadNetwork::from_doc(&doc).expect("grid networks are valid");
    let routes = network.enumerate_routes();
    let (incidence, _) = IncidenceMatrix::build(&routes, network.locations());
    let truth = ground_truth_day(&routes, peak_max, seed);
    let counts = noisy_counts(&incidence, &truth, SourceKind::CV, CV_NOISE.0, CV_NOISE.1, seed.wrapping_add(1));
    GridFixture {
        doc,
        network: Arc::new(network),
        routes,
        incidence: Arc::new(incidence),
        truth,
        counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{grid_network, GridSpec, RoadNetwork};

    #[test]
    fn profile_shape() {
        assert!((0..SEGMENTS).all(|t| day_profile(t) > 0.0 && day_profile(t) <= 1.0));
        assert!(day_profile(68) > 3.0 * day_profile(12));
    }

    #[test]
    fn counts_bracket_truth() {
        let net = RoadNetwork::from_doc(&grid_network(&GridSpec::new(2, 2))).unwrap();
        let routes = net.enumerate_routes();
        let (inc, _) = IncidenceMatrix::build(&routes, net.locations());
        let truth = ground_truth_day(&routes, 40.0, 1);
        assert_eq!(truth.len(), SEGMENTS);
        let table = noisy_counts(&inc, &truth, SourceKind::CV, 0.94, 1.12, 2);
        for (j, t, f) in table.iter_source(SourceKind::CV) {
            let y = inc.apply(&truth[t])[j] as f64;
            let f = f as f64;
            assert!(y >= 0.94 * (f - 0.5) - 1e-9 && y <= 1.12 * (f + 0.5) + 1e-9);
        }
        assert_eq!(table, noisy_counts(&inc, &truth, SourceKind::CV, 0.94, 1.12, 2));
    }
}
