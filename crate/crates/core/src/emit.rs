//! Simulator route files and count-diff reports.
//!
//! Route file grammar (one document per day):
//!
//! ```text
//! <?xml version="1.0" encoding="UTF-8"?>
//! <routes>
//!     <vType id="CLASS"/>                              one per class, sorted
//!     <route id="rN" edges="E1 E2 ..."/>               used routes, by id
//!     <vehicle id="vK" type="CLASS" route="rN" depart="S.SS"/>   by depart
//! </routes>
//! ```
//!
//! Vehicles of one minute are spread evenly over it: with `n` vehicles in the
//! minute (all routes, in route order) the k-th departs `k*60/n` seconds in.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counts::{CountBands, SEGMENT_MINUTES};
use crate::netgraph::{IncidenceMatrix, RoadNetwork, Route};
use crate::qipsolve::{slack_for, MinuteSchedule, RouteSolution, MINUTES};

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("class distribution must be nonempty, nonnegative and sum to 1 (sum = {0})")]
    NotNormalized(f64),
    #[error("schedule has {got} routes, expected {expected}")]
    Shape { got: usize, expected: usize },
    #[error("schedules cover {0} segments, more than a day")]
    TooManySegments(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type ClassDist = BTreeMap<String, f64>;

pub fn default_class_dist() -> ClassDist {
    [("car".to_string(), 1.0)].into_iter().collect()
}

fn check_dist(dist: &ClassDist) -> Result<(), EmitError> {
    let sum: f64 = dist.values().sum();
    let ok = !dist.is_empty() && dist.values().all(|p| p.is_finite() && *p >= 0.0) && (sum - 1.0).abs() <= 1e-9;
    if ok {
        Ok(())
    } else {
        Err(EmitError::NotNormalized(sum))
    }
}

/// Draws `count` class labels from `dist` (inverse CDF over classes in name
/// order). Deterministic for a fixed seed.
pub fn assign_vehicle_classes(count: usize, dist: &ClassDist, seed: u64) -> Result<Vec<String>, EmitError> {
    check_dist(dist)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<(&String, f64)> = dist.iter().filter(|(_, &p)| p > 0.0).map(|(c, &p)| (c, p)).collect();
    let mut cdf = Vec::with_capacity(classes.len());
    let mut acc = 0.0;
    for (_, p) in &classes {
        acc += p;
        cdf.push(acc);
    }
    Ok((0..count)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            let k = cdf.partition_point(|&c| c <= u).min(classes.len() - 1);
            classes[k].0.clone()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: String,
    pub route: usize,
    /// Seconds from midnight.
    pub depart: f64,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteFile {
    pub classes: Vec<String>,
    /// (route index, edge ids) for every route with at least one vehicle.
    pub routes: Vec<(usize, Vec<String>)>,
    pub vehicles: Vec<VehicleRecord>,
}

/// One vehicle per unit of every minute cell. `schedules[k]` belongs to
/// segment `first_segment + k`.
pub fn emit_routes(
    schedules: &[MinuteSchedule],
    first_segment: usize,
    routes: &[Route],
    network: &RoadNetwork,
    dist: &ClassDist,
    seed: u64,
) -> Result<RouteFile, EmitError> {
    check_dist(dist)?;
    if first_segment + schedules.len() > 24 * 60 / SEGMENT_MINUTES {
        return Err(EmitError::TooManySegments(first_segment + schedules.len()));
    }
    let mut vehicles: Vec<(f64, usize)> = Vec::new();
    for (k, sched) in schedules.iter().enumerate() {
        if sched.n_routes() != routes.len() {
            return Err(EmitError::Shape {
                got: sched.n_routes(),
                expected: routes.len(),
            });
        }
        let t = first_segment + k;
        for m in 0..MINUTES {
            let n: i64 = sched.rows.iter().map(|row| row[m]).sum();
            let start = 60.0 * (SEGMENT_MINUTES * t + m) as f64;
            let mut slot = 0i64;
            for (i, row) in sched.rows.iter().enumerate() {
                for _ in 0..row[m] {
                    vehicles.push((start + (slot * 60) as f64 / n as f64, i));
                    slot += 1;
                }
            }
        }
    }
    vehicles.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let labels = assign_vehicle_classes(vehicles.len(), dist, seed)?;

    let mut used: Vec<usize> = vehicles.iter().map(|v| v.1).collect();
    used.sort_unstable();
    used.dedup();
    Ok(RouteFile {
        classes: dist.keys().cloned().collect(),
        routes: used
            .into_iter()
            .map(|i| {
                let edges = network.edge_ids(&routes[i].edge_sequence).into_iter().map(str::to_string).collect();
                (routes[i].id, edges)
            })
            .collect(),
        vehicles: vehicles
            .into_iter()
            .zip(labels)
            .enumerate()
            .map(|(k, ((depart, route), class))| VehicleRecord {
                id: format!("v{k}"),
                route: routes[route].id,
                depart,
                class,
            })
            .collect(),
    })
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

impl RouteFile {
    pub fn to_xml(&self) -> String {
        let mut s = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<routes>\n");
        for c in &self.classes {
            let _ = writeln!(s, "    <vType id=\"{}\"/>", escape(c));
        }
        for (id, edges) in &self.routes {
            let _ = writeln!(s, "    <route id=\"r{id}\" edges=\"{}\"/>", escape(&edges.join(" ")));
        }
        for v in &self.vehicles {
            let _ = writeln!(
                s,
                "    <vehicle id=\"{}\" type=\"{}\" route=\"r{}\" depart=\"{:.2}\"/>",
                v.id,
                escape(&v.class),
                v.route,
                v.depart
            );
        }
        s.push_str("</routes>\n");
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffCell {
    pub segment: usize,
    pub location: usize,
    pub simulated: i64,
    pub lo: f64,
    pub hi: f64,
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentDiff {
    pub segment: usize,
    pub cells: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub in_band: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub cells: Vec<DiffCell>,
    pub segments: Vec<SegmentDiff>,
    pub total_volume: i64,
    pub fringe_share: f64,
}

/// Simulated counts against one source's bands, cell by cell. `solutions[t]`
/// is segment `t`.
pub fn diff_report(solutions: &[RouteSolution], incidence: &IncidenceMatrix, bands: &CountBands, routes: &[Route]) -> DiffReport {
    let mut cells = Vec::new();
    let mut segments = Vec::with_capacity(solutions.len());
    for (t, sol) in solutions.iter().enumerate() {
        let ar = incidence.apply(&sol.r);
        let first = cells.len();
        for (j, &y) in ar.iter().enumerate() {
            if let Some(b) = bands.get(j, t) {
                cells.push(DiffCell {
                    segment: t,
                    location: j,
                    simulated: y,
                    lo: b.lo,
                    hi: b.hi,
                    violation: slack_for(y as f64, b),
                });
            }
        }
        let mine = &cells[first..];
        let n = mine.len();
        let (mean, min, max) = if n == 0 {
            (0.0, 0.0, 0.0)
        } else {
            (
                mine.iter().map(|c| c.violation).sum::<f64>() / n as f64,
                mine.iter().map(|c| c.violation).fold(f64::INFINITY, f64::min),
                mine.iter().map(|c| c.violation).fold(f64::NEG_INFINITY, f64::max),
            )
        };
        segments.push(SegmentDiff {
            segment: t,
            cells: n,
            mean,
            min,
            max,
            in_band: mine.iter().filter(|c| c.violation == 0.0).count(),
        });
    }
    let total_volume = solutions.iter().map(RouteSolution::total).sum();
    DiffReport {
        cells,
        segments,
        total_volume,
        fringe_share: fringe_share(solutions.iter().map(|s| s.r.as_slice()), routes),
    }
}

fn fringe_share<'a>(rs: impl Iterator<Item = &'a [i64]>, routes: &[Route]) -> f64 {
    let (mut fringe, mut total) = (0i64, 0i64);
    for r in rs {
        for (v, route) in r.iter().zip(routes) {
            total += v;
            if route.fringe {
                fringe += v;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        fringe as f64 / total as f64
    }
}

impl DiffReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EmitError> {
        let mut w = csv::Writer::from_writer(out);
        for c in &self.cells {
            w.serialize(c)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Share of cells whose count lies inside the band.
    pub fn in_band_share(&self) -> f64 {
        if self.cells.is_empty() {
            return 1.0;
        }
        self.cells.iter().filter(|c| c.violation == 0.0).count() as f64 / self.cells.len() as f64
    }
}

/// Nonzero route usages as CSV `route,segment,count`.
pub fn write_solution_csv<W: Write>(solutions: &[RouteSolution], routes: &[Route], out: W) -> Result<(), EmitError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["route", "segment", "count"])?;
    for (t, sol) in solutions.iter().enumerate() {
        for (i, &c) in sol.r.iter().enumerate() {
            if c != 0 {
                w.write_record([routes[i].id.to_string(), t.to_string(), c.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlackNorms {
    pub cv: f64,
    pub ld: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub segment: usize,
    pub objective: f64,
    pub slack_norms: SlackNorms,
    pub fringe_share: f64,
    pub solve_time: f64,
}

pub fn segment_summaries(solutions: &[RouteSolution], routes: &[Route]) -> Vec<SegmentSummary> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    solutions
        .iter()
        .enumerate()
        .map(|(t, s)| SegmentSummary {
            segment: t,
            objective: s.objective,
            slack_norms: SlackNorms {
                cv: norm(&s.slack_cv),
                ld: norm(&s.slack_ld),
            },
            fringe_share: fringe_share(std::iter::once(s.r.as_slice()), routes),
            solve_time: s.solve_time,
        })
        .collect()
}
