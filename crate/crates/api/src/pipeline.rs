use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use demandforge::counts::{
    calibrate_bounds, chain_bounds, make_bands, CalibrationBounds, CountBands, CountTable, SourceKind, SEGMENTS,
};
use demandforge::emit::{diff_report, emit_routes, segment_summaries, write_solution_csv, DiffReport, SegmentSummary};
use demandforge::netgraph::{IncidenceMatrix, RoadNetwork, Route};
use demandforge::qipsolve::{
    day_problems, distribute_minutes, solve_day_with_progress, MinuteSchedule, RouteSolution, SegmentProblem,
};
use demandforge::refine::{ConstraintSpec, FeedbackItem, HttpClient, LlmClient, MockClient, RefinementState};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{AlphaPair, PipelineConfig};
use crate::error::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundsOrigin {
    Config,
    Calibrated,
    Default,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub cv: CalibrationBounds,
    pub cv_origin: BoundsOrigin,
    pub ld: CalibrationBounds,
    pub ld_origin: BoundsOrigin,
}

fn overlaps(table: &CountTable, a: SourceKind, b: SourceKind) -> bool {
    table.iter_source(a).any(|(j, t, _)| table.get(b, j, t).is_some())
}

/// CV bounds from config, else from manual/CV overlap, else defaults; LD
/// bounds likewise, chained from CV.
pub fn resolve_bounds(
    table: &CountTable,
    cv_override: Option<AlphaPair>,
    ld_override: Option<AlphaPair>,
) -> Result<Calibration, ApiError> {
    let (cv, cv_origin) = match cv_override {
        Some(p) => (CalibrationBounds::new(SourceKind::CV, p.alpha_lb, p.alpha_ub)?, BoundsOrigin::Config),
        None if overlaps(table, SourceKind::M, SourceKind::CV) => {
            (calibrate_bounds(table)?.bounds(), BoundsOrigin::Calibrated)
        }
        None => (CalibrationBounds::default_cv(), BoundsOrigin::Default),
    };
    let (ld, ld_origin) = match ld_override {
        Some(p) => (CalibrationBounds::new(SourceKind::LD, p.alpha_lb, p.alpha_ub)?, BoundsOrigin::Config),
        None if overlaps(table, SourceKind::CV, SourceKind::LD) => {
            (chain_bounds(&cv, table)?.bounds(), BoundsOrigin::Calibrated)
        }
        None => (CalibrationBounds::default_ld(), BoundsOrigin::Default),
    };
    Ok(Calibration {
        cv,
        cv_origin,
        ld,
        ld_origin,
    })
}

/// Everything derived from the config before solving: network, routes,
/// bands and the per-segment base problems.
#[derive(Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub network: Arc<RoadNetwork>,
    pub routes: Vec<Route>,
    pub incidence: Arc<IncidenceMatrix>,
    pub counts: CountTable,
    pub calibration: Calibration,
    pub bands_cv: CountBands,
    pub bands_ld: CountBands,
    pub base: Vec<SegmentProblem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub segments: usize,
    pub routes: usize,
    pub locations: usize,
    pub total_volume: i64,
    pub vehicles: usize,
    pub calibration: Calibration,
    pub constraints: usize,
    pub constraints_hold: bool,
    pub per_segment: Vec<SegmentSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub routes_xml: PathBuf,
    pub solution_csv: PathBuf,
    pub summary_json: PathBuf,
    pub constraints_json: PathBuf,
    pub vehicles: usize,
}

pub fn read_network(path: &Path) -> Result<RoadNetwork, ApiError> {
    let text = std::fs::read_to_string(path).map_err(ApiError::io(path))?;
    Ok(RoadNetwork::from_json(&text)?)
}

pub fn read_counts(path: &Path, n_locations: Option<usize>) -> Result<CountTable, ApiError> {
    let file = File::open(path).map_err(ApiError::io(path))?;
    Ok(CountTable::read_csv(BufReader::new(file), n_locations, None)?)
}

fn create(path: &Path) -> Result<BufWriter<File>, ApiError> {
    Ok(BufWriter::new(File::create(path).map_err(ApiError::io(path))?))
}

/// Minute schedules for consecutive segments, each shaped by the previous.
pub fn minute_schedules(solutions: &[RouteSolution]) -> Result<Vec<MinuteSchedule>, ApiError> {
    let mut out: Vec<MinuteSchedule> = Vec::with_capacity(solutions.len());
    for sol in solutions {
        let sched = distribute_minutes(&sol.r, out.last())?;
        out.push(sched);
    }
    Ok(out)
}

impl Pipeline {
    pub fn load(config: PipelineConfig) -> Result<Self, ApiError> {
        let network = Arc::new(read_network(&config.network)?);
        let routes = network.enumerate_routes();
        let (incidence, zero) = IncidenceMatrix::build(&routes, network.locations());
        if !zero.is_empty() {
            log::warn!("{} counting locations are not crossed by any route", zero.len());
        }
        let incidence = Arc::new(incidence);
        let counts = read_counts(&config.counts, Some(network.locations().len()))?;
        counts.check_coverage()?;
        let calibration = resolve_bounds(&counts, config.cv_bounds, config.ld_bounds)?;
        let bands_cv = make_bands(&counts, &calibration.cv, SourceKind::CV);
        let bands_ld = make_bands(&counts, &calibration.ld, SourceKind::LD);
        let base = day_problems(
            incidence.clone(),
            &routes,
            &bands_cv,
            &bands_ld,
            |_| Vec::new(),
            SEGMENTS,
            &config.solve,
        );
        info!(
            "loaded {} routes over {} locations ({} nonzeros)",
            routes.len(),
            incidence.n_locations(),
            incidence.nnz()
        );
        Ok(Self {
            config,
            network,
            routes,
            incidence,
            counts,
            calibration,
            bands_cv,
            bands_ld,
            base,
        })
    }

    pub fn bands(&self, source: SourceKind) -> Option<&CountBands> {
        match source {
            SourceKind::CV => Some(&self.bands_cv),
            SourceKind::LD => Some(&self.bands_ld),
            SourceKind::M => None,
        }
    }

    /// Solves the day under `specs`, reporting each finished segment.
    pub fn solve(
        &self,
        specs: Vec<ConstraintSpec>,
        progress: impl FnMut(usize, &RouteSolution),
    ) -> Result<RefinementState, ApiError> {
        let mut state = RefinementState::with_solutions(
            self.network.clone(),
            self.base.clone(),
            Vec::new(),
            self.config.solve.clone(),
        );
        state.specs = specs;
        state.solutions = if state.specs.is_empty() {
            solve_day_with_progress(&state.base, &state.config, progress)?
        } else {
            state.solve_all_with_progress(progress)?
        };
        Ok(state)
    }

    pub fn feedback_items(&self) -> Result<Vec<FeedbackItem>, ApiError> {
        let path = self
            .config
            .feedback
            .as_ref()
            .ok_or_else(|| ApiError::Config("no feedback file configured".into()))?;
        let file = File::open(path).map_err(ApiError::io(path))?;
        Ok(FeedbackItem::read_jsonl(BufReader::new(file))?)
    }

    /// The scripted client when a mock script is configured, otherwise the
    /// HTTP client from the environment.
    pub fn client(&self) -> Result<Box<dyn LlmClient>, ApiError> {
        match &self.config.mock_script {
            Some(path) => {
                let file = File::open(path).map_err(ApiError::io(path))?;
                Ok(Box::new(MockClient::from_jsonl(BufReader::new(file))?))
            }
            None => Ok(Box::new(HttpClient::from_env(Duration::from_secs_f64(
                self.config.llm_timeout_s,
            ))?)),
        }
    }

    pub fn report(&self, state: &RefinementState, source: SourceKind) -> Result<DiffReport, ApiError> {
        let bands = self
            .bands(source)
            .ok_or_else(|| ApiError::BadRequest(format!("no bands for source {source}")))?;
        Ok(diff_report(&state.solutions, &self.incidence, bands, &self.routes))
    }

    pub fn summary(&self, state: &RefinementState, vehicles: usize) -> RunSummary {
        RunSummary {
            segments: state.solutions.len(),
            routes: self.routes.len(),
            locations: self.incidence.n_locations(),
            total_volume: state.solutions.iter().map(RouteSolution::total).sum(),
            vehicles,
            calibration: self.calibration,
            constraints: state.atoms().count(),
            constraints_hold: state.constraints_hold(),
            per_segment: segment_summaries(&state.solutions, &self.routes),
        }
    }

    /// Writes the route file, solution dump, summary and accepted constraints
    /// into `dir`.
    pub fn write_outputs(&self, state: &RefinementState, dir: &Path) -> Result<(Outputs, RunSummary), ApiError> {
        std::fs::create_dir_all(dir).map_err(ApiError::io(dir))?;
        let schedules = minute_schedules(&state.solutions)?;
        let file = emit_routes(
            &schedules,
            0,
            &self.routes,
            &self.network,
            &self.config.class_dist,
            self.config.solve.seed,
        )?;
        let outputs = Outputs {
            routes_xml: dir.join("routes.rou.xml"),
            solution_csv: dir.join("solution.csv"),
            summary_json: dir.join("summary.json"),
            constraints_json: dir.join("constraints.json"),
            vehicles: file.vehicles.len(),
        };
        let mut w = create(&outputs.routes_xml)?;
        w.write_all(file.to_xml().as_bytes()).map_err(ApiError::io(&outputs.routes_xml))?;
        w.flush().map_err(ApiError::io(&outputs.routes_xml))?;
        write_solution_csv(&state.solutions, &self.routes, create(&outputs.solution_csv)?)?;
        let summary = self.summary(state, outputs.vehicles);
        write_json(&outputs.summary_json, &summary)?;
        write_json(&outputs.constraints_json, &state.specs)?;
        Ok((outputs, summary))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ApiError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(ApiError::io(path))?;
    w.flush().map_err(ApiError::io(path))?;
    Ok(())
}

pub fn read_constraints(path: &Path) -> Result<Vec<ConstraintSpec>, ApiError> {
    let text = std::fs::read_to_string(path).map_err(ApiError::io(path))?;
    Ok(serde_json::from_str(&text)?)
}
