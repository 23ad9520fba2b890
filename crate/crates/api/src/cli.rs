use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use demandforge::counts::{calibrate_bounds, chain_bounds, SourceKind, SEGMENTS};
use demandforge::flowcount::{
    count_crossings, count_threshold, default_vehicle_classes, read_detections, ApproachGeometry,
};
use demandforge::netgraph::{grid_network, GridSpec, IncidenceMatrix, RoadNetwork, StubSides};
use demandforge::refine::refine_loop;
use demandforge::synth::{ground_truth_day, noisy_counts};
use log::info;
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::error::ApiError;
use crate::pipeline::{read_constraints, read_counts, write_json, Pipeline};
use crate::server::{serve, AppState};

#[derive(Debug, Parser)]
#[command(name = "demandforge", version, about = "Route-level traffic demand from intersection counts")]
pub struct Cli {
    /// Repeat for more log output (info, debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count stop-bar crossings per lane from a detection stream.
    Count(CountArgs),
    /// Derive α bounds from overlapping manual, CV and LD counts.
    Calibrate(CalibrateArgs),
    /// Solve the day and write route file, solution dump and summary.
    Solve(RunArgs),
    /// Run the feedback loop, then write the same outputs as `solve`.
    Refine(RefineArgs),
    /// Compare simulated counts against one source's bands.
    Report(ReportArgs),
    /// Serve the session over HTTP.
    Serve(ServeArgs),
    /// Write a synthetic grid network, counts and config.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CountMethod {
    Tracked,
    Threshold,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long)]
    pub geometry: Option<PathBuf>,
    /// Comma-separated classes to count.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[arg(long, value_enum, default_value_t = CountMethod::Tracked)]
    pub method: CountMethod,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub counts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accepted constraints to apply, as written by `refine`.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub feedback: Option<PathBuf>,
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value = "CV")]
    pub source: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Overrides the config's port.
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub constraints: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub rows: usize,
    #[arg(long, default_value_t = 3)]
    pub cols: usize,
    #[arg(long, default_value_t = 40.0)]
    pub peak: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<Value, ApiError> {
    match cli.command {
        Command::Count(a) => count(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Solve(a) => solve(a),
        Command::Refine(a) => refine(a),
        Command::Report(a) => report(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Synth(a) => synth(a),
    }
}

fn pick(flag: Option<PathBuf>, from_config: Option<PathBuf>, name: &str) -> Result<PathBuf, ApiError> {
    flag.or(from_config)
        .ok_or_else(|| ApiError::Config(format!("--{name} is required (or set it in --config)")))
}

fn load_config(path: Option<&Path>) -> Result<Option<PipelineConfig>, ApiError> {
    path.map(PipelineConfig::load).transpose()
}

fn count(a: CountArgs) -> Result<Value, ApiError> {
    let config = load_config(a.config.as_deref())?;
    let detections = pick(a.detections, config.as_ref().and_then(|c| c.detections.clone()), "detections")?;
    let geometry = pick(a.geometry, config.as_ref().and_then(|c| c.geometry.clone()), "geometry")?;
    let classes: BTreeSet<String> = match (a.classes, config.and_then(|c| c.vehicle_classes)) {
        (Some(list), _) => list.into_iter().collect(),
        (None, Some(set)) => set,
        (None, None) => default_vehicle_classes(),
    };
    let file = File::open(&detections).map_err(ApiError::io(&detections))?;
    let stream = read_detections(BufReader::new(file))?;
    let text = std::fs::read_to_string(&geometry).map_err(ApiError::io(&geometry))?;
    let geom: ApproachGeometry =
        serde_json::from_str(&text).map_err(|e| ApiError::Config(format!("{}: {e}", geometry.display())))?;
    let counts = match a.method {
        CountMethod::Tracked => count_crossings(&stream, &geom, &classes)?,
        CountMethod::Threshold => count_threshold(&stream, &geom, &classes)?,
    };
    Ok(json!({
        "method": format!("{:?}", a.method).to_lowercase(),
        "total": counts.total(),
        "lanes": counts.lanes,
    }))
}

fn calibrate(a: CalibrateArgs) -> Result<Value, ApiError> {
    let config = load_config(a.config.as_deref())?;
    let path = pick(a.counts, config.map(|c| c.counts), "counts")?;
    let table = read_counts(&path, None)?;
    let cv = calibrate_bounds(&table)?;
    let has_ld = table.iter_source(SourceKind::LD).next().is_some();
    if !has_ld {
        return Ok(serde_json::to_value(cv)?);
    }
    let ld = chain_bounds(&cv.bounds(), &table)?;
    Ok(json!([cv, ld]))
}

fn load_pipeline(args: &RunArgs, tweak: impl FnOnce(&mut PipelineConfig)) -> Result<(Pipeline, PathBuf), ApiError> {
    let mut config = PipelineConfig::load(&args.config)?;
    tweak(&mut config);
    config.validate()?;
    let out = args.out.clone().unwrap_or_else(|| config.output_dir.clone());
    Ok((Pipeline::load(config)?, out))
}

fn initial_specs(args: &RunArgs) -> Result<Vec<demandforge::refine::ConstraintSpec>, ApiError> {
    match &args.constraints {
        Some(p) => read_constraints(p),
        None => Ok(Vec::new()),
    }
}

fn log_progress(t: usize, sol: &demandforge::qipsolve::RouteSolution) {
    info!(
        "segment {t}: objective {:.3}, volume {}, {:.3}s",
        sol.objective,
        sol.total(),
        sol.solve_time
    );
}

fn solve(a: RunArgs) -> Result<Value, ApiError> {
    let (pipeline, out) = load_pipeline(&a, |_| {})?;
    let state = pipeline.solve(initial_specs(&a)?, log_progress)?;
    let (outputs, summary) = pipeline.write_outputs(&state, &out)?;
    Ok(json!({
        "outputs": outputs,
        "total_volume": summary.total_volume,
        "vehicles": summary.vehicles,
        "constraints_hold": summary.constraints_hold,
    }))
}

fn refine(a: RefineArgs) -> Result<Value, ApiError> {
    let (pipeline, out) = load_pipeline(&a.run, |c| {
        if a.feedback.is_some() {
            c.feedback = a.feedback.clone();
        }
        if a.mock_script.is_some() {
            c.mock_script = a.mock_script.clone();
        }
    })?;
    let items = pipeline.feedback_items()?;
    let mut client = pipeline.client()?;
    let state = pipeline.solve(initial_specs(&a.run)?, log_progress)?;
    let (state, tallies) = refine_loop(&items, state, client.as_mut(), pipeline.config.max_attempts)?;
    info!("refinement finished: {tallies}");
    let (outputs, summary) = pipeline.write_outputs(&state, &out)?;
    Ok(json!({
        "outputs": outputs,
        "tallies": tallies,
        "accepted_specs": state.specs.len(),
        "constraints": summary.constraints,
        "constraints_hold": summary.constraints_hold,
        "total_volume": summary.total_volume,
    }))
}

fn report(a: ReportArgs) -> Result<Value, ApiError> {
    let source: SourceKind = a
        .source
        .parse()
        .map_err(|e| ApiError::Config(format!("unknown source {e:?}")))?;
    let (pipeline, out) = load_pipeline(&a.run, |_| {})?;
    let state = pipeline.solve(initial_specs(&a.run)?, log_progress)?;
    let report = pipeline.report(&state, source)?;
    std::fs::create_dir_all(&out).map_err(ApiError::io(&out))?;
    let json_path = out.join(format!("report_{}.json", source.to_string().to_lowercase()));
    let csv_path = json_path.with_extension("csv");
    write_json(&json_path, &report)?;
    report.write_csv(File::create(&csv_path).map_err(ApiError::io(&csv_path))?)?;
    Ok(json!({
        "report_json": json_path,
        "report_csv": csv_path,
        "cells": report.cells.len(),
        "in_band_share": report.in_band_share(),
        "total_volume": report.total_volume,
        "fringe_share": report.fringe_share,
    }))
}

fn serve_cmd(a: ServeArgs) -> Result<Value, ApiError> {
    let mut config = PipelineConfig::load(&a.config)?;
    if let Some(port) = a.port {
        config.port = port;
        config.validate()?;
    }
    let addr = format!("{}:{}", a.host, config.port);
    let specs = match &a.constraints {
        Some(p) => read_constraints(p)?,
        None => Vec::new(),
    };
    let pipeline = Pipeline::load(config)?;
    let client = pipeline.client()?;
    let state = pipeline.solve(specs, log_progress)?;
    let app = AppState::new(Arc::new(pipeline), state, client);
    let rt = tokio::runtime::Runtime::new().map_err(|e| ApiError::Internal(e.to_string()))?;
    rt.block_on(serve(app, &addr))?;
    Ok(json!({ "stopped": addr }))
}

/// Manual counts cover these segments so that `calibrate` has an overlap.
const SYNTH_MANUAL_SEGMENTS: std::ops::Range<usize> = 32..36;

fn synth(a: SynthArgs) -> Result<Value, ApiError> {
    if a.rows == 0 || a.cols == 0 {
        return Err(ApiError::Config("grid needs at least one row and column".into()));
    }
    let doc = grid_network(
        &GridSpec::new(a.rows, a.cols)
            .stubs(StubSides::ALL)
            .turn_connectors(true),
    );
    let network = RoadNetwork::from_doc(&doc)?;
    let routes = network.enumerate_routes();
    let (inc, _) = IncidenceMatrix::build(&routes, network.locations());
    let truth = ground_truth_day(&routes, a.peak, a.seed);
    let mut table = noisy_counts(&inc, &truth, SourceKind::CV, 0.94, 1.12, a.seed.wrapping_add(1));
    for t in SYNTH_MANUAL_SEGMENTS {
        for (j, &y) in inc.apply(&truth[t]).iter().enumerate() {
            if table.get(SourceKind::CV, j, t).is_some() {
                table.insert(SourceKind::M, j, t, y as u64);
            }
        }
    }
    std::fs::create_dir_all(&a.out).map_err(ApiError::io(&a.out))?;
    let net_path = a.out.join("network.json");
    let counts_path = a.out.join("counts.csv");
    let config_path = a.out.join("config.json");
    write_json(&net_path, &doc)?;
    table.write_csv(File::create(&counts_path).map_err(ApiError::io(&counts_path))?)?;
    write_json(&config_path, &PipelineConfig::new("network.json", "counts.csv"))?;
    Ok(json!({
        "network": net_path,
        "counts": counts_path,
        "config": config_path,
        "routes": routes.len(),
        "locations": inc.n_locations(),
        "segments": SEGMENTS,
    }))
}
