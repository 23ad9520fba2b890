#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use demandforge::counts::SourceKind;
use demandforge::netgraph::{grid_network, GridSpec, IncidenceMatrix, RoadNetwork, StubSides};
use demandforge::refine::{LlmClient, RefinementState};
use demandforge::synth::{ground_truth_day, noisy_counts};
use demandforge_api::{AppState, Pipeline, PipelineConfig};
use tempfile::TempDir;

pub const PEAK: usize = 68;
pub const CENTER: u32 = 5;

pub fn grid_spec() -> GridSpec {
    GridSpec::new(3, 3).stubs(StubSides::ALL).turn_connectors(true)
}

/// Writes network.json and counts.csv for the 3×3 grid and returns the
/// config pointing at them.
pub fn write_grid_fixture(dir: &Path) -> PipelineConfig {
    let doc = grid_network(&grid_spec());
    let network = RoadNetwork::from_doc(&doc).unwrap();
    let routes = network.enumerate_routes();
    let (inc, _) = IncidenceMatrix::build(&routes, network.locations());
    let truth = ground_truth_day(&routes, 30.0, 7);
    let table = noisy_counts(&inc, &truth, SourceKind::CV, 0.94, 1.12, 8);
    std::fs::write(dir.join("network.json"), serde_json::to_string(&doc).unwrap()).unwrap();
    table
        .write_csv(std::fs::File::create(dir.join("counts.csv")).unwrap())
        .unwrap();
    let mut config = PipelineConfig::new("network.json", "counts.csv");
    config.max_attempts = 1;
    config.output_dir = PathBuf::from("out");
    config
}

pub fn write_config(dir: &Path, config: &PipelineConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

pub struct Session {
    pub dir: TempDir,
    pub pipeline: Arc<Pipeline>,
    pub state: RefinementState,
}

/// Loaded and solved grid session.
pub fn session() -> Session {
    let dir = TempDir::new().unwrap();
    let config = write_grid_fixture(dir.path());
    let path = write_config(dir.path(), &config);
    let pipeline = Pipeline::load(PipelineConfig::load(&path).unwrap()).unwrap();
    let state = pipeline.solve(Vec::new(), |_, _| {}).unwrap();
    Session {
        dir,
        pipeline: Arc::new(pipeline),
        state,
    }
}

impl Session {
    pub fn app(&self, client: Box<dyn LlmClient>) -> Arc<AppState> {
        AppState::new(self.pipeline.clone(), self.state.clone(), client)
    }
}

pub fn atom(i: u32, a: &str, m: &str, kind: &str, bound: f64, adj: &str) -> String {
    format!(r#"{{"intersection":{i},"approach":"{a}","movement":"{m}","kind":"{kind}","bound":{bound},"adjacency":"{adj}"}}"#)
}

pub fn reply(atoms: &[String]) -> String {
    format!(r#"{{"atoms":[{}]}}"#, atoms.join(","))
}
