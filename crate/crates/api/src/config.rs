use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use demandforge::emit::{assign_vehicle_classes, default_class_dist, ClassDist};
use demandforge::qipsolve::SolveConfig;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// Explicit α bounds for one source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaPair {
    pub alpha_lb: f64,
    pub alpha_ub: f64,
}

/// Pipeline configuration file. Relative paths resolve against the
/// directory holding the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub network: PathBuf,
    pub counts: PathBuf,
    #[serde(default)]
    pub detections: Option<PathBuf>,
    #[serde(default)]
    pub geometry: Option<PathBuf>,
    #[serde(default)]
    pub feedback: Option<PathBuf>,
    /// Scripted model replies; without one the HTTP client is used.
    #[serde(default)]
    pub mock_script: Option<PathBuf>,
    #[serde(default)]
    pub solve: SolveConfig,
    #[serde(default = "default_class_dist")]
    pub class_dist: ClassDist,
    #[serde(default = "default_port")]
    pub port: u16,
    /// Overrides calibration from manual counts.
    #[serde(default)]
    pub cv_bounds: Option<AlphaPair>,
    /// Overrides chaining from CV/LD overlap.
    #[serde(default)]
    pub ld_bounds: Option<AlphaPair>,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: usize,
    #[serde(default = "default_llm_timeout")]
    pub llm_timeout_s: f64,
    #[serde(default)]
    pub vehicle_classes: Option<BTreeSet<String>>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_port() -> u16 {
    8080
}

fn default_max_attempts() -> usize {
    3
}

fn default_llm_timeout() -> f64 {
    60.0
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl PipelineConfig {
    pub fn new(network: impl Into<PathBuf>, counts: impl Into<PathBuf>) -> Self {
        Self {
            network: network.into(),
            counts: counts.into(),
            detections: None,
            geometry: None,
            feedback: None,
            mock_script: None,
            solve: SolveConfig::default(),
            class_dist: default_class_dist(),
            port: default_port(),
            cv_bounds: None,
            ld_bounds: None,
            max_attempts: default_max_attempts(),
            llm_timeout_s: default_llm_timeout(),
            vehicle_classes: None,
            output_dir: default_output_dir(),
        }
    }

    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> Result<Self, ApiError> {
        let text = std::fs::read_to_string(path).map_err(ApiError::io(path))?;
        let mut config: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| ApiError::Config(format!("{}: {e}", path.display())))?;
        config.resolve(path.parent().unwrap_or(Path::new(".")));
        config.validate()?;
        Ok(config)
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.network);
        fix(&mut self.counts);
        fix(&mut self.output_dir);
        for p in [
            &mut self.detections,
            &mut self.geometry,
            &mut self.feedback,
            &mut self.mock_script,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ApiError> {
        let inputs = [
            Some(&self.network),
            Some(&self.counts),
            self.detections.as_ref(),
            self.geometry.as_ref(),
            self.feedback.as_ref(),
            self.mock_script.as_ref(),
        ];
        for p in inputs.into_iter().flatten() {
            if !p.is_file() {
                return Err(ApiError::Config(format!("file not found: {}", p.display())));
            }
        }
        if self.port == 0 {
            return Err(ApiError::Config("port must be in 1..=65535".into()));
        }
        if self.max_attempts == 0 {
            return Err(ApiError::Config("max_attempts must be at least 1".into()));
        }
        if !(self.llm_timeout_s > 0.0 && self.llm_timeout_s.is_finite()) {
            return Err(ApiError::Config("llm_timeout_s must be positive".into()));
        }
        for (name, b) in [("cv_bounds", self.cv_bounds), ("ld_bounds", self.ld_bounds)] {
            if let Some(b) = b {
                if !(b.alpha_lb > 0.0 && b.alpha_lb <= b.alpha_ub && b.alpha_ub.is_finite()) {
                    return Err(ApiError::Config(format!("{name}: need 0 < alpha_lb <= alpha_ub")));
                }
            }
        }
        assign_vehicle_classes(0, &self.class_dist, 0)?;
        Ok(())
    }
}
