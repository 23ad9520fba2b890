//! Stop-bar vehicle counting from pre-tracked bounding boxes.
//!
//! Image y grows downward and approaching vehicles move down the frame. A
//! track is eligible only if first seen above the stop bar; it is counted
//! once, at its first detection below the bar, in the lane containing its
//! box center at that detection. Dropped frames around the bar therefore do
//! not lose vehicles. [`count_threshold`] is the single-frame proximity rule
//! kept for comparison.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("unordered stream: frame {frame} follows frame {previous} (line {index})")]
    Unordered { index: usize, previous: u64, frame: u64 },
    #[error("invalid detection at line {index}: {reason}")]
    InvalidDetection { index: usize, reason: String },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: u64,
    pub track: i64,
    pub class: String,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: u32,
    pub left_x: f64,
    pub right_x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproachGeometry {
    pub stop_bar_y: f64,
    pub epsilon: f64,
    pub lanes: Vec<Lane>,
    /// Approaches filmed moving up the frame are mirrored vertically.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flip_y: bool,
}

impl ApproachGeometry {
    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.epsilon > 0.0) {
            return Err(FlowError::InvalidGeometry(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        let mut lanes: Vec<&Lane> = self.lanes.iter().collect();
        lanes.sort_by(|a, b| a.left_x.total_cmp(&b.left_x));
        for lane in &lanes {
            if !(lane.left_x < lane.right_x) {
                return Err(FlowError::InvalidGeometry(format!(
                    "lane {}: left_x {} is not below right_x {}",
                    lane.id, lane.left_x, lane.right_x
                )));
            }
        }
        for pair in lanes.windows(2) {
            if pair[1].left_x < pair[0].right_x {
                return Err(FlowError::InvalidGeometry(format!(
                    "lanes {} and {} overlap",
                    pair[0].id, pair[1].id
                )));
            }
        }
        let ids: BTreeSet<u32> = self.lanes.iter().map(|l| l.id).collect();
        if ids.len() != self.lanes.len() {
            return Err(FlowError::InvalidGeometry("duplicate lane id".into()));
        }
        Ok(())
    }

    fn lane_at(&self, cx: f64) -> Option<u32> {
        self.lanes
            .iter()
            .find(|l| l.left_x <= cx && cx <= l.right_x)
            .map(|l| l.id)
    }

    // y in the "downward = approaching" frame
    fn oriented(&self, y: f64) -> f64 {
        if self.flip_y {
            -y
        } else {
            y
        }
    }
}

pub fn default_vehicle_classes() -> BTreeSet<String> {
    ["car", "truck", "bus", "motorcycle"].iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneCounts {
    pub lanes: BTreeMap<u32, u64>,
    pub counted_tracks: BTreeSet<i64>,
}

impl LaneCounts {
    fn empty(geom: &ApproachGeometry) -> Self {
        Self {
            lanes: geom.lanes.iter().map(|l| (l.id, 0)).collect(),
            counted_tracks: BTreeSet::new(),
        }
    }

    pub fn total(&self) -> u64 {
        self.lanes.values().sum()
    }

    fn record(&mut self, lane: u32, track: i64) {
        *self.lanes.entry(lane).or_default() += 1;
        self.counted_tracks.insert(track);
    }
}

fn check_stream(stream: &[Detection]) -> Result<(), FlowError> {
    for (index, d) in stream.iter().enumerate() {
        if !(d.w > 0.0 && d.h > 0.0) {
            return Err(FlowError::InvalidDetection {
                index,
                reason: format!("box size must be positive, got {}x{}", d.w, d.h),
            });
        }
        if index > 0 && d.frame < stream[index - 1].frame {
            return Err(FlowError::Unordered {
                index,
                previous: stream[index - 1].frame,
                frame: d.frame,
            });
        }
    }
    Ok(())
}

/// Tracked stop-bar crossing count.
pub fn count_crossings(
    stream: &[Detection],
    geom: &ApproachGeometry,
    vehicle_classes: &BTreeSet<String>,
) -> Result<LaneCounts, FlowError> {
    geom.validate()?;
    check_stream(stream)?;
    let bar = geom.oriented(geom.stop_bar_y);
    let mut eligible: HashMap<i64, bool> = HashMap::new();
    let mut counts = LaneCounts::empty(geom);

    for d in stream {
        let y = geom.oriented(d.cy);
        let ok = *eligible
            .entry(d.track)
            .or_insert_with(|| y < bar && vehicle_classes.contains(&d.class));
        if !ok || counts.counted_tracks.contains(&d.track) || y <= bar {
            continue;
        }
        match geom.lane_at(d.cx) {
            Some(lane) => counts.record(lane, d.track),
            None => debug!(
                "track {} below stop bar at frame {} with cx {} outside every lane",
                d.track, d.frame, d.cx
            ),
        }
    }
    Ok(counts)
}

/// Single-frame rule: count a detection within `epsilon` of the bar inside a
/// lane, once per track.
pub fn count_threshold(
    stream: &[Detection],
    geom: &ApproachGeometry,
    vehicle_classes: &BTreeSet<String>,
) -> Result<LaneCounts, FlowError> {
    geom.validate()?;
    check_stream(stream)?;
    let bar = geom.oriented(geom.stop_bar_y);
    let mut counts = LaneCounts::empty(geom);
    for d in stream {
        if counts.counted_tracks.contains(&d.track) || !vehicle_classes.contains(&d.class) {
            continue;
        }
        if (geom.oriented(d.cy) - bar).abs() > geom.epsilon {
            continue;
        }
        if let Some(lane) = geom.lane_at(d.cx) {
            counts.record(lane, d.track);
        }
    }
    Ok(counts)
}

/// One scripted vehicle passing the stop bar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub track: i64,
    pub lane: u32,
    pub class: String,
    /// Frame at which the box center sits exactly on the bar.
    pub frame: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub geometry: ApproachGeometry,
    pub crossings: Vec<Crossing>,
    /// Downward speed in pixels per frame.
    pub speed_px: f64,
    pub frames_before: u64,
    pub frames_after: u64,
}

impl Scenario {
    /// `n` crossings spread over lanes and frames, classes drawn from the
    /// default vehicle set.
    pub fn random(geometry: ApproachGeometry, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = ["car", "car", "car", "truck", "bus", "motorcycle"];
        let crossings = (0..n)
            .map(|k| Crossing {
                track: k as i64 + 1,
                lane: geometry.lanes[rng.random_range(0..geometry.lanes.len())].id,
                class: classes[rng.random_range(0..classes.len())].to_string(),
                frame: 20 + rng.random_range(0..(10 * n as u64 + 1)),
            })
            .collect();
        Self {
            speed_px: geometry.epsilon * 1.5,
            frames_before: 12,
            frames_after: 12,
            geometry,
            crossings,
        }
    }

    pub fn true_count(&self) -> usize {
        self.crossings.len()
    }
}

/// Renders a scenario as a detection stream, dropping each frame of each
/// track independently with probability `drop_rate`. The first (above-bar)
/// and last (below-bar) frame of every track are always kept.
pub fn synth_stream(scenario: &Scenario, drop_rate: f64, seed: u64) -> Vec<Detection> {
    assert!((0.0..1.0).contains(&drop_rate), "drop_rate must be in [0, 1)");
    assert!(scenario.frames_before >= 1 && scenario.frames_after >= 1);
    let geom = &scenario.geometry;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in &scenario.crossings {
        let lane = geom
            .lanes
            .iter()
            .find(|l| l.id == c.lane)
            .expect("scripted lane exists in geometry");
        let center = 0.5 * (lane.left_x + lane.right_x);
        let sway = 0.2 * (lane.right_x - lane.left_x);
        let start = c.frame.saturating_sub(scenario.frames_before);
        let end = c.frame + scenario.frames_after;
        for f in start..=end {
            let keep = f == start || f == end || rng.random::<f64>() >= drop_rate;
            if !keep {
                continue;
            }
            let offset = scenario.speed_px * (f as f64 - c.frame as f64);
            let cy = if geom.flip_y {
                geom.stop_bar_y - offset
            } else {
                geom.stop_bar_y + offset
            };
            let phase = (c.track as f64 * 0.7 + f as f64 * 0.3).sin();
            out.push(Detection {
                frame: f,
                track: c.track,
                class: c.class.clone(),
                cx: center + sway * phase,
                cy,
                w: 40.0,
                h: 30.0,
            });
        }
    }
    out.sort_by(|a, b| (a.frame, a.track).cmp(&(b.frame, b.track)));
    out
}

pub fn read_detections<R: BufRead>(reader: R) -> Result<Vec<Detection>, FlowError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_detections<W: Write>(mut out: W, stream: &[Detection]) -> Result<(), FlowError> {
    for d in stream {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
