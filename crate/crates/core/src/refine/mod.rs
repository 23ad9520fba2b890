//! Feedback-driven constraint refinement.
//!
//! Stakeholder feedback about one intersection at one segment is turned into
//! hard bounds on simulated counts by a language model. A candidate is kept
//! only if it parses against the constraint schema, the constrained problems
//! for the target segment and its neighbours are solvable, and the resulting
//! counts move in the direction the feedback asked for.

mod client;
mod intent;

pub use client::{HttpClient, LlmClient, MockClient, KEY_VAR, URL_VAR};
pub use intent::{named_approaches, parse_intent, Intent};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counts::SEGMENTS;
use crate::netgraph::{Approach, IncidenceMatrix, Movement, RoadNetwork};
use crate::qipsolve::{
    solve_day, solve_day_with_progress, solve_segment, BoundKind, HardBound, RouteSolution, SegmentProblem, SolveConfig, SolveError,
};

/// Fallback relaxation for adjacent-segment lower bounds.
pub const ADJACENT_LOWER_FACTOR: f64 = 0.9;
/// Fallback relaxation for adjacent-segment upper bounds.
pub const ADJACENT_UPPER_FACTOR: f64 = 1.1;
/// Tool calls allowed per generation before the reply counts as malformed.
pub const MAX_TOOL_ROUNDS: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RefineError {
    #[error("syntactic: {0}")]
    Syntactic(String),
    #[error("unknown location: {0}")]
    UnknownLocation(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("invalid feedback: {0}")]
    InvalidFeedback(String),
    #[error("no solution for segment {0}")]
    MissingSolution(usize),
    #[error("language model client: {0}")]
    Client(String),
    #[error("language model timed out: {0}")]
    Timeout(String),
    #[error("counts did not move the way the feedback asks")]
    SemanticMismatch,
    #[error("mock script exhausted")]
    ScriptExhausted,
    #[error("feedback {k}: no acceptable constraints after {} attempts ({tallies})", tallies.attempts)]
    AttemptsExhausted { k: usize, tallies: Tallies },
    #[error(transparent)]
    Solve(SolveError),
}

impl From<SolveError> for RefineError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::Infeasible(msg) => RefineError::Infeasible(msg),
            other => RefineError::Solve(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackItem {
    pub k: usize,
    pub segment: usize,
    pub intersection: u32,
    pub text: String,
}

impl FeedbackItem {
    pub fn read_jsonl<R: std::io::BufRead>(reader: R) -> Result<Vec<FeedbackItem>, RefineError> {
        let mut out = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| RefineError::InvalidFeedback(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line)
                    .map_err(|e| RefineError::InvalidFeedback(format!("line {}: {e}", n + 1)))?,
            );
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adjacency {
    #[default]
    Target,
    Adjacent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub feedback: usize,
    pub adjacency: Adjacency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintAtom {
    pub location: usize,
    pub intersection: u32,
    pub approach: Approach,
    pub movement: Movement,
    pub segment: usize,
    pub kind: BoundKind,
    pub bound: f64,
    pub provenance: Provenance,
}

impl ConstraintAtom {
    pub fn hard_bound(&self) -> HardBound {
        HardBound {
            location: self.location,
            kind: self.kind,
            bound: self.bound,
        }
    }

    pub fn satisfied_by(&self, count: i64) -> bool {
        self.hard_bound().violation(count as f64) <= 1e-9
    }
}

/// Validated constraints compiled from one feedback item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub feedback: usize,
    pub segment: usize,
    pub intersection: u32,
    pub atoms: Vec<ConstraintAtom>,
}

impl ConstraintSpec {
    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Target segment and its in-range neighbours, ascending.
    pub fn segments(&self) -> Vec<usize> {
        let t = self.segment;
        let mut out = Vec::with_capacity(3);
        if t > 0 {
            out.push(t - 1);
        }
        out.push(t);
        if t + 1 < SEGMENTS {
            out.push(t + 1);
        }
        out
    }

    pub fn hard_bounds(&self, segment: usize) -> Vec<HardBound> {
        self.atoms
            .iter()
            .filter(|a| a.segment == segment)
            .map(ConstraintAtom::hard_bound)
            .collect()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReplyDoc {
    atoms: Vec<AtomDoc>,
    #[serde(default)]
    #[allow(dead_code)]
    note: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AtomDoc {
    #[serde(default)]
    location: Option<usize>,
    #[serde(default)]
    intersection: Option<u32>,
    #[serde(default)]
    approach: Option<String>,
    #[serde(default)]
    movement: Option<String>,
    #[serde(default)]
    segment: Option<usize>,
    kind: BoundKind,
    bound: f64,
    #[serde(default)]
    adjacency: Adjacency,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToolCall {
    tool: String,
    #[serde(default)]
    location: Option<usize>,
    #[serde(default)]
    intersection: Option<u32>,
    #[serde(default)]
    approach: Option<String>,
    #[serde(default)]
    movement: Option<String>,
    #[serde(default)]
    segment: Option<usize>,
}

fn parse_movement(s: &str) -> Result<Movement, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "total" | "through" | "all" => Ok(Movement::Total),
        "left" => Ok(Movement::Left),
        "right" => Ok(Movement::Right),
        other => Err(format!("unknown movement {other:?}")),
    }
}

/// The JSON object inside a reply, tolerating code fences and prose around it.
fn json_body(reply: &str) -> Option<&str> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    (start <= end).then(|| &reply[start..=end])
}

fn resolve_location(
    network: &RoadNetwork,
    location: Option<usize>,
    intersection: Option<u32>,
    approach: Option<&str>,
    movement: Option<&str>,
) -> Result<usize, RefineError> {
    if let Some(j) = location {
        return if j < network.locations().len() {
            Ok(j)
        } else {
            Err(RefineError::UnknownLocation(format!("location index {j}")))
        };
    }
    let (Some(i), Some(a)) = (intersection, approach) else {
        return Err(RefineError::Syntactic(
            "atom needs either a location index or intersection and approach".into(),
        ));
    };
    let a: Approach = a.parse().map_err(RefineError::Syntactic)?;
    let m = movement.map_or(Ok(Movement::Total), parse_movement).map_err(RefineError::Syntactic)?;
    network
        .find_location(i, a, m)
        .map(|l| l.id)
        .ok_or_else(|| RefineError::UnknownLocation(format!("intersection {i} {a} {m}")))
}

/// Parses a model reply into a constraint spec and checks its invariants.
/// Target atoms default to the feedback segment; adjacent atoms without a
/// segment apply to both neighbours. Target atoms left without a relaxed
/// neighbour of the same kind get one at the fallback factor.
pub fn verify_syntactic(reply: &str, item: &FeedbackItem, network: &RoadNetwork) -> Result<ConstraintSpec, RefineError> {
    let body = json_body(reply).ok_or_else(|| RefineError::Syntactic("reply contains no JSON object".into()))?;
    let doc: ReplyDoc = serde_json::from_str(body).map_err(|e| RefineError::Syntactic(e.to_string()))?;
    let mut spec = ConstraintSpec {
        feedback: item.k,
        segment: item.segment,
        intersection: item.intersection,
        atoms: Vec::new(),
    };
    let neighbours: Vec<usize> = spec.segments().into_iter().filter(|&s| s != item.segment).collect();

    for a in &doc.atoms {
        if !a.bound.is_finite() || a.bound < 0.0 {
            return Err(RefineError::Syntactic(format!("bound {} must be a nonnegative number", a.bound)));
        }
        let j = resolve_location(
            network,
            a.location,
            a.intersection,
            a.approach.as_deref(),
            a.movement.as_deref(),
        )?;
        let segments = match (a.adjacency, a.segment) {
            (Adjacency::Target, None) => vec![item.segment],
            (Adjacency::Target, Some(s)) if s == item.segment => vec![s],
            (Adjacency::Adjacent, None) => neighbours.clone(),
            (Adjacency::Adjacent, Some(s)) if neighbours.contains(&s) => vec![s],
            (adj, Some(s)) => {
                return Err(RefineError::Syntactic(format!(
                    "{adj:?} atom at segment {s} does not fit feedback segment {}",
                    item.segment
                )))
            }
        };
        let loc = &network.locations()[j];
        for s in segments {
            spec.atoms.push(ConstraintAtom {
                location: j,
                intersection: loc.intersection,
                approach: loc.approach,
                movement: loc.movement,
                segment: s,
                kind: a.kind,
                bound: a.bound,
                provenance: Provenance {
                    feedback: item.k,
                    adjacency: a.adjacency,
                },
            });
        }
    }

    let targets: Vec<ConstraintAtom> = spec
        .atoms
        .iter()
        .filter(|a| a.provenance.adjacency == Adjacency::Target)
        .cloned()
        .collect();
    if targets.is_empty() {
        return Ok(spec);
    }
    if !neighbours.is_empty() && targets.len() == spec.atoms.len() {
        return Err(RefineError::Syntactic("missing relaxed adjacent constraints".into()));
    }

    // tightest target bound per (location, kind)
    let mut tight: BTreeMap<(usize, BoundKindKey), f64> = BTreeMap::new();
    for t in &targets {
        let key = (t.location, BoundKindKey::from(t.kind));
        let e = tight.entry(key).or_insert(t.bound);
        *e = match t.kind {
            BoundKind::Lower => e.max(t.bound),
            BoundKind::Upper => e.min(t.bound),
        };
    }
    for a in spec.atoms.iter().filter(|a| a.provenance.adjacency == Adjacency::Adjacent) {
        if let Some(&b) = tight.get(&(a.location, BoundKindKey::from(a.kind))) {
            let tighter = match a.kind {
                BoundKind::Lower => a.bound > b,
                BoundKind::Upper => a.bound < b,
            };
            if tighter {
                return Err(RefineError::Syntactic(format!(
                    "adjacent constraint on location {} is tighter than its target ({} vs {b})",
                    a.location, a.bound
                )));
            }
        }
    }
    let mut fill = Vec::new();
    for (&(j, kind), &b) in &tight {
        for &s in &neighbours {
            let covered = spec.atoms.iter().any(|a| {
                a.provenance.adjacency == Adjacency::Adjacent
                    && a.location == j
                    && a.segment == s
                    && BoundKindKey::from(a.kind) == kind
            });
            if !covered {
                let loc = &network.locations()[j];
                let (kind, bound) = match kind {
                    BoundKindKey::Lower => (BoundKind::Lower, b * ADJACENT_LOWER_FACTOR),
                    BoundKindKey::Upper => (BoundKind::Upper, b * ADJACENT_UPPER_FACTOR),
                };
                fill.push(ConstraintAtom {
                    location: j,
                    intersection: loc.intersection,
                    approach: loc.approach,
                    movement: loc.movement,
                    segment: s,
                    kind,
                    bound,
                    provenance: Provenance {
                        feedback: item.k,
                        adjacency: Adjacency::Adjacent,
                    },
                });
            }
        }
    }
    spec.atoms.extend(fill);
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum BoundKindKey {
    Lower,
    Upper,
}

impl From<BoundKind> for BoundKindKey {
    fn from(k: BoundKind) -> Self {
        match k {
            BoundKind::Lower => BoundKindKey::Lower,
            BoundKind::Upper => BoundKindKey::Upper,
        }
    }
}

/// Simulated count `(A·r_t)_j`.
pub fn get_counts(
    solutions: &[RouteSolution],
    incidence: &IncidenceMatrix,
    location: usize,
    segment: usize,
) -> Result<i64, RefineError> {
    if location >= incidence.n_locations() {
        return Err(RefineError::UnknownLocation(format!("location index {location}")));
    }
    let sol = solutions.get(segment).ok_or(RefineError::MissingSolution(segment))?;
    Ok(incidence
        .location_routes(location)
        .iter()
        .map(|&i| sol.r[i])
        .sum())
}

pub type IntersectionCounts = BTreeMap<(Approach, Movement), i64>;

/// Network, per-segment base problems, accepted constraints and the current
/// day of solutions.
#[derive(Debug, Clone)]
pub struct RefinementState {
    pub iteration: usize,
    pub network: Arc<RoadNetwork>,
    pub base: Vec<SegmentProblem>,
    pub specs: Vec<ConstraintSpec>,
    pub solutions: Vec<RouteSolution>,
    pub config: SolveConfig,
}

impl RefinementState {
    /// Solves the unconstrained day to obtain the starting solutions.
    pub fn new(network: Arc<RoadNetwork>, base: Vec<SegmentProblem>, config: SolveConfig) -> Result<Self, RefineError> {
        let solutions = solve_day(&base, &config)?;
        Ok(Self::with_solutions(network, base, solutions, config))
    }

    pub fn with_solutions(
        network: Arc<RoadNetwork>,
        base: Vec<SegmentProblem>,
        solutions: Vec<RouteSolution>,
        config: SolveConfig,
    ) -> Self {
        Self {
            iteration: 0,
            network,
            base,
            specs: Vec::new(),
            solutions,
            config,
        }
    }

    pub fn incidence(&self) -> &IncidenceMatrix {
        &self.base[0].incidence
    }

    pub fn atoms(&self) -> impl Iterator<Item = &ConstraintAtom> {
        self.specs.iter().flat_map(|s| s.atoms.iter())
    }

    pub fn hard_bounds(&self, segment: usize) -> Vec<HardBound> {
        self.atoms()
            .filter(|a| a.segment == segment)
            .map(ConstraintAtom::hard_bound)
            .collect()
    }

    /// Base problem for `segment` with every accepted constraint applied.
    pub fn problem(&self, segment: usize) -> SegmentProblem {
        let mut p = self.base[segment].clone();
        p.extra_constraints.extend(self.hard_bounds(segment));
        p
    }

    pub fn solve_all(&self) -> Result<Vec<RouteSolution>, RefineError> {
        self.solve_all_with_progress(|_, _| {})
    }

    pub fn solve_all_with_progress(
        &self,
        progress: impl FnMut(usize, &RouteSolution),
    ) -> Result<Vec<RouteSolution>, RefineError> {
        let problems: Vec<SegmentProblem> = (0..self.base.len()).map(|t| self.problem(t)).collect();
        Ok(solve_day_with_progress(&problems, &self.config, progress)?)
    }

    pub fn intersection_counts(&self, solution: &RouteSolution, intersection: u32) -> IntersectionCounts {
        let ar = solution.counts(self.incidence());
        self.network
            .locations()
            .iter()
            .filter(|l| l.intersection == intersection)
            .map(|l| ((l.approach, l.movement), ar[l.id]))
            .collect()
    }

    /// Every accepted atom holds in the current solutions.
    pub fn constraints_hold(&self) -> bool {
        self.atoms().all(|a| {
            get_counts(&self.solutions, self.incidence(), a.location, a.segment).is_ok_and(|c| a.satisfied_by(c))
        })
    }

    fn check_item(&self, item: &FeedbackItem) -> Result<(), RefineError> {
        if item.segment >= self.base.len() {
            return Err(RefineError::InvalidFeedback(format!("segment {} out of range", item.segment)));
        }
        if !self.network.intersections().contains(&item.intersection) {
            return Err(RefineError::InvalidFeedback(format!(
                "unknown intersection {}",
                item.intersection
            )));
        }
        if self.solutions.len() != self.base.len() {
            return Err(RefineError::MissingSolution(self.solutions.len()));
        }
        Ok(())
    }
}

fn clock(segment: usize) -> String {
    let minutes = segment * 15;
    format!("{:02}:{:02}", minutes / 60, minutes % 60)
}

fn build_prompt(item: &FeedbackItem, state: &RefinementState) -> String {
    let mut p = String::new();
    let t = item.segment;
    let _ = writeln!(p, "You translate traffic engineers' feedback into count constraints for a traffic demand model.");
    let _ = writeln!(
        p,
        "Feedback {} concerns intersection {} during segment {t} (15 minutes starting {}):",
        item.k,
        item.intersection,
        clock(t)
    );
    let _ = writeln!(p, "\"{}\"", item.text);
    let _ = writeln!(p, "\nCounting locations at intersection {}:", item.intersection);
    for l in state.network.locations().iter().filter(|l| l.intersection == item.intersection) {
        let _ = writeln!(p, "- location {}: {} {}", l.id, l.approach, l.movement);
    }
    let others: Vec<String> = state
        .network
        .intersections()
        .into_iter()
        .filter(|&i| i != item.intersection)
        .map(|i| i.to_string())
        .collect();
    let _ = writeln!(p, "Other intersections: {}", others.join(", "));
    let _ = writeln!(
        p,
        "\nTo read a current simulated count, reply with only:\n\
         {{\"tool\":\"get_counts\",\"intersection\":{},\"approach\":\"EB\",\"movement\":\"total\",\"segment\":{t}}}",
        item.intersection
    );
    let _ = writeln!(
        p,
        "\nWhen ready, reply with only a JSON object {{\"atoms\":[...]}}. Each atom is\n\
         {{\"intersection\":int,\"approach\":\"EB|NB|SB|WB\",\"movement\":\"total|left|right\",\
         \"kind\":\"lower|upper\",\"bound\":number>=0,\"adjacency\":\"target|adjacent\"}}.\n\
         Target atoms apply to segment {t}. Adjacent atoms apply to segments {} and {} and must be looser \
         than the matching target atom. Reply {{\"atoms\":[]}} if nothing should change.",
        t.saturating_sub(1),
        (t + 1).min(SEGMENTS - 1)
    );
    p
}

fn answer_tool(call: &ToolCall, item: &FeedbackItem, state: &RefinementState) -> String {
    if call.tool != "get_counts" {
        return format!("error: unknown tool {:?}", call.tool);
    }
    let segment = call.segment.unwrap_or(item.segment);
    let located = resolve_location(
        &state.network,
        call.location,
        call.intersection.or(Some(item.intersection)),
        call.approach.as_deref(),
        call.movement.as_deref(),
    );
    match located.and_then(|j| get_counts(&state.solutions, state.incidence(), j, segment).map(|c| (j, c))) {
        Ok((j, c)) => {
            let l = &state.network.locations()[j];
            format!(
                "get_counts(intersection={}, approach={}, movement={}, segment={segment}) = {c}",
                l.intersection, l.approach, l.movement
            )
        }
        Err(e) => format!("error: {e}"),
    }
}

/// Prompts the client until it stops calling tools, then validates the reply.
pub fn compile_feedback(
    item: &FeedbackItem,
    state: &RefinementState,
    client: &mut dyn LlmClient,
) -> Result<ConstraintSpec, RefineError> {
    compile_with_prompt(build_prompt(item, state), item, state, client)
}

fn compile_with_prompt(
    mut prompt: String,
    item: &FeedbackItem,
    state: &RefinementState,
    client: &mut dyn LlmClient,
) -> Result<ConstraintSpec, RefineError> {
    for _ in 0..=MAX_TOOL_ROUNDS {
        let reply = client.compile(&prompt)?;
        let call = json_body(&reply).and_then(|b| serde_json::from_str::<ToolCall>(b).ok());
        match call {
            Some(call) => {
                let answer = answer_tool(&call, item, state);
                let _ = write!(prompt, "\nTool result: {answer}\n");
            }
            None => return verify_syntactic(&reply, item, &state.network),
        }
    }
    Err(RefineError::Syntactic(format!("more than {MAX_TOOL_ROUNDS} tool calls")))
}

/// Solves the target segment and its neighbours with all accepted
/// constraints plus `spec`'s atoms as hard bounds. The segment before the
/// first one solved supplies the temporal reference.
pub fn verify_feasible(state: &RefinementState, spec: &ConstraintSpec) -> Result<Vec<(usize, RouteSolution)>, RefineError> {
    let mut out: Vec<(usize, RouteSolution)> = Vec::new();
    for s in spec.segments() {
        let mut p = state.problem(s);
        p.extra_constraints.extend(spec.hard_bounds(s));
        p.r_prev = match out.last() {
            Some((_, prev)) => Some(prev.r.clone()),
            None if s > 0 => Some(state.solutions.get(s - 1).ok_or(RefineError::MissingSolution(s - 1))?.r.clone()),
            None => None,
        };
        let sol = solve_segment(&p, &state.config).map_err(|e| match e {
            SolveError::Infeasible(msg) => RefineError::Infeasible(format!("segment {s}: {msg}")),
            other => RefineError::Solve(other),
        })?;
        out.push((s, sol));
    }
    Ok(out)
}

/// Whether the counts moved the way the feedback asked. Approaches come from
/// the text, or from the spec's target atoms at the feedback intersection
/// when the text names none. "Maintain" allows ±10% on each approach total.
/// A non-mock client's reflection verdict must also agree.
pub fn verify_semantic(
    before: &IntersectionCounts,
    after: &IntersectionCounts,
    item: &FeedbackItem,
    spec: &ConstraintSpec,
    client: &mut dyn LlmClient,
) -> bool {
    let Some(intent) = parse_intent(&item.text) else {
        return false;
    };
    let present = |a: &Approach| before.contains_key(&(*a, Movement::Total)) && after.contains_key(&(*a, Movement::Total));
    let mut approaches: Vec<Approach> = named_approaches(&item.text).into_iter().filter(present).collect();
    if approaches.is_empty() {
        approaches = spec
            .atoms
            .iter()
            .filter(|a| a.intersection == item.intersection && a.provenance.adjacency == Adjacency::Target)
            .map(|a| a.approach)
            .filter(present)
            .collect();
        approaches.sort();
        approaches.dedup();
    }
    if approaches.is_empty() {
        return false;
    }
    let rule = approaches.iter().all(|a| {
        let b = before[&(*a, Movement::Total)];
        let n = after[&(*a, Movement::Total)];
        match intent {
            Intent::Increase => n > b,
            Intent::Decrease => n < b,
            Intent::Maintain => ((n - b).abs() as f64) <= 0.1 * b as f64,
        }
    });
    if !rule || client.is_mock() {
        return rule;
    }
    let mut prompt = format!(
        "A traffic engineer said about intersection {} at {}: \"{}\"\nSimulated counts before and after the change:\n",
        item.intersection,
        clock(item.segment),
        item.text
    );
    for ((a, m), b) in before {
        let n = after.get(&(*a, *m)).copied().unwrap_or(0);
        let _ = writeln!(prompt, "- {a} {m}: {b} -> {n}");
    }
    prompt.push_str("Does the change reflect the feedback? Answer yes or no.");
    client.reflect(&prompt).unwrap_or(false)
}

/// Per-criterion attempt counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tallies {
    pub attempts: usize,
    pub syntactic_fail: usize,
    pub infeasible: usize,
    pub semantic_fail: usize,
    pub accepted: usize,
}

impl std::fmt::Display for Tallies {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "syntactic_fail={} infeasible={} semantic_fail={} accepted={}",
            self.syntactic_fail, self.infeasible, self.semantic_fail, self.accepted
        )
    }
}

/// Outcome of the checks on one generated candidate. `None` means the check
/// was not reached.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdicts {
    pub syntactic: bool,
    pub feasible: Option<bool>,
    pub semantic: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemOutcome {
    pub accepted: bool,
    pub tallies: Tallies,
    /// Verdicts of the last attempt.
    pub verdicts: Verdicts,
    /// Why the last attempt was rejected.
    pub rejection: Option<RefineError>,
    pub spec: Option<ConstraintSpec>,
    pub before: IntersectionCounts,
    pub after: Option<IntersectionCounts>,
}

/// Generates and verifies constraints for one feedback item, retrying up to
/// `max_attempts` times. On acceptance the spec joins `state` and the
/// candidate solutions replace the affected segments; otherwise `state` is
/// untouched. Client failures abort with an error.
pub fn refine_item(
    item: &FeedbackItem,
    state: &mut RefinementState,
    client: &mut dyn LlmClient,
    max_attempts: usize,
) -> Result<ItemOutcome, RefineError> {
    if max_attempts == 0 {
        return Err(RefineError::InvalidFeedback("max_attempts must be at least 1".into()));
    }
    state.check_item(item)?;
    let before = state.intersection_counts(&state.solutions[item.segment], item.intersection);
    let mut out = ItemOutcome {
        accepted: false,
        tallies: Tallies::default(),
        verdicts: Verdicts::default(),
        rejection: None,
        spec: None,
        before: before.clone(),
        after: None,
    };
    let base_prompt = build_prompt(item, state);
    let mut prompt = base_prompt.clone();
    for _ in 0..max_attempts {
        out.tallies.attempts += 1;
        out.verdicts = Verdicts::default();
        out.spec = None;
        out.after = None;
        let spec = match compile_with_prompt(prompt.clone(), item, state, client) {
            Ok(spec) => spec,
            Err(e @ (RefineError::Syntactic(_) | RefineError::UnknownLocation(_))) => {
                out.tallies.syntactic_fail += 1;
                prompt = format!("{base_prompt}\nYour previous reply was rejected: {e}\n");
                out.rejection = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        out.verdicts.syntactic = true;
        out.spec = Some(spec.clone());
        let candidates = match verify_feasible(state, &spec) {
            Ok(c) => c,
            Err(e @ RefineError::Infeasible(_)) => {
                out.tallies.infeasible += 1;
                out.verdicts.feasible = Some(false);
                prompt = format!("{base_prompt}\nYour previous constraints could not be met: {e}\n");
                out.rejection = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        out.verdicts.feasible = Some(true);
        let target = &candidates.iter().find(|(s, _)| *s == item.segment).expect("target segment solved").1;
        let after = state.intersection_counts(target, item.intersection);
        let semantic = verify_semantic(&before, &after, item, &spec, client);
        out.verdicts.semantic = Some(semantic);
        out.after = Some(after);
        if !semantic {
            out.tallies.semantic_fail += 1;
            prompt = format!(
                "{base_prompt}\nYour previous constraints did not change the counts the way the feedback asks.\n"
            );
            out.rejection = Some(RefineError::SemanticMismatch);
            continue;
        }
        for (s, sol) in candidates {
            state.solutions[s] = sol;
        }
        state.specs.push(spec);
        state.iteration += 1;
        out.tallies.accepted += 1;
        out.accepted = true;
        out.rejection = None;
        break;
    }
    Ok(out)
}

/// Runs each feedback item through generate, verify and accept, retrying up
/// to `max_attempts` times per item, then re-solves the whole day under the
/// accumulated constraints.
pub fn refine_loop(
    items: &[FeedbackItem],
    mut state: RefinementState,
    client: &mut dyn LlmClient,
    max_attempts: usize,
) -> Result<(RefinementState, Tallies), RefineError> {
    if max_attempts == 0 {
        return Err(RefineError::InvalidFeedback("max_attempts must be at least 1".into()));
    }
    let mut tallies = Tallies::default();
    for item in items {
        let o = refine_item(item, &mut state, client, max_attempts)?;
        tallies.attempts += o.tallies.attempts;
        tallies.syntactic_fail += o.tallies.syntactic_fail;
        tallies.infeasible += o.tallies.infeasible;
        tallies.semantic_fail += o.tallies.semantic_fail;
        tallies.accepted += o.tallies.accepted;
        if !o.accepted {
            return Err(RefineError::AttemptsExhausted { k: item.k, tallies });
        }
    }
    if !items.is_empty() {
        state.solutions = state.solve_all()?;
    }
    Ok((state, tallies))
}
