//! Road network, route enumeration and the route/location incidence matrix.
//!
//! Routes are sequences of directed edges. An edge `b` may follow an edge `a`
//! when `b.from == a.to`, except that immediately reversing onto the opposite
//! edge (`b.to == a.from`) is never allowed.

mod grid;
mod incidence;

pub use grid::{grid_network, GridSpec, StubSides};
pub use incidence::IncidenceMatrix;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("network document does not match schema: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("duplicate node id {0:?}")]
    DuplicateNode(String),
    #[error("duplicate edge id {0:?}")]
    DuplicateEdge(String),
    #[error("dangling node: edge {edge:?} references unknown node {node:?}")]
    DanglingNode { edge: String, node: String },
    #[error("edge {edge:?} has nonpositive length {length}")]
    NonPositiveLength { edge: String, length: f64 },
    #[error("unknown edge id {0:?}")]
    UnknownEdge(String),
    #[error("location at position {position} declares id {id}; ids must equal list position")]
    LocationOrder { position: usize, id: usize },
    #[error("duplicate counting location (intersection {intersection}, {approach}, {movement})")]
    DuplicateLocation {
        intersection: u32,
        approach: Approach,
        movement: Movement,
    },
}

/// Compass direction of travel of vehicles entering an intersection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Approach {
    EB,
    NB,
    SB,
    WB,
}

impl Approach {
    pub const ALL: [Approach; 4] = [Approach::EB, Approach::NB, Approach::SB, Approach::WB];

    pub fn as_str(self) -> &'static str {
        match self {
            Approach::EB => "EB",
            Approach::NB => "NB",
            Approach::SB => "SB",
            Approach::WB => "WB",
        }
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Approach {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "EB" | "EASTBOUND" => Ok(Approach::EB),
            "NB" | "NORTHBOUND" => Ok(Approach::NB),
            "SB" | "SOUTHBOUND" => Ok(Approach::SB),
            "WB" | "WESTBOUND" => Ok(Approach::WB),
            other => Err(format!("unknown approach {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Movement {
    Total,
    Left,
    Right,
}

impl Movement {
    pub fn as_str(self) -> &'static str {
        match self {
            Movement::Total => "total",
            Movement::Left => "left",
            Movement::Right => "right",
        }
    }
}

impl fmt::Display for Movement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Serialized network document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDoc {
    pub nodes: Vec<NodeDoc>,
    pub edges: Vec<EdgeDoc>,
    #[serde(default)]
    pub locations: Vec<LocationDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeDoc {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length_m: f64,
    pub fringe: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub endpoint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocationDoc {
    pub id: usize,
    pub intersection: u32,
    pub approach: Approach,
    pub movement: Movement,
    pub edge: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length_m: f64,
    /// Network boundary entry/exit edge.
    pub fringe: bool,
    /// Interior edge that may still start or end a route.
    pub endpoint: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountingLocation {
    pub id: usize,
    pub intersection: u32,
    pub approach: Approach,
    pub movement: Movement,
    /// Index into [`RoadNetwork::edges`].
    #[serde(skip)]
    pub edge: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub id: usize,
    /// Edge indices into [`RoadNetwork::edges`].
    pub edge_sequence: Vec<usize>,
    pub origin_edge: usize,
    pub dest_edge: usize,
    pub fringe: bool,
    pub length_m: f64,
}

/// Immutable road network. Edges keep document order; locations are indexed
/// by their position in the document.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    nodes: BTreeSet<String>,
    edges: Vec<Edge>,
    edge_index: HashMap<String, usize>,
    // position of each edge in id-sorted order, used for lexicographic tie-breaks
    rank: Vec<u32>,
    successors: Vec<Vec<usize>>,
    locations: Vec<CountingLocation>,
}

impl RoadNetwork {
    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        let doc: NetworkDoc = serde_json::from_str(text)?;
        Self::from_doc(&doc)
    }

    pub fn from_doc(doc: &NetworkDoc) -> Result<Self, NetworkError> {
        let mut nodes = BTreeSet::new();
        for node in &doc.nodes {
            if !nodes.insert(node.id.clone()) {
                return Err(NetworkError::DuplicateNode(node.id.clone()));
            }
        }

        let mut edges = Vec::with_capacity(doc.edges.len());
        let mut edge_index = HashMap::with_capacity(doc.edges.len());
        for e in &doc.edges {
            for node in [&e.from, &e.to] {
                if !nodes.contains(node) {
                    return Err(NetworkError::DanglingNode {
                        edge: e.id.clone(),
                        node: node.clone(),
                    });
                }
            }
            if !(e.length_m > 0.0) || !e.length_m.is_finite() {
                return Err(NetworkError::NonPositiveLength {
                    edge: e.id.clone(),
                    length: e.length_m,
                });
            }
            if edge_index.insert(e.id.clone(), edges.len()).is_some() {
                return Err(NetworkError::DuplicateEdge(e.id.clone()));
            }
            edges.push(Edge {
                id: e.id.clone(),
                from: e.from.clone(),
                to: e.to.clone(),
                length_m: e.length_m,
                fringe: e.fringe,
                endpoint: e.endpoint,
            });
        }

        let mut order: Vec<usize> = (0..edges.len()).collect();
        order.sort_by(|&a, &b| edges[a].id.cmp(&edges[b].id));
        let mut rank = vec![0u32; edges.len()];
        for (r, &e) in order.iter().enumerate() {
            rank[e] = r as u32;
        }

        let mut leaving: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, e) in edges.iter().enumerate() {
            leaving.entry(e.from.as_str()).or_default().push(i);
        }
        let successors = edges
            .iter()
            .map(|e| {
                let mut next: Vec<usize> = leaving
                    .get(e.to.as_str())
                    .map(|v| v.iter().copied().filter(|&n| edges[n].to != e.from).collect())
                    .unwrap_or_default();
                next.sort_by_key(|&n| rank[n]);
                next
            })
            .collect();

        let mut locations = Vec::with_capacity(doc.locations.len());
        let mut seen = HashSet::new();
        for (position, loc) in doc.locations.iter().enumerate() {
            if loc.id != position {
                return Err(NetworkError::LocationOrder {
                    position,
                    id: loc.id,
                });
            }
            if !seen.insert((loc.intersection, loc.approach, loc.movement)) {
                return Err(NetworkError::DuplicateLocation {
                    intersection: loc.intersection,
                    approach: loc.approach,
                    movement: loc.movement,
                });
            }
            let edge = *edge_index
                .get(&loc.edge)
                .ok_or_else(|| NetworkError::UnknownEdge(loc.edge.clone()))?;
            locations.push(CountingLocation {
                id: position,
                intersection: loc.intersection,
                approach: loc.approach,
                movement: loc.movement,
                edge,
            });
        }

        Ok(Self {
            nodes,
            edges,
            edge_index,
            rank,
            successors,
            locations,
        })
    }

    pub fn nodes(&self) -> &BTreeSet<String> {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, idx: usize) -> &Edge {
        &self.edges[idx]
    }

    pub fn edge_idx(&self, id: &str) -> Result<usize, NetworkError> {
        self.edge_index
            .get(id)
            .copied()
            .ok_or_else(|| NetworkError::UnknownEdge(id.to_string()))
    }

    pub fn successors(&self, edge: usize) -> &[usize] {
        &self.successors[edge]
    }

    pub fn locations(&self) -> &[CountingLocation] {
        &self.locations
    }

    pub fn location_edge_id(&self, loc: &CountingLocation) -> &str {
        &self.edges[loc.edge].id
    }

    /// Finds the location for an (intersection, approach, movement) triple.
    pub fn find_location(
        &self,
        intersection: u32,
        approach: Approach,
        movement: Movement,
    ) -> Option<&CountingLocation> {
        self.locations.iter().find(|l| {
            l.intersection == intersection && l.approach == approach && l.movement == movement
        })
    }

    /// Intersection ids in order of first appearance in the location list.
    pub fn intersections(&self) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for loc in &self.locations {
            if !out.contains(&loc.intersection) {
                out.push(loc.intersection);
            }
        }
        out
    }

    /// Candidate route endpoints: fringe edges plus flagged interior endpoints,
    /// in edge-id order.
    pub fn endpoint_edges(&self) -> Vec<usize> {
        let mut out: Vec<usize> = (0..self.edges.len())
            .filter(|&i| self.edges[i].fringe || self.edges[i].endpoint)
            .collect();
        out.sort_by_key(|&i| self.rank[i]);
        out
    }

    pub fn path_length(&self, path: &[usize]) -> f64 {
        path.iter().map(|&e| self.edges[e].length_m).sum()
    }

    pub fn edge_ids(&self, path: &[usize]) -> Vec<&str> {
        path.iter().map(|&e| self.edges[e].id.as_str()).collect()
    }

    /// Length-minimal path from `origin` to `dest`, both edges included. Ties
    /// go to the lexicographically smallest edge-id sequence.
    pub fn shortest_path(&self, origin: &str, dest: &str) -> Result<Option<Route>, NetworkError> {
        let o = self.edge_idx(origin)?;
        let d = self.edge_idx(dest)?;
        let tree = self.search_from(o);
        Ok(tree[d].as_ref().map(|(_, path)| self.make_route(0, path.clone())))
    }

    /// One shortest route per ordered pair of distinct endpoint edges that are
    /// connected. Route ids follow (origin id, destination id) order.
    pub fn enumerate_routes(&self) -> Vec<Route> {
        let endpoints = self.endpoint_edges();
        let mut routes = Vec::new();
        for &o in &endpoints {
            let tree = self.search_from(o);
            for &d in &endpoints {
                if d == o {
                    continue;
                }
                if let Some((_, path)) = &tree[d] {
                    routes.push(self.make_route(routes.len(), path.clone()));
                }
            }
        }
        routes
    }

    fn make_route(&self, id: usize, edge_sequence: Vec<usize>) -> Route {
        let origin_edge = edge_sequence[0];
        let dest_edge = *edge_sequence.last().expect("non-empty path");
        Route {
            id,
            fringe: self.edges[origin_edge].fringe && self.edges[dest_edge].fringe,
            length_m: self.path_length(&edge_sequence),
            origin_edge,
            dest_edge,
            edge_sequence,
        }
    }

    /// Single-source search over the edge graph. Each label carries its full
    /// path so that equal-length alternatives can be compared by edge-id
    /// sequence.
    fn search_from(&self, origin: usize) -> Vec<Option<(f64, Vec<usize>)>> {
        let n = self.edges.len();
        let mut best: Vec<Option<(f64, Vec<usize>)>> = vec![None; n];
        let mut settled = vec![false; n];
        let mut heap = BinaryHeap::new();

        best[origin] = Some((self.edges[origin].length_m, vec![origin]));
        heap.push(Reverse(Label {
            cost: self.edges[origin].length_m,
            key: vec![self.rank[origin]],
            edge: origin,
        }));

        while let Some(Reverse(label)) = heap.pop() {
            if settled[label.edge] {
                continue;
            }
            settled[label.edge] = true;
            let (cost, path) = best[label.edge].clone().expect("pushed labels have a best entry");
            for &next in &self.successors[label.edge] {
                if settled[next] {
                    continue;
                }
                let next_cost = cost + self.edges[next].length_m;
                let improves = match &best[next] {
                    None => true,
                    Some((c, p)) => match cost_cmp(next_cost, *c) {
                        Ordering::Less => true,
                        Ordering::Greater => false,
                        Ordering::Equal => self.path_lt_extended(&path, next, p),
                    },
                };
                if improves {
                    let mut next_path = path.clone();
                    next_path.push(next);
                    heap.push(Reverse(Label {
                        cost: next_cost,
                        key: next_path.iter().map(|&e| self.rank[e]).collect(),
                        edge: next,
                    }));
                    best[next] = Some((next_cost, next_path));
                }
            }
        }
        best
    }

    // (prefix ++ [last]) < other, compared by edge id
    fn path_lt_extended(&self, prefix: &[usize], last: usize, other: &[usize]) -> bool {
        let lhs = prefix.iter().chain(std::iter::once(&last)).map(|&e| self.rank[e]);
        let rhs = other.iter().map(|&e| self.rank[e]);
        lhs.lt(rhs)
    }
}

/// Lengths within a relative 1e-9 compare equal.
fn cost_cmp(a: f64, b: f64) -> Ordering {
    let tol = 1e-9 * a.abs().max(b.abs()).max(1.0);
    if (a - b).abs() <= tol {
        Ordering::Equal
    } else {
        a.total_cmp(&b)
    }
}

#[derive(Debug)]
struct Label {
    cost: f64,
    key: Vec<u32>,
    edge: usize,
}

impl PartialEq for Label {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Label {}

impl Ord for Label {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cost
            .total_cmp(&other.cost)
            .then_with(|| self.key.cmp(&other.key))
            .then_with(|| self.edge.cmp(&other.edge))
    }
}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
