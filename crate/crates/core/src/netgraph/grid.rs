//! Synthetic rectangular grid networks for fixtures and benchmarks.
//!
//! Row 0 is the northern row. Boundary stubs connect perimeter intersections
//! to outside nodes and are the only fringe edges. With `turn_connectors`,
//! every intersection is expanded into per-approach arrival nodes and
//! per-direction departure nodes joined by left/through/right connector edges,
//! so that turning movements can be counted on their own edges.

use super::{Approach, EdgeDoc, LocationDoc, Movement, NetworkDoc, NodeDoc};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StubSides {
    pub west: bool,
    pub east: bool,
    pub north: bool,
    pub south: bool,
}

impl StubSides {
    pub const WEST_EAST: StubSides = StubSides {
        west: true,
        east: true,
        north: false,
        south: false,
    };
    pub const ALL: StubSides = StubSides {
        west: true,
        east: true,
        north: true,
        south: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub stubs: StubSides,
    pub turn_connectors: bool,
    pub block_length_m: f64,
    pub connector_length_m: f64,
    /// Row-major intersection ids; defaults to 1, 2, 3, ...
    pub intersection_ids: Option<Vec<u32>>,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            stubs: StubSides::WEST_EAST,
            turn_connectors: false,
            block_length_m: 100.0,
            connector_length_m: 10.0,
            intersection_ids: None,
        }
    }

    pub fn stubs(mut self, stubs: StubSides) -> Self {
        self.stubs = stubs;
        self
    }

    pub fn turn_connectors(mut self, on: bool) -> Self {
        self.turn_connectors = on;
        self
    }

    pub fn intersection_ids(mut self, ids: Vec<u32>) -> Self {
        self.intersection_ids = Some(ids);
        self
    }
}

fn dir_char(d: Approach) -> char {
    match d {
        Approach::EB => 'E',
        Approach::NB => 'N',
        Approach::SB => 'S',
        Approach::WB => 'W',
    }
}

fn left_of(d: Approach) -> Approach {
    match d {
        Approach::EB => Approach::NB,
        Approach::NB => Approach::WB,
        Approach::SB => Approach::EB,
        Approach::WB => Approach::SB,
    }
}

fn right_of(d: Approach) -> Approach {
    match d {
        Approach::EB => Approach::SB,
        Approach::NB => Approach::EB,
        Approach::SB => Approach::WB,
        Approach::WB => Approach::NB,
    }
}

pub fn grid_network(spec: &GridSpec) -> NetworkDoc {
    let (rows, cols) = (spec.rows, spec.cols);
    assert!(rows > 0 && cols > 0, "grid must have at least one intersection");
    let ids: Vec<u32> = match &spec.intersection_ids {
        Some(ids) => {
            assert_eq!(ids.len(), rows * cols, "one id per intersection");
            ids.clone()
        }
        None => (1..=(rows * cols) as u32).collect(),
    };

    let step = |r: usize, c: usize, d: Approach| -> Option<(usize, usize)> {
        match d {
            Approach::EB if c + 1 < cols => Some((r, c + 1)),
            Approach::WB if c > 0 => Some((r, c - 1)),
            Approach::SB if r + 1 < rows => Some((r + 1, c)),
            Approach::NB if r > 0 => Some((r - 1, c)),
            _ => None,
        }
    };
    // outside node for a stub leaving (r, c) in travel direction d
    let stub = |r: usize, c: usize, d: Approach| -> Option<String> {
        match d {
            Approach::WB if c == 0 && spec.stubs.west => Some(format!("W{r}")),
            Approach::EB if c + 1 == cols && spec.stubs.east => Some(format!("E{r}")),
            Approach::NB if r == 0 && spec.stubs.north => Some(format!("N{c}")),
            Approach::SB if r + 1 == rows && spec.stubs.south => Some(format!("S{c}")),
            _ => None,
        }
    };
    let opposite = |d: Approach| match d {
        Approach::EB => Approach::WB,
        Approach::WB => Approach::EB,
        Approach::NB => Approach::SB,
        Approach::SB => Approach::NB,
    };

    let mut nodes: Vec<String> = Vec::new();
    let mut edges: Vec<EdgeDoc> = Vec::new();
    // (r, c, arrival direction) -> approach edge id
    let mut arrivals: Vec<((usize, usize, Approach), String)> = Vec::new();
    let mut connectors: Vec<((usize, usize, Approach, Approach), String)> = Vec::new();

    let arrive_node = |r: usize, c: usize, d: Approach| {
        if spec.turn_connectors {
            format!("n{r}_{c}i{}", dir_char(d))
        } else {
            format!("n{r}_{c}")
        }
    };
    let depart_node = |r: usize, c: usize, d: Approach| {
        if spec.turn_connectors {
            format!("n{r}_{c}o{}", dir_char(d))
        } else {
            format!("n{r}_{c}")
        }
    };

    let mut has_departure = vec![[false; 4]; rows * cols];
    let mut has_arrival = vec![[false; 4]; rows * cols];
    let dir_idx = |d: Approach| Approach::ALL.iter().position(|&x| x == d).unwrap();

    for r in 0..rows {
        for c in 0..cols {
            for d in Approach::ALL {
                if let Some((r2, c2)) = step(r, c, d) {
                    let id = format!("l{r}_{c}{}", dir_char(d));
                    edges.push(EdgeDoc {
                        id: id.clone(),
                        from: depart_node(r, c, d),
                        to: arrive_node(r2, c2, d),
                        length_m: spec.block_length_m,
                        fringe: false,
                        endpoint: false,
                    });
                    has_departure[r * cols + c][dir_idx(d)] = true;
                    has_arrival[r2 * cols + c2][dir_idx(d)] = true;
                    arrivals.push(((r2, c2, d), id));
                } else if let Some(outside) = stub(r, c, d) {
                    // separate sink and source so that no path leaves and re-enters
                    let (sink, source) = (format!("{outside}x"), format!("{outside}e"));
                    nodes.push(sink.clone());
                    nodes.push(source.clone());
                    edges.push(EdgeDoc {
                        id: format!("out{outside}"),
                        from: depart_node(r, c, d),
                        to: sink,
                        length_m: spec.block_length_m,
                        fringe: true,
                        endpoint: false,
                    });
                    let inward = opposite(d);
                    let id = format!("in{outside}");
                    edges.push(EdgeDoc {
                        id: id.clone(),
                        from: source,
                        to: arrive_node(r, c, inward),
                        length_m: spec.block_length_m,
                        fringe: true,
                        endpoint: false,
                    });
                    has_departure[r * cols + c][dir_idx(d)] = true;
                    has_arrival[r * cols + c][dir_idx(inward)] = true;
                    arrivals.push(((r, c, inward), id));
                }
            }
        }
    }

    for r in 0..rows {
        for c in 0..cols {
            let k = r * cols + c;
            if spec.turn_connectors {
                for a in Approach::ALL {
                    if !has_arrival[k][dir_idx(a)] {
                        continue;
                    }
                    nodes.push(arrive_node(r, c, a));
                    for d in [left_of(a), a, right_of(a)] {
                        if has_departure[k][dir_idx(d)] {
                            let id = format!("c{r}_{c}{}{}", dir_char(a), dir_char(d));
                            edges.push(EdgeDoc {
                                id: id.clone(),
                                from: arrive_node(r, c, a),
                                to: depart_node(r, c, d),
                                length_m: spec.connector_length_m,
                                fringe: false,
                                endpoint: false,
                            });
                            connectors.push(((r, c, a, d), id));
                        }
                    }
                }
                for d in Approach::ALL {
                    if has_departure[k][dir_idx(d)] {
                        nodes.push(depart_node(r, c, d));
                    }
                }
            } else {
                nodes.push(format!("n{r}_{c}"));
            }
        }
    }
    nodes.sort();
    nodes.dedup();

    let mut locations = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let intersection = ids[r * cols + c];
            for a in Approach::ALL {
                let Some((_, approach_edge)) = arrivals.iter().find(|(key, _)| *key == (r, c, a)) else {
                    continue;
                };
                let mut push = |movement: Movement, edge: &str| {
                    locations.push(LocationDoc {
                        id: locations.len(),
                        intersection,
                        approach: a,
                        movement,
                        edge: edge.to_string(),
                    });
                };
                push(Movement::Total, approach_edge);
                if spec.turn_connectors {
                    for (movement, d) in [(Movement::Left, left_of(a)), (Movement::Right, right_of(a))] {
                        if let Some((_, id)) = connectors.iter().find(|(key, _)| *key == (r, c, a, d)) {
                            push(movement, id);
                        }
                    }
                }
            }
        }
    }

    NetworkDoc {
        nodes: nodes.into_iter().map(|id| NodeDoc { id }).collect(),
        edges,
        locations,
    }
}
