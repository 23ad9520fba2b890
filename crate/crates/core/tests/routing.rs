use std::collections::{BTreeMap, BTreeSet};

use demandforge::netgraph::{
    grid_network, Approach, EdgeDoc, GridSpec, IncidenceMatrix, LocationDoc, Movement, NetworkDoc, NodeDoc,
    RoadNetwork, StubSides,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Best = BTreeMap<(String, String), (f64, Vec<String>)>;

/// Every edge-simple walk from every endpoint edge, no immediate reversal;
/// keeps the shortest per destination, ties to the smaller id sequence.
fn exhaustive_routes(doc: &NetworkDoc) -> Best {
    let endpoints: Vec<&EdgeDoc> = doc.edges.iter().filter(|e| e.fringe || e.endpoint).collect();
    let mut best = Best::new();
    for o in &endpoints {
        let mut stack = vec![(vec![*o], o.length_m)];
        while let Some((path, cost)) = stack.pop() {
            let last = *path.last().unwrap();
            if path.len() > 1 && (last.fringe || last.endpoint) {
                let ids: Vec<String> = path.iter().map(|e| e.id.clone()).collect();
                let key = (o.id.clone(), last.id.clone());
                let better = match best.get(&key) {
                    None => true,
                    Some((c, p)) => cost < *c - 1e-9 || ((cost - *c).abs() <= 1e-9 && ids < *p),
                };
                if better {
                    best.insert(key, (cost, ids));
                }
            }
            for next in &doc.edges {
                if next.from != last.to || next.to == last.from || path.iter().any(|e| e.id == next.id) {
                    continue;
                }
                let mut p = path.clone();
                p.push(next);
                stack.push((p, cost + next.length_m));
            }
        }
    }
    best
}

fn check_against_oracle(doc: &NetworkDoc) -> usize {
    let net = RoadNetwork::from_doc(doc).unwrap();
    let routes = net.enumerate_routes();
    let oracle = exhaustive_routes(doc);
    assert_eq!(routes.len(), oracle.len(), "reachable pair count");
    let mut keys = Vec::new();
    for r in &routes {
        let ids: Vec<String> = net.edge_ids(&r.edge_sequence).into_iter().map(String::from).collect();
        let key = (ids[0].clone(), ids.last().unwrap().clone());
        let (cost, want) = oracle.get(&key).unwrap_or_else(|| panic!("route {key:?} not reachable"));
        assert_eq!(&ids, want, "pair {key:?}");
        assert!((r.length_m - cost).abs() < 1e-9);
        let edge = |id: &str| doc.edges.iter().find(|e| e.id == id).unwrap();
        assert_eq!(r.fringe, edge(&key.0).fringe && edge(&key.1).fringe);
        keys.push(key);
    }
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted, "routes ordered by (origin id, destination id)");
    assert_eq!(routes.iter().map(|r| r.id).collect::<Vec<_>>(), (0..routes.len()).collect::<Vec<_>>());
    routes.len()
}

fn random_doc(seed: u64) -> NetworkDoc {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_nodes = rng.random_range(3..=6);
    let nodes: Vec<String> = (0..n_nodes).map(|k| format!("v{k}")).collect();
    let mut pairs: Vec<(usize, usize)> = (0..n_nodes)
        .flat_map(|a| (0..n_nodes).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(&mut rng);
    let n_edges = rng.random_range(n_nodes..=pairs.len().min(12));
    let mut names: Vec<String> = (0..n_edges).map(|k| format!("{}{k}", (b'a' + (k * 7 % 26) as u8) as char)).collect();
    names.shuffle(&mut rng);
    let edges: Vec<EdgeDoc> = pairs[..n_edges]
        .iter()
        .zip(names)
        .map(|(&(a, b), id)| {
            let fringe = rng.random_bool(0.35);
            EdgeDoc {
                id,
                from: nodes[a].clone(),
                to: nodes[b].clone(),
                length_m: rng.random_range(1..=3) as f64,
                fringe,
                endpoint: !fringe && rng.random_bool(0.15),
            }
        })
        .collect();
    let locations = (0..rng.random_range(0..=3))
        .map(|k| LocationDoc {
            id: k,
            intersection: k as u32 + 1,
            approach: Approach::EB,
            movement: Movement::Total,
            edge: edges[rng.random_range(0..edges.len())].id.clone(),
        })
        .collect();
    NetworkDoc {
        nodes: nodes.into_iter().map(|id| NodeDoc { id }).collect(),
        edges,
        locations,
    }
}

#[test]
fn grid_routes_match_exhaustive_search() {
    for spec in [
        GridSpec::new(1, 2),
        GridSpec::new(2, 2),
        GridSpec::new(2, 3).stubs(StubSides::ALL),
        GridSpec::new(1, 2).stubs(StubSides::ALL).turn_connectors(true),
        GridSpec::new(2, 2).turn_connectors(true),
    ] {
        assert!(check_against_oracle(&grid_network(&spec)) > 0);
    }
}

#[test]
fn random_networks_match_exhaustive_search() {
    let total: usize = (0..300).map(|seed| check_against_oracle(&random_doc(seed))).sum();
    assert!(total > 600, "only {total} routes over all seeds");
}

#[test]
fn incidence_matches_route_membership() {
    for doc in [
        grid_network(&GridSpec::new(3, 3).stubs(StubSides::ALL).turn_connectors(true)),
        random_doc(11),
        random_doc(12),
    ] {
        let net = RoadNetwork::from_doc(&doc).unwrap();
        let routes = net.enumerate_routes();
        let (inc, zero) = IncidenceMatrix::build(&routes, net.locations());
        assert_eq!((inc.n_routes(), inc.n_locations()), (routes.len(), net.locations().len()));
        let mut crossed = BTreeSet::new();
        for r in &routes {
            for (j, loc) in doc.locations.iter().enumerate() {
                let on = net.edge_ids(&r.edge_sequence).contains(&loc.edge.as_str());
                assert_eq!(inc.get(r.id, j), on as u8, "route {} location {j}", r.id);
                if on {
                    crossed.insert(j);
                }
            }
        }
        let expect_zero: Vec<usize> = (0..doc.locations.len()).filter(|j| !crossed.contains(j)).collect();
        assert_eq!(zero, expect_zero);
        assert_eq!(inc.zero_columns(), expect_zero);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r: Vec<i64> = (0..routes.len()).map(|_| rng.random_range(0..5)).collect();
        let y = inc.apply(&r);
        for j in 0..inc.n_locations() {
            let want: i64 = (0..routes.len()).map(|i| r[i] * inc.get(i, j) as i64).sum();
            assert_eq!(y[j], want);
        }
    }
}

#[test]
fn enumeration_is_deterministic_across_reloads() {
    let doc = grid_network(&GridSpec::new(3, 3).stubs(StubSides::ALL).turn_connectors(true));
    let a = RoadNetwork::from_doc(&doc).unwrap().enumerate_routes();
    let text = serde_json::to_string(&doc).unwrap();
    let b = RoadNetwork::from_json(&text).unwrap().enumerate_routes();
    assert_eq!(a, b);
    assert_eq!(a, RoadNetwork::from_doc(&doc).unwrap().enumerate_routes());
}
