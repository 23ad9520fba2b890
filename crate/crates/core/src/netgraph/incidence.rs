use std::io::Write;

use super::{CountingLocation, Route};

/// Binary n×m matrix; entry (i, j) is 1 iff route i traverses the edge
/// counted by location j. Stored sparsely in both orientations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncidenceMatrix {
    n_locations: usize,
    by_route: Vec<Vec<usize>>,
    by_location: Vec<Vec<usize>>,
}

impl IncidenceMatrix {
    /// Builds the matrix and returns it with the ids of all-zero columns.
    pub fn build(routes: &[Route], locations: &[CountingLocation]) -> (Self, Vec<usize>) {
        let by_route: Vec<Vec<usize>> = routes
            .iter()
            .map(|r| {
                locations
                    .iter()
                    .filter(|l| r.edge_sequence.contains(&l.edge))
                    .map(|l| l.id)
                    .collect()
            })
            .collect();
        let m = Self::from_rows(locations.len(), by_route);
        let zero = m.zero_columns();
        (m, zero)
    }

    /// From per-route lists of location indices. Duplicates are merged.
    pub fn from_rows(n_locations: usize, mut by_route: Vec<Vec<usize>>) -> Self {
        let mut by_location = vec![Vec::new(); n_locations];
        for (i, row) in by_route.iter_mut().enumerate() {
            row.sort_unstable();
            row.dedup();
            for &j in row.iter() {
                assert!(j < n_locations, "location index {j} out of range");
                by_location[j].push(i);
            }
        }
        Self {
            n_locations,
            by_route,
            by_location,
        }
    }

    /// From a dense 0/1 matrix, rows = routes.
    pub fn from_dense(n_locations: usize, rows: &[Vec<u8>]) -> Self {
        let by_route = rows
            .iter()
            .map(|row| {
                assert_eq!(row.len(), n_locations);
                row.iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        Self::from_rows(n_locations, by_route)
    }

    pub fn n_routes(&self) -> usize {
        self.by_route.len()
    }

    pub fn n_locations(&self) -> usize {
        self.n_locations
    }

    pub fn get(&self, route: usize, location: usize) -> u8 {
        self.by_route[route].binary_search(&location).is_ok() as u8
    }

    /// Locations traversed by `route`, ascending.
    pub fn route_locations(&self, route: usize) -> &[usize] {
        &self.by_route[route]
    }

    /// Routes traversing `location`, ascending.
    pub fn location_routes(&self, location: usize) -> &[usize] {
        &self.by_location[location]
    }

    pub fn nnz(&self) -> usize {
        self.by_route.iter().map(Vec::len).sum()
    }

    pub fn zero_columns(&self) -> Vec<usize> {
        (0..self.n_locations)
            .filter(|&j| self.by_location[j].is_empty())
            .collect()
    }

    /// A·r over integer route counts.
    pub fn apply(&self, r: &[i64]) -> Vec<i64> {
        assert_eq!(r.len(), self.n_routes());
        let mut out = vec![0i64; self.n_locations];
        for (row, &ri) in self.by_route.iter().zip(r) {
            if ri != 0 {
                for &j in row {
                    out[j] += ri;
                }
            }
        }
        out
    }

    pub fn apply_f64(&self, r: &[f64]) -> Vec<f64> {
        assert_eq!(r.len(), self.n_routes());
        let mut out = vec![0.0; self.n_locations];
        for (row, &ri) in self.by_route.iter().zip(r) {
            if ri != 0.0 {
                for &j in row {
                    out[j] += ri;
                }
            }
        }
        out
    }

    /// Aᵀ·y.
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.n_locations);
        self.by_route
            .iter()
            .map(|row| row.iter().map(|&j| y[j]).sum())
            .collect()
    }

    /// CSV export: header row of location ids, one row per route.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.n_locations).map(|j| j.to_string()).collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.n_routes() {
            let row: Vec<&str> = (0..self.n_locations)
                .map(|j| if self.get(i, j) == 1 { "1" } else { "0" })
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}
