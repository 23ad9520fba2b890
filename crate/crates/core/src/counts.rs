//! Multimodal count storage and calibration bands.
//!
//! Each source's counts are scaled into a band `[alpha_lb·f, alpha_ub·f]`
//! presumed to contain the true count. CV bounds come from the overlap with
//! manual counts; LD bounds are chained through the CV/LD overlap.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SEGMENTS: usize = 96;
pub const SEGMENT_MINUTES: usize = 15;

#[derive(Debug, Error)]
pub enum CountsError {
    #[error("count file: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: negative count {count}")]
    NegativeCount { row: usize, count: i64 },
    #[error("row {row}: unknown location {location}")]
    UnknownLocation { row: usize, location: usize },
    #[error("row {row}: duplicate key ({source_kind}, location {location}, segment {segment})")]
    DuplicateKey {
        row: usize,
        source_kind: SourceKind,
        location: usize,
        segment: usize,
    },
    #[error("row {row}: segment out of range: {segment} (expected 0..=95)")]
    SegmentOutOfRange { row: usize, segment: i64 },
    #[error("row {row}: unknown source {value:?}")]
    UnknownSource { row: usize, value: String },
    #[error("row {row}: expected source {expected}, found {found}")]
    SourceMismatch {
        row: usize,
        expected: SourceKind,
        found: SourceKind,
    },
    #[error("ragged coverage: {source_kind} location {location} lacks segment {segment}")]
    RaggedCoverage {
        source_kind: SourceKind,
        location: usize,
        segment: usize,
    },
    #[error("no usable {numerator}/{denominator} overlap for calibration")]
    EmptyOverlap {
        numerator: SourceKind,
        denominator: SourceKind,
    },
    #[error("zero {source_kind} count in calibration overlap at location {location}, segment {segment}")]
    ZeroCount {
        source_kind: SourceKind,
        location: usize,
        segment: usize,
    },
    #[error("invalid bounds: need 0 < alpha_lb <= alpha_ub, got ({0}, {1})")]
    InvalidBounds(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SourceKind {
    /// Manual ground-truth counts.
    M,
    /// Tracked computer-vision counts.
    CV,
    /// Loop or legacy detector counts.
    LD,
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceKind::M => "M",
            SourceKind::CV => "CV",
            SourceKind::LD => "LD",
        })
    }
}

impl FromStr for SourceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "M" | "MANUAL" => Ok(SourceKind::M),
            "CV" => Ok(SourceKind::CV),
            "LD" => Ok(SourceKind::LD),
            other => Err(other.to_string()),
        }
    }
}

/// Counts keyed by (source, location, segment).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CountTable {
    values: BTreeMap<(SourceKind, usize, usize), u64>,
}

#[derive(Debug, Deserialize)]
struct CountRow {
    source: String,
    location: usize,
    segment: i64,
    count: i64,
}

impl CountTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads `source,location,segment,count` rows. `n_locations` bounds the
    /// location ids when known; `only` restricts every row to one source.
    pub fn read_csv<R: Read>(
        reader: R,
        n_locations: Option<usize>,
        only: Option<SourceKind>,
    ) -> Result<Self, CountsError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut table = CountTable::new();
        for (i, rec) in rdr.deserialize::<CountRow>().enumerate() {
            let row = i + 2; // 1-based, after header
            let rec = rec?;
            let source: SourceKind = rec
                .source
                .parse()
                .map_err(|value| CountsError::UnknownSource { row, value })?;
            if let Some(expected) = only {
                if source != expected {
                    return Err(CountsError::SourceMismatch {
                        row,
                        expected,
                        found: source,
                    });
                }
            }
            if !(0..SEGMENTS as i64).contains(&rec.segment) {
                return Err(CountsError::SegmentOutOfRange {
                    row,
                    segment: rec.segment,
                });
            }
            if rec.count < 0 {
                return Err(CountsError::NegativeCount {
                    row,
                    count: rec.count,
                });
            }
            if let Some(n) = n_locations {
                if rec.location >= n {
                    return Err(CountsError::UnknownLocation {
                        row,
                        location: rec.location,
                    });
                }
            }
            let segment = rec.segment as usize;
            if table
                .values
                .insert((source, rec.location, segment), rec.count as u64)
                .is_some()
            {
                return Err(CountsError::DuplicateKey {
                    row,
                    source_kind: source,
                    location: rec.location,
                    segment,
                });
            }
        }
        table.check_coverage()?;
        Ok(table)
    }

    pub fn insert(&mut self, source: SourceKind, location: usize, segment: usize, count: u64) {
        assert!(segment < SEGMENTS, "segment {segment} out of range");
        self.values.insert((source, location, segment), count);
    }

    pub fn get(&self, source: SourceKind, location: usize, segment: usize) -> Option<u64> {
        self.values.get(&(source, location, segment)).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows of one source in (location, segment) order.
    pub fn iter_source(&self, source: SourceKind) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.values
            .range((source, 0, 0)..=(source, usize::MAX, usize::MAX))
            .map(|(&(_, j, t), &v)| (j, t, v))
    }

    pub fn iter(&self) -> impl Iterator<Item = (SourceKind, usize, usize, u64)> + '_ {
        self.values.iter().map(|(&(s, j, t), &v)| (s, j, t, v))
    }

    /// Every (source, location) pair must cover every segment its source
    /// declares anywhere in the table.
    pub fn check_coverage(&self) -> Result<(), CountsError> {
        for source in [SourceKind::M, SourceKind::CV, SourceKind::LD] {
            let mut segments = BTreeSet::new();
            let mut per_location: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
            for (j, t, _) in self.iter_source(source) {
                segments.insert(t);
                per_location.entry(j).or_default().insert(t);
            }
            for (location, have) in per_location {
                if let Some(&segment) = segments.difference(&have).next() {
                    return Err(CountsError::RaggedCoverage {
                        source_kind: source,
                        location,
                        segment,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), CountsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["source", "location", "segment", "count"])?;
        for (s, j, t, v) in self.iter() {
            w.write_record([s.to_string(), j.to_string(), t.to_string(), v.to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBounds {
    pub source: SourceKind,
    pub alpha_lb: f64,
    pub alpha_ub: f64,
}

impl CalibrationBounds {
    pub fn new(source: SourceKind, alpha_lb: f64, alpha_ub: f64) -> Result<Self, CountsError> {
        if !(alpha_lb > 0.0 && alpha_lb <= alpha_ub && alpha_ub.is_finite()) {
            return Err(CountsError::InvalidBounds(alpha_lb, alpha_ub));
        }
        Ok(Self {
            source,
            alpha_lb,
            alpha_ub,
        })
    }

    /// Deployment defaults for CV counts.
    pub fn default_cv() -> Self {
        Self {
            source: SourceKind::CV,
            alpha_lb: 0.94,
            alpha_ub: 1.12,
        }
    }

    /// Deployment defaults for LD counts.
    pub fn default_ld() -> Self {
        Self {
            source: SourceKind::LD,
            alpha_lb: 0.02,
            alpha_ub: 19.06,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioEntry {
    pub location: usize,
    pub segment: usize,
    pub ratio: f64,
}

/// Calibration output, serialized as the calibration report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub source: SourceKind,
    pub alpha_lb: f64,
    pub alpha_ub: f64,
    pub ratios: Vec<RatioEntry>,
}

impl CalibrationReport {
    pub fn bounds(&self) -> CalibrationBounds {
        CalibrationBounds {
            source: self.source,
            alpha_lb: self.alpha_lb,
            alpha_ub: self.alpha_ub,
        }
    }
}

/// Ratios num/den over the (location, segment) overlap of two sources.
/// Pairs whose denominator is zero are skipped with a warning; an error is
/// returned only if nothing usable remains.
fn overlap_ratios(
    table: &CountTable,
    numerator: SourceKind,
    denominator: SourceKind,
) -> Result<Vec<RatioEntry>, CountsError> {
    let mut ratios = Vec::new();
    let mut zero = None;
    for (j, t, num) in table.iter_source(numerator) {
        let Some(den) = table.get(denominator, j, t) else {
            continue;
        };
        if den == 0 {
            warn!("skipping {numerator}/{denominator} overlap at location {j}, segment {t}: zero {denominator} count");
            zero.get_or_insert((j, t));
            continue;
        }
        ratios.push(RatioEntry {
            location: j,
            segment: t,
            ratio: num as f64 / den as f64,
        });
    }
    if ratios.is_empty() {
        return Err(match zero {
            Some((location, segment)) => CountsError::ZeroCount {
                source_kind: denominator,
                location,
                segment,
            },
            None => CountsError::EmptyOverlap {
                numerator,
                denominator,
            },
        });
    }
    Ok(ratios)
}

fn min_max(ratios: &[RatioEntry]) -> (f64, f64) {
    ratios.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r.ratio), hi.max(r.ratio))
    })
}

/// CV bounds: extreme manual/CV ratios over the overlap.
pub fn calibrate_bounds(table: &CountTable) -> Result<CalibrationReport, CountsError> {
    let ratios = overlap_ratios(table, SourceKind::M, SourceKind::CV)?;
    let (alpha_lb, alpha_ub) = min_max(&ratios);
    if alpha_lb <= 0.0 {
        return Err(CountsError::InvalidBounds(alpha_lb, alpha_ub));
    }
    Ok(CalibrationReport {
        source: SourceKind::CV,
        alpha_lb,
        alpha_ub,
        ratios,
    })
}

/// LD bounds: CV bounds scaled by the extreme CV/LD ratios over their overlap.
pub fn chain_bounds(cv: &CalibrationBounds, table: &CountTable) -> Result<CalibrationReport, CountsError> {
    let ratios = overlap_ratios(table, SourceKind::CV, SourceKind::LD)?;
    let (lo, hi) = min_max(&ratios);
    let (alpha_lb, alpha_ub) = (cv.alpha_lb * lo, cv.alpha_ub * hi);
    if alpha_lb <= 0.0 {
        return Err(CountsError::InvalidBounds(alpha_lb, alpha_ub));
    }
    Ok(CalibrationReport {
        source: SourceKind::LD,
        alpha_lb,
        alpha_ub,
        ratios,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "band lower {lo} exceeds upper {hi}");
        Self { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Bands for one source, keyed by (location, segment). Locations without a
/// count have no band.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CountBands {
    pub source: Option<SourceKind>,
    bands: BTreeMap<(usize, usize), Band>,
}

impl CountBands {
    pub fn get(&self, location: usize, segment: usize) -> Option<Band> {
        self.bands.get(&(location, segment)).copied()
    }

    pub fn insert(&mut self, location: usize, segment: usize, band: Band) {
        self.bands.insert((location, segment), band);
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), Band)> + '_ {
        self.bands.iter().map(|(&k, &b)| (k, b))
    }

    /// Dense per-location view of one segment.
    pub fn segment(&self, segment: usize, n_locations: usize) -> Vec<Option<Band>> {
        (0..n_locations).map(|j| self.get(j, segment)).collect()
    }
}

pub fn make_bands(table: &CountTable, bounds: &CalibrationBounds, source: SourceKind) -> CountBands {
    let mut out = CountBands {
        source: Some(source),
        ..Default::default()
    };
    for (j, t, f) in table.iter_source(source) {
        let f = f as f64;
        out.insert(j, t, Band::new(bounds.alpha_lb * f, bounds.alpha_ub * f));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<CountTable, CountsError> {
        CountTable::read_csv(text.as_bytes(), None, None)
    }

    #[test]
    fn header_only_is_empty() {
        assert!(parse("source,location,segment,count\n").unwrap().is_empty());
    }

    #[test]
    fn retrieves_value() {
        let t = parse("source,location,segment,count\nCV,3,68,905\n").unwrap();
        assert_eq!(t.get(SourceKind::CV, 3, 68), Some(905));
    }

    #[test]
    fn segment_96_rejected() {
        let err = parse("source,location,segment,count\nCV,3,96,5\n").unwrap_err();
        assert!(err.to_string().contains("segment out of range"));
    }

    #[test]
    fn bad_rows_rejected() {
        assert!(matches!(
            parse("source,location,segment,count\nCV,3,1,-2\n"),
            Err(CountsError::NegativeCount { .. })
        ));
        assert!(matches!(
            parse("source,location,segment,count\nCV,3,1,2\nCV,3,1,4\n"),
            Err(CountsError::DuplicateKey { .. })
        ));
        assert!(matches!(
            CountTable::read_csv("source,location,segment,count\nCV,9,1,2\n".as_bytes(), Some(4), None),
            Err(CountsError::UnknownLocation { .. })
        ));
        assert!(matches!(
            CountTable::read_csv("source,location,segment,count\nLD,1,1,2\n".as_bytes(), None, Some(SourceKind::CV)),
            Err(CountsError::SourceMismatch { .. })
        ));
        assert!(matches!(
            parse("source,location,segment,count\nCV,0,1,2\nCV,0,2,2\nCV,1,1,3\n"),
            Err(CountsError::RaggedCoverage { .. })
        ));
    }

    #[test]
    fn identity_calibration() {
        let mut t = CountTable::new();
        t.insert(SourceKind::M, 0, 5, 10);
        t.insert(SourceKind::CV, 0, 5, 10);
        let r = calibrate_bounds(&t).unwrap();
        assert_eq!((r.alpha_lb, r.alpha_ub), (1.0, 1.0));
    }

    #[test]
    fn zero_cv_only_overlap_errors() {
        let mut t = CountTable::new();
        t.insert(SourceKind::M, 0, 5, 10);
        t.insert(SourceKind::CV, 0, 5, 0);
        assert!(matches!(calibrate_bounds(&t), Err(CountsError::ZeroCount { .. })));
    }

    #[test]
    fn zero_cv_pair_skipped_when_others_remain() {
        let mut t = CountTable::new();
        t.insert(SourceKind::M, 0, 5, 10);
        t.insert(SourceKind::CV, 0, 5, 0);
        t.insert(SourceKind::M, 1, 5, 9);
        t.insert(SourceKind::CV, 1, 5, 10);
        let r = calibrate_bounds(&t).unwrap();
        assert_eq!(r.ratios.len(), 1);
        assert_eq!((r.alpha_lb, r.alpha_ub), (0.9, 0.9));
    }

    #[test]
    fn no_overlap_errors() {
        let mut t = CountTable::new();
        t.insert(SourceKind::M, 0, 5, 10);
        t.insert(SourceKind::CV, 1, 5, 10);
        assert!(matches!(calibrate_bounds(&t), Err(CountsError::EmptyOverlap { .. })));
    }

    #[test]
    fn chain_with_identical_counts_copies_cv() {
        let mut t = CountTable::new();
        for j in 0..3 {
            t.insert(SourceKind::CV, j, 1, 40 + j as u64);
            t.insert(SourceKind::LD, j, 1, 40 + j as u64);
        }
        let cv = CalibrationBounds::new(SourceKind::CV, 0.9, 1.1).unwrap();
        let ld = chain_bounds(&cv, &t).unwrap();
        assert_eq!((ld.alpha_lb, ld.alpha_ub), (0.9, 1.1));
    }

    #[test]
    fn chain_arithmetic() {
        let mut t = CountTable::new();
        t.insert(SourceKind::CV, 0, 1, 10);
        t.insert(SourceKind::LD, 0, 1, 20);
        t.insert(SourceKind::CV, 1, 1, 40);
        t.insert(SourceKind::LD, 1, 1, 20);
        let cv = CalibrationBounds::new(SourceKind::CV, 0.9, 1.1).unwrap();
        let ld = chain_bounds(&cv, &t).unwrap();
        assert!((ld.alpha_lb - 0.45).abs() < 1e-12);
        assert!((ld.alpha_ub - 2.2).abs() < 1e-12);
    }

    #[test]
    fn band_examples() {
        let mut t = CountTable::new();
        t.insert(SourceKind::CV, 0, 0, 100);
        t.insert(SourceKind::CV, 1, 0, 0);
        let b = make_bands(&t, &CalibrationBounds::default_cv(), SourceKind::CV);
        let b0 = b.get(0, 0).unwrap();
        assert!((b0.lo - 94.0).abs() < 1e-9 && (b0.hi - 112.0).abs() < 1e-9);
        assert_eq!(b.get(1, 0), Some(Band { lo: 0.0, hi: 0.0 }));
        assert_eq!(b.get(2, 0), None);

        let mut t = CountTable::new();
        t.insert(SourceKind::LD, 4, 2, 7);
        let bounds = CalibrationBounds::new(SourceKind::LD, 0.5, 2.0).unwrap();
        let b = make_bands(&t, &bounds, SourceKind::LD);
        assert_eq!(b.get(4, 2), Some(Band { lo: 3.5, hi: 14.0 }));
        assert!(make_bands(&t, &bounds, SourceKind::CV).is_empty());
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(CalibrationBounds::new(SourceKind::CV, 0.0, 1.0).is_err());
        assert!(CalibrationBounds::new(SourceKind::CV, 1.2, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn bounds_enclose_every_ratio_and_ignore_scale(
            pairs in prop::collection::vec((1u64..5000, 1u64..5000), 1..20),
            scale in 1u64..7,
        ) {
            let mut t = CountTable::new();
            let mut scaled = CountTable::new();
            for (j, &(m, cv)) in pairs.iter().enumerate() {
                t.insert(SourceKind::M, j, 10, m);
                t.insert(SourceKind::CV, j, 10, cv);
                scaled.insert(SourceKind::M, j, 10, m * scale);
                scaled.insert(SourceKind::CV, j, 10, cv * scale);
            }
            let r = calibrate_bounds(&t).unwrap();
            for &(m, cv) in &pairs {
                let ratio = m as f64 / cv as f64;
                prop_assert!(r.alpha_lb <= ratio && ratio <= r.alpha_ub);
            }
            let rs = calibrate_bounds(&scaled).unwrap();
            prop_assert!((rs.alpha_lb - r.alpha_lb).abs() <= 1e-12 * r.alpha_lb);
            prop_assert!((rs.alpha_ub - r.alpha_ub).abs() <= 1e-12 * r.alpha_ub);
        }

        #[test]
        fn bands_are_monotone(f1 in 0u64..10_000, f2 in 0u64..10_000, lb in 0.01f64..2.0, width in 0.0f64..3.0) {
            let (f1, f2) = (f1.min(f2), f1.max(f2));
            let bounds = CalibrationBounds::new(SourceKind::CV, lb, lb + width).unwrap();
            let mut t = CountTable::new();
            t.insert(SourceKind::CV, 0, 0, f1);
            t.insert(SourceKind::CV, 1, 0, f2);
            let b = make_bands(&t, &bounds, SourceKind::CV);
            let (b1, b2) = (b.get(0, 0).unwrap(), b.get(1, 0).unwrap());
            prop_assert!(b1.lo >= 0.0 && b1.lo <= b1.hi);
            prop_assert!(b1.hi <= b2.hi);
            prop_assert!(b1.lo <= b2.lo);
        }
    }
}
