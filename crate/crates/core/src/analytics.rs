//! Converts raw counts into calibrated impacts and aggregates them per leg.
//!
//! The impact value of a reading is `V = lambda * sqrt(x^2 + y^2 + z^2)`,
//! with `lambda` (g per count) fitted from drop trials by least squares
//! through the origin.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device_sim::RawTriple;
use crate::ingest::StoredRecord;
use crate::transit_world::{find_leg_overlap, LegDef, LegKind};

/// Default high/low demarcation in g.
pub const DEFAULT_HIGH_THRESHOLD_G: f64 = 8.0;

pub const UNKNOWN_LEG: &str = "UNKNOWN";

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("lambda must be a positive finite number, got {0}")]
    Lambda(f64),
    #[error("high threshold must be a positive finite number, got {0}")]
    Threshold(f64),
    #[error("no drop trials given")]
    NoTrials,
    #[error("drop trial {index} has zero raw magnitude")]
    ZeroMagnitude { index: usize },
    #[error("drop trial {index}: known_g must be positive, got {known_g}")]
    KnownG { index: usize, known_g: f64 },
    #[error("legs `{first}` and `{second}` overlap")]
    OverlappingLegs { first: String, second: String },
    #[error("drop trial file: {0}")]
    Csv(String),
}

/// One reference impact: the known g value and what the sensor reported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropTrial {
    pub known_g: f64,
    pub raw: RawTriple,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConstant {
    /// g per raw count.
    pub lambda: f64,
    pub fitted_from: Vec<DropTrial>,
    pub residual_rms: f64,
}

pub fn raw_to_gforce(raw: RawTriple, lambda: f64) -> Result<f64, AnalyticsError> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(AnalyticsError::Lambda(lambda));
    }
    Ok(lambda * raw.magnitude())
}

/// Least-squares fit of `known_g = lambda * |raw|`.
pub fn calibrate_lambda(trials: &[DropTrial]) -> Result<CalibrationConstant, AnalyticsError> {
    if trials.is_empty() {
        return Err(AnalyticsError::NoTrials);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (index, t) in trials.iter().enumerate() {
        if t.raw.magnitude_sq() == 0 {
            return Err(AnalyticsError::ZeroMagnitude { index });
        }
        if !(t.known_g.is_finite() && t.known_g > 0.0) {
            return Err(AnalyticsError::KnownG { index, known_g: t.known_g });
        }
        let m = t.raw.magnitude();
        num += t.known_g * m;
        // exact in integers, so noiseless fits invert cleanly
        den += t.raw.magnitude_sq() as f64;
    }
    let lambda = num / den;
    let sse: f64 = trials
        .iter()
        .map(|t| {
            let r = t.known_g - lambda * t.raw.magnitude();
            r * r
        })
        .sum();
    Ok(CalibrationConstant {
        lambda,
        fitted_from: trials.to_vec(),
        residual_rms: (sse / trials.len() as f64).sqrt(),
    })
}

#[derive(Debug, Deserialize)]
struct DropRow {
    known_g: f64,
    x: i32,
    y: i32,
    z: i32,
}

/// Parses drop trials from CSV with header `known_g,x,y,z`.
pub fn read_drop_trials<R: Read>(reader: R) -> Result<Vec<DropTrial>, AnalyticsError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| AnalyticsError::Csv(e.to_string()))?.clone();
    let expected = ["known_g", "x", "y", "z"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(AnalyticsError::Csv(format!(
            "expected header `known_g,x,y,z`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<DropRow>().enumerate() {
        // data rows start on line 2
        let row = row.map_err(|e| AnalyticsError::Csv(format!("line {}: {e}", i + 2)))?;
        let raw = RawTriple::new(row.x, row.y, row.z);
        if !raw.in_range() {
            return Err(AnalyticsError::Csv(format!("line {}: raw counts outside [-512, 512]", i + 2)));
        }
        out.push(DropTrial { known_g: row.known_g, raw });
    }
    Ok(out)
}

pub fn load_drop_trials(path: &Path) -> Result<Vec<DropTrial>, AnalyticsError> {
    let file = std::fs::File::open(path).map_err(|e| AnalyticsError::Csv(format!("{}: {e}", path.display())))?;
    read_drop_trials(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ImpactClass {
    High,
    Low,
}

impl ImpactClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            ImpactClass::High => "HIGH",
            ImpactClass::Low => "LOW",
        }
    }
}

/// HIGH iff `v_g >= high_threshold_g`.
pub fn classify_impact(v_g: f64, high_threshold_g: f64) -> ImpactClass {
    if v_g >= high_threshold_g {
        ImpactClass::High
    } else {
        ImpactClass::Low
    }
}

/// Leg containing `ts`, or `None` for UNKNOWN. Intervals are half-open except
/// that the last leg also owns its end instant.
pub fn assign_leg(ts: i64, legs: &[LegDef]) -> Result<Option<usize>, AnalyticsError> {
    check_legs(legs)?;
    Ok(assign_leg_unchecked(ts, legs))
}

fn check_legs(legs: &[LegDef]) -> Result<(), AnalyticsError> {
    if let Some((a, b)) = find_leg_overlap(legs) {
        return Err(AnalyticsError::OverlappingLegs {
            first: legs[a].label.clone(),
            second: legs[b].label.clone(),
        });
    }
    Ok(())
}

fn assign_leg_unchecked(ts: i64, legs: &[LegDef]) -> Option<usize> {
    let last_end = legs.iter().map(|l| l.to_ts).max();
    legs.iter()
        .position(|l| l.from_ts <= ts && (ts < l.to_ts || (Some(l.to_ts) == last_end && ts == l.to_ts)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedImpact {
    pub ts: i64,
    pub v_g: f64,
    pub klass: ImpactClass,
    /// `None` stands for UNKNOWN.
    pub leg: Option<usize>,
    pub leg_label: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegStats {
    pub leg_label: String,
    /// `None` for the UNKNOWN bucket.
    pub kind: Option<LegKind>,
    pub n_total: u64,
    pub n_high: u64,
    pub n_low: u64,
    pub max_g: f64,
    pub mean_g: f64,
}

impl LegStats {
    fn empty(leg_label: String, kind: Option<LegKind>) -> Self {
        Self { leg_label, kind, n_total: 0, n_high: 0, n_low: 0, max_g: 0.0, mean_g: 0.0 }
    }

    pub fn kind_str(&self) -> &'static str {
        self.kind.map(|k| k.as_str()).unwrap_or(UNKNOWN_LEG)
    }
}

/// Calibrates, classifies and attributes every record. Stats come back in
/// leg order followed by the UNKNOWN bucket.
pub fn aggregate(
    records: &[StoredRecord],
    legs: &[LegDef],
    lambda: f64,
    high_threshold_g: f64,
) -> Result<(Vec<CalibratedImpact>, Vec<LegStats>), AnalyticsError> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(AnalyticsError::Lambda(lambda));
    }
    if !(high_threshold_g.is_finite() && high_threshold_g > 0.0) {
        return Err(AnalyticsError::Threshold(high_threshold_g));
    }
    check_legs(legs)?;

    let mut stats: Vec<LegStats> = legs
        .iter()
        .map(|l| LegStats::empty(l.label.clone(), Some(l.kind)))
        .chain(std::iter::once(LegStats::empty(UNKNOWN_LEG.to_string(), None)))
        .collect();
    let mut sums = vec![0.0f64; stats.len()];
    let unknown = legs.len();

    let mut impacts = Vec::with_capacity(records.len());
    for rec in records {
        let v_g = raw_to_gforce(rec.record.accel, lambda)?;
        let klass = classify_impact(v_g, high_threshold_g);
        let leg = assign_leg_unchecked(rec.record.ts, legs);
        let bucket = leg.unwrap_or(unknown);
        let s = &mut stats[bucket];
        s.n_total += 1;
        match klass {
            ImpactClass::High => s.n_high += 1,
            ImpactClass::Low => s.n_low += 1,
        }
        s.max_g = s.max_g.max(v_g);
        sums[bucket] += v_g;
        impacts.push(CalibratedImpact {
            ts: rec.record.ts,
            v_g,
            klass,
            leg,
            leg_label: stats[bucket].leg_label.clone(),
            lat: rec.record.lat,
            lon: rec.record.lon,
        });
    }
    for (s, sum) in stats.iter_mut().zip(sums) {
        if s.n_total > 0 {
            s.mean_g = sum / s.n_total as f64;
        }
    }
    Ok((impacts, stats))
}
