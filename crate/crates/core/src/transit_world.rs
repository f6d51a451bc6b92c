//! Shipment journey model and the simulation loop that drives a [`Device`]
//! through it.
//!
//! Time is epoch milliseconds. Legs and coverage are time intervals; the
//! position is interpolated between waypoints. The device sees gravity on
//! `-y`, Gaussian ambient vibration and half-sine shock pulses.
//!
//! Ambient noise is counter-based: sample `i` always draws the same four
//! words from a ChaCha8 stream keyed by the seed, so any sample can be
//! recomputed in isolation. Box-Muller on 53-bit uniforms cannot exceed
//! [`noise_radius_max`] standard deviations, which lets the loop skip quiet
//! stretches whose worst-case magnitude stays at or below the capture
//! threshold without changing which samples trigger.

use std::f64::consts::PI;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device_sim::{
    quantize_acceleration, AckingUplink, BufferError, ConfigError, Device, DeviceConfig, FlushEvent,
    NetworkKind, SensorRecord, Uplink,
};
use crate::ingest::UplinkBatch;

pub const GRAVITY_G: [f64; 3] = [0.0, -1.0, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub ts: i64,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LegKind {
    Land,
    Sea,
}

impl LegKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LegKind::Land => "LAND",
            LegKind::Sea => "SEA",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LegColor {
    Red,
    Blue,
    Green,
    #[default]
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LegDef {
    pub label: String,
    pub kind: LegKind,
    pub from_ts: i64,
    pub to_ts: i64,
    #[serde(default)]
    pub display_color: LegColor,
}

impl LegDef {
    pub fn overlaps(&self, other: &LegDef) -> bool {
        self.from_ts < other.to_ts && other.from_ts < self.to_ts
    }
}

/// First pair of legs whose intervals overlap, by index.
pub fn find_leg_overlap(legs: &[LegDef]) -> Option<(usize, usize)> {
    for i in 0..legs.len() {
        for j in (i + 1)..legs.len() {
            if legs[i].overlaps(&legs[j]) {
                return Some((i, j));
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageRegion {
    pub from_ts: i64,
    pub to_ts: i64,
    pub available: Vec<NetworkKind>,
}

impl CoverageRegion {
    pub fn contains(&self, ts: i64) -> bool {
        self.from_ts <= ts && ts < self.to_ts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockEvent {
    /// Centre of the pulse.
    pub ts: i64,
    pub peak_g: f64,
    pub axis: [f64; 3],
    pub duration_ms: f64,
}

impl ShockEvent {
    /// Half-sine pulse value in g along `axis`; zero outside the open window.
    pub fn amplitude_at(&self, ts: i64) -> f64 {
        let dt = (ts - self.ts) as f64;
        let half = self.duration_ms / 2.0;
        if dt.abs() < half {
            self.peak_g * (PI * dt / self.duration_ms).cos()
        } else {
            0.0
        }
    }

    /// Millisecond bounds enclosing every instant with non-zero amplitude.
    fn window_ms(&self) -> (i64, i64) {
        let half = self.duration_ms / 2.0;
        ((self.ts as f64 - half).floor() as i64, (self.ts as f64 + half).ceil() as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub start_ts: i64,
    pub waypoints: Vec<Waypoint>,
    pub legs: Vec<LegDef>,
    #[serde(default)]
    pub coverage: Vec<CoverageRegion>,
    #[serde(default)]
    pub shocks: Vec<ShockEvent>,
    /// RMS magnitude of the ambient vibration vector, in g.
    #[serde(default)]
    pub ambient_g: f64,
    /// Device section; `None` means [`DeviceConfig::default`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<DeviceConfig>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("parse error at line {line}, column {column} (field `{field}`): {message}")]
    Parse { line: usize, column: usize, field: String, message: String },
    #[error("invalid scenario field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn invalid<T>(field: impl Into<String>, reason: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid { field: field.into(), reason: reason.into() })
}

#[derive(Debug, Error, PartialEq)]
#[error("ts {ts} outside journey span [{start}, {end}]")]
pub struct SpanError {
    pub ts: i64,
    pub start: i64,
    pub end: i64,
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.into(), source })?;
    Scenario::from_json_str(&text)
}

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Self, ScenarioError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let field = match e.path().to_string() {
                p if p == "." => "(top level)".to_string(),
                p => p,
            };
            let inner = e.into_inner();
            let location = format!(" at line {} column {}", inner.line(), inner.column());
            let message = inner.to_string();
            ScenarioError::Parse {
                line: inner.line(),
                column: inner.column(),
                field,
                message: message.strip_suffix(&location).unwrap_or(&message).to_string(),
            }
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.name.trim().is_empty() {
            return invalid("name", "must not be empty");
        }
        let Some(first) = self.waypoints.first() else {
            return invalid("waypoints", "at least one waypoint is required");
        };
        if first.ts != self.start_ts {
            return invalid("start_ts", format!("{} differs from first waypoint ts {}", self.start_ts, first.ts));
        }
        for (i, w) in self.waypoints.iter().enumerate() {
            if !(w.lat.is_finite() && (-90.0..=90.0).contains(&w.lat)) {
                return invalid(format!("waypoints[{i}].lat"), "must be a latitude in [-90, 90]");
            }
            if !(w.lon.is_finite() && (-180.0..=180.0).contains(&w.lon)) {
                return invalid(format!("waypoints[{i}].lon"), "must be a longitude in [-180, 180]");
            }
            if i > 0 && w.ts <= self.waypoints[i - 1].ts {
                return invalid(format!("waypoints[{i}].ts"), "waypoint timestamps must be strictly increasing");
            }
        }
        let (start, end) = self.span();

        for (i, leg) in self.legs.iter().enumerate() {
            if leg.from_ts >= leg.to_ts {
                return invalid(format!("legs[{i}]"), format!("leg `{}` has from_ts >= to_ts", leg.label));
            }
        }
        if let Some((a, b)) = find_leg_overlap(&self.legs) {
            return invalid(
                format!("legs[{a}], legs[{b}]"),
                format!("legs `{}` and `{}` overlap", self.legs[a].label, self.legs[b].label),
            );
        }
        if self.legs.is_empty() {
            return invalid("legs", "legs must partition the journey span");
        }
        let mut cursor = start;
        for (i, leg) in self.legs.iter().enumerate() {
            if leg.from_ts != cursor {
                return invalid(
                    format!("legs[{i}].from_ts"),
                    format!("leg `{}` starts at {} but the previous boundary is {cursor}", leg.label, leg.from_ts),
                );
            }
            cursor = leg.to_ts;
        }
        if cursor != end {
            return invalid("legs", format!("last leg ends at {cursor}, journey ends at {end}"));
        }

        for (i, c) in self.coverage.iter().enumerate() {
            if c.from_ts >= c.to_ts {
                return invalid(format!("coverage[{i}]"), "from_ts must be before to_ts");
            }
            if c.available.contains(&NetworkKind::None) {
                return invalid(format!("coverage[{i}].available"), "NONE is not a network");
            }
        }

        for (i, s) in self.shocks.iter().enumerate() {
            if s.ts < start || s.ts > end {
                return invalid(format!("shocks[{i}].ts"), format!("{} outside journey span [{start}, {end}]", s.ts));
            }
            if !(s.peak_g.is_finite() && s.peak_g > 0.0) {
                return invalid(format!("shocks[{i}].peak_g"), "must be > 0");
            }
            if !(s.duration_ms.is_finite() && s.duration_ms > 0.0) {
                return invalid(format!("shocks[{i}].duration_ms"), "must be > 0");
            }
            let norm = s.axis.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm.is_nan() || (norm - 1.0).abs() > 1e-9 {
                return invalid(format!("shocks[{i}].axis"), format!("must be a unit vector, |axis| = {norm}"));
            }
        }

        if !(self.ambient_g.is_finite() && self.ambient_g >= 0.0) {
            return invalid("ambient_g", "must be >= 0");
        }
        if let Some(device) = &self.device {
            device.validate()?;
        }
        Ok(())
    }

    /// First and last waypoint timestamps.
    pub fn span(&self) -> (i64, i64) {
        (self.waypoints[0].ts, self.waypoints[self.waypoints.len() - 1].ts)
    }

    fn check_span(&self, ts: i64) -> Result<(), SpanError> {
        let (start, end) = self.span();
        if ts < start || ts > end {
            return Err(SpanError { ts, start, end });
        }
        Ok(())
    }

    pub fn device_config(&self) -> DeviceConfig {
        self.device.clone().unwrap_or_default()
    }

    /// Sum of all active shock pulses at `ts`, in g.
    pub fn shock_acceleration(&self, ts: i64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for shock in &self.shocks {
            let a = shock.amplitude_at(ts);
            if a != 0.0 {
                for (o, axis) in out.iter_mut().zip(shock.axis) {
                    *o += a * axis;
                }
            }
        }
        out
    }

    /// Gravity plus the given noise (already in g) plus shocks.
    pub fn acceleration(&self, ts: i64, noise_g: [f64; 3]) -> [f64; 3] {
        let shock = self.shock_acceleration(ts);
        [
            GRAVITY_G[0] + noise_g[0] + shock[0],
            GRAVITY_G[1] + noise_g[1] + shock[1],
            GRAVITY_G[2] + noise_g[2] + shock[2],
        ]
    }

    /// Proper acceleration at `ts`, drawing ambient noise from `rng`.
    pub fn true_acceleration_at(&self, ts: i64, rng: &mut impl RngCore) -> Result<[f64; 3], SpanError> {
        self.check_span(ts)?;
        let noise = AmbientNoise::scaled_draw(rng, self.ambient_g);
        Ok(self.acceleration(ts, noise))
    }

    /// Union of the networks of every region containing `ts`.
    pub fn coverage_at(&self, ts: i64) -> Vec<NetworkKind> {
        let mut out: Vec<NetworkKind> = Vec::new();
        for region in self.coverage.iter().filter(|c| c.contains(ts)) {
            for &kind in &region.available {
                if !out.contains(&kind) {
                    out.push(kind);
                }
            }
        }
        out.sort();
        out
    }

    /// Linear interpolation between the bracketing waypoints.
    pub fn position_at(&self, ts: i64) -> (f64, f64) {
        let w = &self.waypoints;
        if ts <= w[0].ts {
            return (w[0].lat, w[0].lon);
        }
        let idx = w.partition_point(|p| p.ts <= ts);
        if idx >= w.len() {
            let last = w[w.len() - 1];
            return (last.lat, last.lon);
        }
        let (a, b) = (w[idx - 1], w[idx]);
        let f = (ts - a.ts) as f64 / (b.ts - a.ts) as f64;
        (a.lat + f * (b.lat - a.lat), a.lon + f * (b.lon - a.lon))
    }

    /// Earliest coverage change strictly after `ts`, if any.
    fn next_coverage_start(&self, ts: i64) -> Option<i64> {
        self.coverage.iter().map(|c| c.from_ts).filter(|&f| f > ts).min()
    }
}

/// Largest Box-Muller radius reachable from 53-bit uniforms, in standard deviations.
pub fn noise_radius_max() -> f64 {
    (106.0 * std::f64::consts::LN_2).sqrt()
}

/// Two independent standard normals by Box-Muller. `u1` lies in `[2^-53, 1]`.
pub fn standard_normal_pair(rng: &mut impl RngCore) -> (f64, f64) {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * SCALE;
    let u2 = (rng.next_u64() >> 11) as f64 * SCALE;
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Seekable per-sample ambient vibration.
#[derive(Debug, Clone)]
pub struct AmbientNoise {
    rng: ChaCha8Rng,
    sigma: f64,
}

/// 32-bit words consumed per sample: four `u64` draws.
const WORDS_PER_SAMPLE: u128 = 8;

impl AmbientNoise {
    /// `ambient_g` is the RMS of the noise vector; each axis gets `ambient_g / sqrt(3)`.
    pub fn new(seed: u64, ambient_g: f64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), sigma: ambient_g / 3f64.sqrt() }
    }

    fn scaled_draw(rng: &mut impl RngCore, ambient_g: f64) -> [f64; 3] {
        let sigma = ambient_g / 3f64.sqrt();
        let (a, b) = standard_normal_pair(rng);
        let (c, _) = standard_normal_pair(rng);
        [a * sigma, b * sigma, c * sigma]
    }

    /// Positions the stream so the next draw is sample `index`.
    pub fn seek(&mut self, index: u64) {
        self.rng.set_word_pos(index as u128 * WORDS_PER_SAMPLE);
    }

    /// Draws the next sample's noise vector in g.
    pub fn next_sample(&mut self) -> [f64; 3] {
        let sigma = self.sigma;
        let (a, b) = standard_normal_pair(&mut self.rng);
        let (c, _) = standard_normal_pair(&mut self.rng);
        [a * sigma, b * sigma, c * sigma]
    }

    pub fn sample(&mut self, index: u64) -> [f64; 3] {
        self.seek(index);
        self.next_sample()
    }

    /// Upper bound on the magnitude of any noise vector this source can emit.
    pub fn magnitude_bound(&self) -> f64 {
        self.sigma * 3f64.sqrt() * noise_radius_max()
    }
}

/// Maps sample indices to integer millisecond timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleClock {
    pub start_ts: i64,
    pub rate_hz: u32,
}

impl SampleClock {
    pub fn tick_ts(&self, index: u64) -> i64 {
        self.start_ts + (index as i128 * 1000 / self.rate_hz as i128) as i64
    }

    /// Smallest index whose timestamp is at or after `ts`.
    pub fn first_tick_at_or_after(&self, ts: i64) -> u64 {
        let offset = ts as i128 - self.start_ts as i128;
        if offset <= 0 {
            return 0;
        }
        let num = offset * self.rate_hz as i128;
        ((num + 999) / 1000) as u64
    }

    /// Largest index whose timestamp is at or before `ts`, if any.
    pub fn last_tick_at_or_before(&self, ts: i64) -> Option<u64> {
        let offset = ts as i128 - self.start_ts as i128;
        if offset < 0 {
            return None;
        }
        let num = (offset + 1) * self.rate_hz as i128;
        Some(((num + 999) / 1000 - 1) as u64)
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
}

/// Everything a simulation run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct JourneyLog {
    pub scenario: String,
    pub device_id: String,
    pub seed: u64,
    pub start_ts: i64,
    pub end_ts: i64,
    pub samples_taken: u64,
    /// Every triggered sample, including ones later evicted.
    pub captures: Vec<SensorRecord>,
    pub flushes: Vec<FlushEvent>,
    /// Every batch put on the wire, retries included.
    pub batches: Vec<UplinkBatch>,
    /// Records still on the device at the end.
    pub buffered: Vec<SensorRecord>,
    pub dropped_count: u64,
    pub final_battery_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JourneyHeader {
    scenario: String,
    device_id: String,
    seed: u64,
    start_ts: i64,
    end_ts: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JourneySummary {
    samples_taken: u64,
    dropped_count: u64,
    final_battery_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum JourneyLine {
    Header(JourneyHeader),
    Capture(SensorRecord),
    Flush(FlushEvent),
    Batch(UplinkBatch),
    Buffered(SensorRecord),
    Summary(JourneySummary),
}

#[derive(Debug, Error)]
pub enum JourneyLogError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("journey log is missing its {0} line")]
    Missing(&'static str),
}

impl JourneyLog {
    /// Records from acknowledged batches, one per timestamp, in ts order.
    pub fn delivered_records(&self) -> Vec<SensorRecord> {
        let mut acked_seqs = Vec::new();
        for f in &self.flushes {
            if let (true, Some(seq)) = (f.acked, f.seq) {
                acked_seqs.push(seq);
            }
        }
        let mut out: Vec<SensorRecord> = self
            .batches
            .iter()
            .filter(|b| acked_seqs.contains(&b.seq))
            .flat_map(|b| b.records.iter().cloned())
            .collect();
        out.sort_by_key(|r| r.ts);
        out.dedup_by_key(|r| r.ts);
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let line = |l: JourneyLine, w: &mut W| -> io::Result<()> {
            serde_json::to_writer(&mut *w, &l).map_err(io::Error::from)?;
            w.write_all(b"\n")
        };
        line(
            JourneyLine::Header(JourneyHeader {
                scenario: self.scenario.clone(),
                device_id: self.device_id.clone(),
                seed: self.seed,
                start_ts: self.start_ts,
                end_ts: self.end_ts,
            }),
            &mut w,
        )?;
        for r in &self.captures {
            line(JourneyLine::Capture(r.clone()), &mut w)?;
        }
        for f in &self.flushes {
            line(JourneyLine::Flush(f.clone()), &mut w)?;
        }
        for b in &self.batches {
            line(JourneyLine::Batch(b.clone()), &mut w)?;
        }
        for r in &self.buffered {
            line(JourneyLine::Buffered(r.clone()), &mut w)?;
        }
        line(
            JourneyLine::Summary(JourneySummary {
                samples_taken: self.samples_taken,
                dropped_count: self.dropped_count,
                final_battery_pct: self.final_battery_pct,
            }),
            &mut w,
        )
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, JourneyLogError> {
        let mut header = None;
        let mut summary = None;
        let (mut captures, mut flushes, mut batches, mut buffered) = (vec![], vec![], vec![], vec![]);
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: JourneyLine =
                serde_json::from_str(&line).map_err(|source| JourneyLogError::Parse { line: i + 1, source })?;
            match parsed {
                JourneyLine::Header(h) => header = Some(h),
                JourneyLine::Capture(c) => captures.push(c),
                JourneyLine::Flush(f) => flushes.push(f),
                JourneyLine::Batch(b) => batches.push(b),
                JourneyLine::Buffered(b) => buffered.push(b),
                JourneyLine::Summary(s) => summary = Some(s),
            }
        }
        let h = header.ok_or(JourneyLogError::Missing("header"))?;
        let s = summary.ok_or(JourneyLogError::Missing("summary"))?;
        Ok(Self {
            scenario: h.scenario,
            device_id: h.device_id,
            seed: h.seed,
            start_ts: h.start_ts,
            end_ts: h.end_ts,
            samples_taken: s.samples_taken,
            captures,
            flushes,
            batches,
            buffered,
            dropped_count: s.dropped_count,
            final_battery_pct: s.final_battery_pct,
        })
    }
}

/// Runs the device across the scenario with an always-acknowledging uplink.
pub fn run_simulation(scenario: &Scenario, config: &DeviceConfig, seed: u64) -> Result<JourneyLog, SimError> {
    run_simulation_with(scenario, config, seed, &mut AckingUplink)
}

/// Runs the device across the scenario, handing each batch to `uplink`.
pub fn run_simulation_with(
    scenario: &Scenario,
    config: &DeviceConfig,
    seed: u64,
    uplink: &mut dyn Uplink,
) -> Result<JourneyLog, SimError> {
    scenario.validate()?;
    config.validate()?;
    let (start, end) = scenario.span();
    let clock = SampleClock { start_ts: start, rate_hz: config.sample_rate_hz };
    let last_tick = clock.last_tick_at_or_before(end).expect("span is non-empty");
    let mut noise = AmbientNoise::new(seed, scenario.ambient_g);

    let mut sim = Sim {
        scenario,
        clock,
        device: Device::new(config.clone(), start)?,
        captures: Vec::new(),
        flushes: Vec::new(),
        batches: Vec::new(),
        last_tick,
    };

    // Worst case of |quantized gravity + noise| away from any shock.
    let quiet_bound = config.counts_per_g * (1.0 + noise.magnitude_bound()) + 0.5 * 3f64.sqrt();
    let quiet_is_silent = quiet_bound * (1.0 + 1e-12) < config.capture_threshold_counts as f64;

    let windows = if quiet_is_silent {
        shock_windows(scenario, &clock, last_tick)
    } else {
        vec![(0, last_tick)]
    };

    let mut next_flush = sim.next_flush_tick(0);
    for (lo, hi) in windows {
        noise.seek(lo);
        for i in lo..=hi {
            while let Some(f) = next_flush.filter(|&f| f < i) {
                sim.flush_at(f, uplink);
                next_flush = sim.next_flush_tick(f + 1);
            }
            let ts = clock.tick_ts(i);
            let raw = quantize_acceleration(scenario.acceleration(ts, noise.next_sample()), config.counts_per_g);
            let (lat, lon) = scenario.position_at(ts);
            let record = SensorRecord {
                ts,
                battery_pct: sim.device.battery_at(ts, i + 1),
                accel: raw,
                lat,
                lon,
                temp_c: None,
                hum_pct: None,
            };
            if sim.device.capture(record.clone())? {
                sim.captures.push(record);
            }
            if next_flush == Some(i) {
                sim.flush_at(i, uplink);
                next_flush = sim.next_flush_tick(i + 1);
            }
        }
    }
    while let Some(f) = next_flush {
        sim.flush_at(f, uplink);
        next_flush = sim.next_flush_tick(f + 1);
    }

    let samples_taken = last_tick + 1;
    let final_battery_pct = sim.device.battery_at(end, samples_taken);
    let Sim { device, captures, flushes, batches, .. } = sim;
    let device_id = device.config().device_id.clone();
    let buffer = device.into_buffer();
    let dropped_count = buffer.dropped_count();
    Ok(JourneyLog {
        scenario: scenario.name.clone(),
        device_id,
        seed,
        start_ts: start,
        end_ts: end,
        samples_taken,
        captures,
        flushes,
        batches,
        buffered: buffer.into_records(),
        dropped_count,
        final_battery_pct,
    })
}

/// Merged, sorted tick ranges covering every sample a shock can touch.
fn shock_windows(scenario: &Scenario, clock: &SampleClock, last_tick: u64) -> Vec<(u64, u64)> {
    let mut ranges: Vec<(u64, u64)> = scenario
        .shocks
        .iter()
        .filter_map(|s| {
            let (lo_ms, hi_ms) = s.window_ms();
            let lo = clock.first_tick_at_or_after(lo_ms);
            let hi = clock.last_tick_at_or_before(hi_ms)?.min(last_tick);
            (lo <= hi).then_some((lo, hi))
        })
        .collect();
    ranges.sort_unstable();
    let mut merged: Vec<(u64, u64)> = Vec::with_capacity(ranges.len());
    for (lo, hi) in ranges {
        match merged.last_mut() {
            Some(last) if lo <= last.1 + 1 => last.1 = last.1.max(hi),
            _ => merged.push((lo, hi)),
        }
    }
    merged
}

struct Sim<'a> {
    scenario: &'a Scenario,
    clock: SampleClock,
    device: Device,
    captures: Vec<SensorRecord>,
    flushes: Vec<FlushEvent>,
    batches: Vec<UplinkBatch>,
    last_tick: u64,
}

impl Sim<'_> {
    /// First tick at or after `from` where a flush is due and a preferred
    /// network is reachable.
    fn next_flush_tick(&self, from: u64) -> Option<u64> {
        let cfg = self.device.config();
        let due_ts = self.device.last_flush_ts() + cfg.flush_interval_s as i64 * 1000;
        let mut tick = from.max(self.clock.first_tick_at_or_after(due_ts));
        loop {
            if tick > self.last_tick {
                return None;
            }
            let ts = self.clock.tick_ts(tick);
            let available = self.scenario.coverage_at(ts);
            if cfg.network_preference.iter().any(|p| available.contains(p)) {
                return Some(tick);
            }
            let resume = self.scenario.next_coverage_start(ts)?;
            tick = self.clock.first_tick_at_or_after(resume);
        }
    }

    fn flush_at(&mut self, tick: u64, uplink: &mut dyn Uplink) {
        let ts = self.clock.tick_ts(tick);
        let available = self.scenario.coverage_at(ts);
        if let Some((event, batch)) = self.device.try_flush(ts, tick + 1, &available, uplink) {
            self.flushes.push(event);
            self.batches.extend(batch);
        }
    }
}
