//! Discrete-time model of the impact logger.
//!
//! The device samples proper acceleration, quantizes it to raw counts in
//! `[-512, 512]` per axis, keeps only samples whose raw magnitude crosses the
//! capture threshold, and uploads its buffer on a throttled schedule over the
//! best available cellular network.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::UplinkBatch;

/// Per-axis saturation limit of the raw scale.
pub const RAW_LIMIT: i32 = 512;

/// `ceil(sqrt(3) * 512)`, the largest raw magnitude a saturated triple can reach.
pub const MAX_RAW_MAGNITUDE: u32 = 887;

/// One quantized accelerometer reading in raw counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RawTriple {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl RawTriple {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    /// Builds a triple, clamping every component to the raw scale.
    pub fn saturating(x: i64, y: i64, z: i64) -> Self {
        let clamp = |v: i64| v.clamp(-(RAW_LIMIT as i64), RAW_LIMIT as i64) as i32;
        Self::new(clamp(x), clamp(y), clamp(z))
    }

    pub fn magnitude_sq(&self) -> i64 {
        let (x, y, z) = (self.x as i64, self.y as i64, self.z as i64);
        x * x + y * y + z * z
    }

    pub fn magnitude(&self) -> f64 {
        (self.magnitude_sq() as f64).sqrt()
    }

    pub fn in_range(&self) -> bool {
        [self.x, self.y, self.z]
            .iter()
            .all(|c| (-RAW_LIMIT..=RAW_LIMIT).contains(c))
    }
}

/// One captured sample as uploaded by the device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    /// Epoch milliseconds, UTC.
    pub ts: i64,
    pub battery_pct: f64,
    #[serde(flatten)]
    pub accel: RawTriple,
    pub lat: f64,
    pub lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temp_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hum_pct: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NetworkKind {
    ThreeG,
    TwoG,
    None,
}

impl NetworkKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NetworkKind::ThreeG => "THREE_G",
            NetworkKind::TwoG => "TWO_G",
            NetworkKind::None => "NONE",
        }
    }
}

/// Three-term discharge model: idle draw, per-sample cost and per-connection cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatteryParams {
    pub capacity_mah: f64,
    /// Baseline draw in mA.
    pub idle_ma: f64,
    /// Charge per sample in uA*s.
    pub sample_ua_per_hz: f64,
    pub uplink_mah_per_flush: f64,
}

impl Default for BatteryParams {
    fn default() -> Self {
        Self {
            capacity_mah: 1000.0,
            idle_ma: 0.19,
            sample_ua_per_hz: 0.02,
            uplink_mah_per_flush: 1.2,
        }
    }
}

impl BatteryParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |name: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(ConfigError::Invalid { field: name, reason: format!("must be > 0, got {v}") })
            }
        };
        let non_negative = |name: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(ConfigError::Invalid { field: name, reason: format!("must be >= 0, got {v}") })
            }
        };
        positive("battery.capacity_mah", self.capacity_mah)?;
        positive("battery.idle_ma", self.idle_ma)?;
        non_negative("battery.sample_ua_per_hz", self.sample_ua_per_hz)?;
        non_negative("battery.uplink_mah_per_flush", self.uplink_mah_per_flush)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceConfig {
    pub device_id: String,
    pub capture_threshold_counts: u32,
    pub sample_rate_hz: u32,
    pub buffer_capacity: usize,
    pub flush_interval_s: u64,
    /// Simulation-side truth for the sensor's scale. Analysts never see it.
    pub counts_per_g: f64,
    pub battery: BatteryParams,
    pub network_preference: Vec<NetworkKind>,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            device_id: "tracker-0001".to_string(),
            capture_threshold_counts: 64,
            sample_rate_hz: 100,
            buffer_capacity: 4096,
            flush_interval_s: 86_400,
            counts_per_g: 32.0,
            battery: BatteryParams::default(),
            network_preference: vec![NetworkKind::ThreeG, NetworkKind::TwoG],
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid device config field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field, reason: String| Err(ConfigError::Invalid { field, reason });
        if self.device_id.trim().is_empty() {
            return invalid("device_id", "must not be empty".into());
        }
        if self.capture_threshold_counts > MAX_RAW_MAGNITUDE {
            return invalid(
                "capture_threshold_counts",
                format!("{} exceeds the maximum raw magnitude {MAX_RAW_MAGNITUDE}", self.capture_threshold_counts),
            );
        }
        // Timestamps are integer milliseconds and must stay strictly increasing.
        if !(1..=1000).contains(&self.sample_rate_hz) {
            return invalid("sample_rate_hz", format!("must be in 1..=1000, got {}", self.sample_rate_hz));
        }
        if self.buffer_capacity == 0 {
            return invalid("buffer_capacity", "must be positive".into());
        }
        if self.flush_interval_s == 0 {
            return invalid("flush_interval_s", "must be positive".into());
        }
        if !(self.counts_per_g.is_finite() && self.counts_per_g > 0.0) {
            return invalid("counts_per_g", format!("must be > 0, got {}", self.counts_per_g));
        }
        for (i, kind) in self.network_preference.iter().enumerate() {
            if *kind == NetworkKind::None {
                return invalid("network_preference", "NONE is not a network".into());
            }
            if self.network_preference[..i].contains(kind) {
                return invalid("network_preference", format!("{} listed twice", kind.as_str()));
            }
        }
        self.battery.validate()
    }
}

/// Rounds half away from zero and saturates each axis to the raw scale.
pub fn quantize_acceleration(true_accel_g: [f64; 3], counts_per_g: f64) -> RawTriple {
    debug_assert!(counts_per_g > 0.0);
    let q = |g: f64| {
        let v = (g * counts_per_g).round();
        // NaN maps to 0; infinities saturate.
        v.clamp(-(RAW_LIMIT as f64), RAW_LIMIT as f64) as i64
    };
    RawTriple::saturating(q(true_accel_g[0]), q(true_accel_g[1]), q(true_accel_g[2]))
}

/// Strict magnitude comparison done in exact integer arithmetic.
pub fn detect_trigger(sample: RawTriple, threshold_counts: u32) -> bool {
    let t = threshold_counts as i64;
    sample.magnitude_sq() > t * t
}

/// Battery level after `elapsed_s` seconds, `samples_taken` samples and
/// `flushes` connections, starting from `state` percent. Clamped at zero.
pub fn battery_step(
    state: f64,
    params: &BatteryParams,
    elapsed_s: f64,
    samples_taken: u64,
    flushes: u64,
) -> f64 {
    let consumed_mah = params.idle_ma * (elapsed_s / 3600.0)
        + params.sample_ua_per_hz * 1e-3 * samples_taken as f64 / 3600.0
        + params.uplink_mah_per_flush * flushes as f64;
    (state - consumed_mah / params.capacity_mah * 100.0).max(0.0)
}

/// Inclusive boundary: a flush is due exactly one interval after the last one.
pub fn uplink_due(now_ts: i64, last_flush_ts: i64, flush_interval_s: u64) -> bool {
    now_ts - last_flush_ts >= flush_interval_s as i64 * 1000
}

/// First preferred network present in `available`, or `NetworkKind::None`.
pub fn select_network(available: &[NetworkKind], preference: &[NetworkKind]) -> NetworkKind {
    preference
        .iter()
        .copied()
        .find(|p| available.contains(p))
        .unwrap_or(NetworkKind::None)
}

#[derive(Debug, Error, PartialEq)]
pub enum BufferError {
    #[error("record ts {ts} is not after the last buffered ts {last}")]
    NonMonotonic { ts: i64, last: i64 },
}

/// Identifies an upload. `seq` is the idempotency key together with the device id.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchHeader {
    pub device_id: String,
    pub seq: u64,
    pub flush_ts: i64,
    pub battery_pct: f64,
}

/// Bounded on-device store. Overflow evicts the oldest record and counts it.
#[derive(Debug, Clone, PartialEq)]
pub struct EventBuffer {
    records: VecDeque<SensorRecord>,
    capacity: usize,
    dropped_count: u64,
    pushed: u64,
    flushed: u64,
    dirty: bool,
}

impl EventBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            records: VecDeque::new(),
            capacity,
            dropped_count: 0,
            pushed: 0,
            flushed: 0,
            dirty: false,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dropped_count(&self) -> u64 {
        self.dropped_count
    }

    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn total_flushed(&self) -> u64 {
        self.flushed
    }

    pub fn records(&self) -> impl Iterator<Item = &SensorRecord> {
        self.records.iter()
    }

    /// Appends a record, returning the evicted record on overflow.
    pub fn push(&mut self, record: SensorRecord) -> Result<Option<SensorRecord>, BufferError> {
        if let Some(last) = self.records.back() {
            if record.ts <= last.ts {
                return Err(BufferError::NonMonotonic { ts: record.ts, last: last.ts });
            }
        }
        self.records.push_back(record);
        self.pushed += 1;
        self.dirty = true;
        if self.records.len() > self.capacity {
            self.dropped_count += 1;
            return Ok(self.records.pop_front());
        }
        Ok(None)
    }

    /// Builds the upload for the current contents without clearing anything.
    pub fn snapshot(&self, header: BatchHeader) -> Option<UplinkBatch> {
        if self.records.is_empty() {
            return None;
        }
        Some(UplinkBatch {
            device_id: header.device_id,
            seq: header.seq,
            flush_ts: header.flush_ts,
            battery_pct: header.battery_pct,
            records: self.records.iter().cloned().collect(),
        })
    }

    /// Clears the buffer after the server acknowledged a snapshot of it.
    pub fn confirm(&mut self) {
        self.flushed += self.records.len() as u64;
        self.records.clear();
        self.dirty = false;
    }

    /// Emits a batch of every held record unless no network is available.
    /// The buffer is only cleared when the upload was acknowledged.
    pub fn flush(&mut self, network: NetworkKind, header: BatchHeader, ack: bool) -> Option<UplinkBatch> {
        if network == NetworkKind::None {
            return None;
        }
        let batch = self.snapshot(header)?;
        if ack {
            self.confirm();
        } else {
            self.mark_sent();
        }
        Some(batch)
    }

    /// Records that the current contents went out unacknowledged.
    pub fn mark_sent(&mut self) {
        self.dirty = false;
    }

    /// True when records were pushed or evicted since the last upload attempt.
    pub fn changed_since_last_flush(&self) -> bool {
        self.dirty
    }

    pub fn into_records(self) -> Vec<SensorRecord> {
        self.records.into()
    }
}

/// Transport seen by the device. Returns whether the upload was acknowledged.
pub trait Uplink {
    fn deliver(&mut self, batch: &UplinkBatch) -> bool;
}

/// Always acknowledges; batches are kept only in the journey log.
#[derive(Debug, Default, Clone, Copy)]
pub struct AckingUplink;

impl Uplink for AckingUplink {
    fn deliver(&mut self, _batch: &UplinkBatch) -> bool {
        true
    }
}

impl<F: FnMut(&UplinkBatch) -> bool> Uplink for F {
    fn deliver(&mut self, batch: &UplinkBatch) -> bool {
        self(batch)
    }
}

/// One scheduled connection, whether or not it carried records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlushEvent {
    pub ts: i64,
    pub network: NetworkKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    pub records_sent: usize,
    pub acked: bool,
    pub battery_pct: f64,
}

/// Device state driven by a simulation loop.
#[derive(Debug, Clone)]
pub struct Device {
    config: DeviceConfig,
    buffer: EventBuffer,
    start_ts: i64,
    last_flush_ts: i64,
    flushes: u64,
    next_seq: u64,
    pending_seq: Option<u64>,
}

impl Device {
    pub fn new(config: DeviceConfig, start_ts: i64) -> Result<Self, ConfigError> {
        config.validate()?;
        let buffer = EventBuffer::new(config.buffer_capacity);
        Ok(Self {
            config,
            buffer,
            start_ts,
            last_flush_ts: start_ts,
            flushes: 0,
            next_seq: 0,
            pending_seq: None,
        })
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    pub fn buffer(&self) -> &EventBuffer {
        &self.buffer
    }

    pub fn into_buffer(self) -> EventBuffer {
        self.buffer
    }

    pub fn last_flush_ts(&self) -> i64 {
        self.last_flush_ts
    }

    pub fn flushes(&self) -> u64 {
        self.flushes
    }

    /// Battery level at `ts` given the number of samples taken since start.
    /// Computed in closed form so repeated queries cannot accumulate drift.
    pub fn battery_at(&self, ts: i64, samples_taken: u64) -> f64 {
        battery_step(
            100.0,
            &self.config.battery,
            (ts - self.start_ts) as f64 / 1000.0,
            samples_taken,
            self.flushes,
        )
    }

    /// Buffers `record` if its raw magnitude crosses the capture threshold.
    pub fn capture(&mut self, record: SensorRecord) -> Result<bool, BufferError> {
        if !detect_trigger(record.accel, self.config.capture_threshold_counts) {
            return Ok(false);
        }
        self.buffer.push(record)?;
        Ok(true)
    }

    /// Runs one connection attempt at `ts` if the schedule allows it and a
    /// preferred network is in `available`.
    pub fn try_flush(
        &mut self,
        ts: i64,
        samples_taken: u64,
        available: &[NetworkKind],
        uplink: &mut dyn Uplink,
    ) -> Option<(FlushEvent, Option<UplinkBatch>)> {
        if !uplink_due(ts, self.last_flush_ts, self.config.flush_interval_s) {
            return None;
        }
        let network = select_network(available, &self.config.network_preference);
        if network == NetworkKind::None {
            return None;
        }
        self.flushes += 1;
        self.last_flush_ts = ts;
        let battery_pct = self.battery_at(ts, samples_taken);

        if self.buffer.is_empty() {
            let event = FlushEvent { ts, network, seq: None, records_sent: 0, acked: true, battery_pct };
            return Some((event, None));
        }

        // A retry reuses its seq only while the payload is unchanged.
        let seq = match self.pending_seq {
            Some(seq) if !self.buffer.changed_since_last_flush() => seq,
            _ => {
                let seq = self.next_seq;
                self.next_seq += 1;
                seq
            }
        };
        let header = BatchHeader {
            device_id: self.config.device_id.clone(),
            seq,
            flush_ts: ts,
            battery_pct,
        };
        let batch = self.buffer.snapshot(header).expect("buffer is non-empty");
        let acked = uplink.deliver(&batch);
        if acked {
            self.buffer.confirm();
        } else {
            self.buffer.mark_sent();
        }
        self.pending_seq = if acked { None } else { Some(seq) };
        let event = FlushEvent {
            ts,
            network,
            seq: Some(seq),
            records_sent: batch.records.len(),
            acked,
            battery_pct,
        };
        Some((event, Some(batch)))
    }
}
