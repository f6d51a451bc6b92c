//! Low-cost cargo impact tracking.
//!
//! - [`device_sim`]: threshold-triggered accelerometer logger with a bounded
//!   buffer, battery model and throttled store-and-forward uplink.
//! - [`transit_world`]: journey scenarios (legs, coverage, shocks) and the
//!   simulation loop.
//! - [`ingest`]: idempotent batch ingestion over an append-only record log.
//! - [`analytics`]: raw counts to g-force, drop-test calibration, per-leg stats.
//! - [`reportgen`]: SVG impact chart and CSV summaries.

pub mod analytics;
pub mod device_sim;
pub mod ingest;
pub mod reportgen;
pub mod transit_world;

/// Bundled example journeys and inputs.
pub mod fixtures {
    /// Factory to port by road, two weeks at sea, docks to warehouse.
    pub const DEMO_VOYAGE: &str = include_str!("../fixtures/demo_voyage.json");
    /// A 120-day shipment cycle with a single open-water coverage gap.
    pub const FOUR_MONTH_CYCLE: &str = include_str!("../fixtures/four_month_cycle.json");

    pub fn demo_voyage() -> crate::transit_world::Scenario {
        crate::transit_world::Scenario::from_json_str(DEMO_VOYAGE).expect("bundled scenario is valid")
    }

    pub fn four_month_cycle() -> crate::transit_world::Scenario {
        crate::transit_world::Scenario::from_json_str(FOUR_MONTH_CYCLE).expect("bundled scenario is valid")
    }
}

pub use analytics::{aggregate, calibrate_lambda, classify_impact, raw_to_gforce, CalibratedImpact, LegStats};
pub use device_sim::{DeviceConfig, RawTriple, SensorRecord};
pub use ingest::{IngestService, RecordStore, StoredRecord, UplinkBatch};
pub use transit_world::{run_simulation, JourneyLog, Scenario};
