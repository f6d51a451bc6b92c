//! WebAssembly bindings for the in-browser demo.
//!
//! Each exported function returns a JSON string; the plain `*_json`
//! functions hold the logic so they can be tested natively.

use std::fmt::Write as _;

use impact_core::analytics::read_drop_trials;
use impact_core::fixtures::{demo_voyage, four_month_cycle};
use impact_core::reportgen::{fmt_sig6, leg_csv, render_impact_plot, ReportSpec};
use impact_core::transit_world::run_simulation_with;
use impact_core::{aggregate, calibrate_lambda, run_simulation, LegStats, RecordStore, UplinkBatch};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct VoyageResult {
    svg: String,
    legs_csv: String,
    stats: Vec<LegStats>,
    captured: usize,
    persisted: usize,
    buffered: usize,
    dropped: u64,
    final_battery_pct: f64,
}

/// Runs the bundled three-leg voyage and renders its impact chart.
pub fn simulate_voyage_json(
    seed: u32,
    capture_threshold_counts: u32,
    high_threshold_g: f64,
    lambda: f64,
    ambient_g: f64,
) -> Result<String, String> {
    let mut scenario = demo_voyage();
    if !(ambient_g.is_finite() && (0.0..=2.0).contains(&ambient_g)) {
        return Err(format!("ambient vibration must be within 0..2 g, got {ambient_g}"));
    }
    scenario.ambient_g = ambient_g;
    let mut config = scenario.device_config();
    config.capture_threshold_counts = capture_threshold_counts;
    config.validate().map_err(|e| e.to_string())?;

    let mut store = RecordStore::in_memory();
    let mut uplink = |b: &UplinkBatch| store.ingest(b).is_ok();
    let journey = run_simulation_with(&scenario, &config, seed as u64, &mut uplink).map_err(|e| e.to_string())?;
    let records = store.dump();
    let (impacts, stats) = aggregate(&records, &scenario.legs, lambda, high_threshold_g).map_err(|e| e.to_string())?;
    let (from_ts, to_ts) = scenario.span();
    let spec = ReportSpec {
        title: scenario.name.clone(),
        device_id: config.device_id.clone(),
        from_ts,
        to_ts,
        high_threshold_g,
    };
    let svg = render_impact_plot(&impacts, &scenario.legs, &spec).map_err(|e| e.to_string())?;
    let result = VoyageResult {
        svg,
        legs_csv: leg_csv(&stats),
        stats,
        captured: journey.captures.len(),
        persisted: records.len(),
        buffered: journey.buffered.len(),
        dropped: journey.dropped_count,
        final_battery_pct: journey.final_battery_pct,
    };
    Ok(serde_json::to_string(&result).expect("result serializes"))
}

#[derive(Serialize)]
struct Calibration {
    lambda: f64,
    residual_rms: f64,
    trials: usize,
    summary: String,
}

/// Fits lambda from drop-trial CSV text (`known_g,x,y,z`).
pub fn calibrate_json(csv_text: &str) -> Result<String, String> {
    let trials = read_drop_trials(csv_text.as_bytes()).map_err(|e| e.to_string())?;
    let fit = calibrate_lambda(&trials).map_err(|e| e.to_string())?;
    let result = Calibration {
        lambda: fit.lambda,
        residual_rms: fit.residual_rms,
        trials: trials.len(),
        summary: format!("lambda {} g/count, residual {} g", fmt_sig6(fit.lambda), fmt_sig6(fit.residual_rms)),
    };
    Ok(serde_json::to_string(&result).expect("result serializes"))
}

#[derive(Serialize)]
struct BatteryCurve {
    svg: String,
    flushes: usize,
    final_battery_pct: f64,
}

/// Battery level across the bundled 120-day cycle for a given flush interval.
pub fn battery_curve_json(flush_interval_h: f64) -> Result<String, String> {
    if !(1.0..=24.0 * 60.0).contains(&flush_interval_h) {
        return Err(format!("flush interval must be between 1 h and 60 days, got {flush_interval_h}"));
    }
    let scenario = four_month_cycle();
    let mut config = scenario.device_config();
    config.flush_interval_s = (flush_interval_h * 3600.0).round() as u64;
    let journey = run_simulation(&scenario, &config, 1).map_err(|e| e.to_string())?;
    let day = |ts: i64| (ts - journey.start_ts) as f64 / 86_400_000.0;
    let mut points = vec![(0.0, 100.0)];
    points.extend(journey.flushes.iter().map(|f| (day(f.ts), f.battery_pct)));
    points.push((day(journey.end_ts), journey.final_battery_pct));

    let (w, h, left, top, right, bottom) = (600.0, 260.0, 50.0, 15.0, 585.0, 225.0);
    let days = day(journey.end_ts);
    let x = |d: f64| left + d / days * (right - left);
    let y = |p: f64| bottom - p / 100.0 * (bottom - top);
    let mut svg = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#);
    let _ = write!(
        svg,
        r##"<rect x="{left}" y="{:.2}" width="{}" height="{:.2}" fill="#2ca02c" opacity="0.12"/>"##,
        y(40.0),
        right - left,
        y(25.0) - y(40.0)
    );
    for p in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let _ = write!(
            svg,
            r##"<line x1="{left}" y1="{0:.2}" x2="{right}" y2="{0:.2}" stroke="#dddddd"/><text x="{1}" y="{2:.2}" text-anchor="end">{p}%</text>"##,
            y(p),
            left - 4.0,
            y(p) + 4.0
        );
    }
    let path: Vec<String> = points.iter().map(|&(d, p)| format!("{:.2},{:.2}", x(d), y(p))).collect();
    let _ = write!(svg, r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##, path.join(" "));
    let _ = write!(
        svg,
        r#"<text x="{:.2}" y="{}" text-anchor="middle">days (0 to {})</text></svg>"#,
        (left + right) / 2.0,
        h - 10.0,
        fmt_sig6(days)
    );
    let result = BatteryCurve { svg, flushes: journey.flushes.len(), final_battery_pct: journey.final_battery_pct };
    Ok(serde_json::to_string(&result).expect("result serializes"))
}

#[wasm_bindgen]
pub fn simulate_voyage(
    seed: u32,
    capture_threshold_counts: u32,
    high_threshold_g: f64,
    lambda: f64,
    ambient_g: f64,
) -> Result<String, JsError> {
    simulate_voyage_json(seed, capture_threshold_counts, high_threshold_g, lambda, ambient_g).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn calibrate(csv_text: &str) -> Result<String, JsError> {
    calibrate_json(csv_text).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn battery_curve(flush_interval_h: f64) -> Result<String, JsError> {
    battery_curve_json(flush_interval_h).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn voyage_defaults_keep_high_impacts_on_land() {
        let out: Value = serde_json::from_str(&simulate_voyage_json(42, 64, 8.0, 0.03125, 0.05).unwrap()).unwrap();
        assert!(out["svg"].as_str().unwrap().starts_with("<svg"));
        let stats = out["stats"].as_array().unwrap();
        let sea: Vec<&Value> = stats.iter().filter(|s| s["kind"] == "SEA").collect();
        assert_eq!(sea.len(), 1);
        assert_eq!(sea[0]["n_high"], 0);
        assert_eq!(out["captured"], out["persisted"]);
    }

    #[test]
    fn voyage_rejects_bad_inputs() {
        assert!(simulate_voyage_json(1, 64, 8.0, -1.0, 0.05).is_err());
        assert!(simulate_voyage_json(1, 5000, 8.0, 0.03, 0.05).is_err());
        assert!(simulate_voyage_json(1, 64, 8.0, 0.03, f64::NAN).is_err());
    }

    #[test]
    fn calibrate_reads_csv() {
        let out: Value = serde_json::from_str(&calibrate_json("known_g,x,y,z\n5,160,0,0\n").unwrap()).unwrap();
        assert_eq!(out["lambda"], 0.03125);
        assert!(calibrate_json("nope").is_err());
    }

    #[test]
    fn daily_flushes_land_in_the_target_band() {
        let out: Value = serde_json::from_str(&battery_curve_json(24.0).unwrap()).unwrap();
        let pct = out["final_battery_pct"].as_f64().unwrap();
        assert!((25.0..=40.0).contains(&pct), "{pct}");
        let hourly: Value = serde_json::from_str(&battery_curve_json(1.0).unwrap()).unwrap();
        assert!(hourly["final_battery_pct"].as_f64().unwrap() < pct);
        assert!(battery_curve_json(0.0).is_err());
    }
}
