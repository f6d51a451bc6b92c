//! SVG impact chart and CSV summaries.
//!
//! Output is byte-stable for identical inputs: elements are emitted in input
//! order, every number goes through a fixed formatter and nothing time- or
//! host-dependent is embedded.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::analytics::{assign_leg, CalibratedImpact, LegStats, UNKNOWN_LEG};
use crate::transit_world::{JourneyLog, LegColor, LegDef, LegKind};

pub const VIEW_WIDTH: f64 = 1200.0;
pub const VIEW_HEIGHT: f64 = 400.0;

const PLOT_LEFT: f64 = 70.0;
const PLOT_RIGHT: f64 = 1180.0;
const PLOT_TOP: f64 = 40.0;
const PLOT_BOTTOM: f64 = 350.0;
const BAR_WIDTH: f64 = 3.0;

pub const LEG_CSV_HEADER: &str = "leg,kind,n_total,n_high,n_low,max_g,mean_g";

impl LegColor {
    pub fn hex(&self) -> &'static str {
        match self {
            LegColor::Red => "#d62728",
            LegColor::Blue => "#1f77b4",
            LegColor::Green => "#2ca02c",
            LegColor::Other => "#7f7f7f",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSpec {
    pub title: String,
    pub device_id: String,
    pub from_ts: i64,
    pub to_ts: i64,
    pub high_threshold_g: f64,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("impacts must be sorted by ts (index {index} goes back in time)")]
    Unsorted { index: usize },
    #[error("report time range is empty: from {from} is not before to {to}")]
    EmptyRange { from: i64, to: i64 },
    #[error("high threshold must be positive, got {0}")]
    Threshold(f64),
    #[error(transparent)]
    Analytics(#[from] crate::analytics::AnalyticsError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed leg CSV: {0}")]
    Csv(String),
}

/// Shortest `%g`-style rendering with 6 significant digits.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..6).contains(&exp) {
        return format!("{}e{exp}", trim_fraction(mantissa));
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_fraction(&format!("{x:.decimals$}")).to_string()
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// One bar per impact, colored by leg, with the high/low threshold and leg
/// boundaries drawn over a linear time axis.
pub fn render_impact_plot(
    impacts: &[CalibratedImpact],
    legs: &[LegDef],
    spec: &ReportSpec,
) -> Result<String, ReportError> {
    if spec.from_ts >= spec.to_ts {
        return Err(ReportError::EmptyRange { from: spec.from_ts, to: spec.to_ts });
    }
    if !(spec.high_threshold_g.is_finite() && spec.high_threshold_g > 0.0) {
        return Err(ReportError::Threshold(spec.high_threshold_g));
    }
    if let Some(index) = (1..impacts.len()).find(|&i| impacts[i].ts < impacts[i - 1].ts) {
        return Err(ReportError::Unsorted { index });
    }

    let max_v = impacts.iter().map(|i| i.v_g).fold(0.0, f64::max);
    let g_top = 1.1 * max_v.max(spec.high_threshold_g);
    let span = (spec.to_ts - spec.from_ts) as f64;
    let x_of = |ts: i64| {
        let f = ((ts - spec.from_ts) as f64 / span).clamp(0.0, 1.0);
        PLOT_LEFT + f * (PLOT_RIGHT - PLOT_LEFT)
    };
    let y_of = |g: f64| PLOT_BOTTOM - (g.min(g_top) / g_top) * (PLOT_BOTTOM - PLOT_TOP);
    let n = |v: f64| format!("{v:.2}");

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {} {}" width="{}" height="{}" font-family="sans-serif" font-size="12">"#,
        VIEW_WIDTH, VIEW_HEIGHT, VIEW_WIDTH, VIEW_HEIGHT
    );
    let _ = writeln!(svg, r##"<rect x="0" y="0" width="{VIEW_WIDTH}" height="{VIEW_HEIGHT}" fill="#ffffff"/>"##);
    let _ = writeln!(
        svg,
        r#"<text class="title" x="{}" y="22" text-anchor="middle" font-size="16">{} ({})</text>"#,
        VIEW_WIDTH / 2.0,
        xml_escape(&spec.title),
        xml_escape(&spec.device_id)
    );

    // axes
    let _ = writeln!(svg, r##"<g class="axes" stroke="#333333" stroke-width="1">"##);
    let _ = writeln!(svg, r#"<line x1="{PLOT_LEFT}" y1="{PLOT_BOTTOM}" x2="{PLOT_RIGHT}" y2="{PLOT_BOTTOM}"/>"#);
    let _ = writeln!(svg, r#"<line x1="{PLOT_LEFT}" y1="{PLOT_TOP}" x2="{PLOT_LEFT}" y2="{PLOT_BOTTOM}"/>"#);
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(svg, r#"<g class="y-ticks" text-anchor="end">"#);
    for k in 0..=4 {
        let g = g_top * k as f64 / 4.0;
        let y = y_of(g);
        let _ = writeln!(
            svg,
            r##"<line x1="{}" y1="{}" x2="{PLOT_LEFT}" y2="{}" stroke="#333333"/><text x="{}" y="{}">{}</text>"##,
            PLOT_LEFT - 5.0,
            n(y),
            n(y),
            PLOT_LEFT - 8.0,
            n(y + 4.0),
            n(g)
        );
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r#"<text class="y-label" x="18" y="{}" transform="rotate(-90 18 {})" text-anchor="middle">impact (g)</text>"#,
        n((PLOT_TOP + PLOT_BOTTOM) / 2.0),
        n((PLOT_TOP + PLOT_BOTTOM) / 2.0)
    );
    let _ = writeln!(svg, r#"<g class="x-ticks" text-anchor="middle">"#);
    let days = span / 86_400_000.0;
    for k in 0..=6 {
        let f = k as f64 / 6.0;
        let x = PLOT_LEFT + f * (PLOT_RIGHT - PLOT_LEFT);
        let _ = writeln!(
            svg,
            r##"<line x1="{}" y1="{PLOT_BOTTOM}" x2="{}" y2="{}" stroke="#333333"/><text x="{}" y="{}">{}</text>"##,
            n(x),
            n(x),
            PLOT_BOTTOM + 5.0,
            n(x),
            PLOT_BOTTOM + 18.0,
            n(days * f)
        );
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r#"<text class="x-label" x="{}" y="{}" text-anchor="middle">days since {}</text>"#,
        (PLOT_LEFT + PLOT_RIGHT) / 2.0,
        PLOT_BOTTOM + 40.0,
        spec.from_ts
    );

    // leg boundaries and labels
    let _ = writeln!(svg, r#"<g class="legs">"#);
    for (i, leg) in legs.iter().enumerate() {
        if leg.to_ts < spec.from_ts || leg.from_ts > spec.to_ts {
            continue;
        }
        let x0 = x_of(leg.from_ts);
        let x1 = x_of(leg.to_ts);
        let _ = writeln!(
            svg,
            r##"<line class="leg-boundary" data-leg="{i}" x1="{}" y1="{PLOT_TOP}" x2="{}" y2="{PLOT_BOTTOM}" stroke="#999999" stroke-width="1"/>"##,
            n(x0),
            n(x0)
        );
        let _ = writeln!(
            svg,
            r#"<text class="leg-label" data-leg="{i}" x="{}" y="{}" text-anchor="middle" fill="{}">{} ({})</text>"#,
            n((x0 + x1) / 2.0),
            PLOT_TOP - 4.0,
            leg.display_color.hex(),
            xml_escape(&leg.label),
            leg.kind.as_str()
        );
        if i + 1 == legs.len() {
            let _ = writeln!(
                svg,
                r##"<line class="leg-boundary" data-leg="end" x1="{}" y1="{PLOT_TOP}" x2="{}" y2="{PLOT_BOTTOM}" stroke="#999999" stroke-width="1"/>"##,
                n(x1),
                n(x1)
            );
        }
    }
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(svg, r#"<g class="impacts">"#);
    for impact in impacts {
        let leg = assign_leg(impact.ts, legs)?;
        let color = leg.map(|i| legs[i].display_color).unwrap_or(LegColor::Other);
        let leg_attr = leg.map(|i| i.to_string()).unwrap_or_else(|| UNKNOWN_LEG.to_string());
        let x = x_of(impact.ts) - BAR_WIDTH / 2.0;
        let y = y_of(impact.v_g);
        let _ = writeln!(
            svg,
            r#"<rect class="impact" data-leg="{leg_attr}" data-class="{}" x="{}" y="{}" width="{BAR_WIDTH}" height="{}" fill="{}"/>"#,
            impact.klass.as_str(),
            n(x),
            n(y),
            n(PLOT_BOTTOM - y),
            color.hex()
        );
    }
    let _ = writeln!(svg, "</g>");

    let ty = y_of(spec.high_threshold_g);
    let _ = writeln!(
        svg,
        r##"<line class="threshold" x1="{PLOT_LEFT}" y1="{}" x2="{PLOT_RIGHT}" y2="{}" stroke="#000000" stroke-width="1.5" stroke-dasharray="8 5"/>"##,
        n(ty),
        n(ty)
    );
    let _ = writeln!(
        svg,
        r#"<text class="threshold-label" x="{}" y="{}" text-anchor="end">high impact &#8805; {} g</text>"#,
        PLOT_RIGHT,
        n(ty - 5.0),
        fmt_sig6(spec.high_threshold_g)
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Leg summary CSV, rows in the given order.
pub fn leg_csv(stats: &[LegStats]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(LEG_CSV_HEADER.split(',')).expect("in-memory write");
    for s in stats {
        w.write_record([
            s.leg_label.as_str(),
            s.kind_str(),
            &s.n_total.to_string(),
            &s.n_high.to_string(),
            &s.n_low.to_string(),
            &fmt_sig6(s.max_g),
            &fmt_sig6(s.mean_g),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush to Vec")).expect("utf-8 input")
}

pub fn export_leg_csv(stats: &[LegStats], path: &Path) -> Result<(), ReportError> {
    fs::write(path, leg_csv(stats)).map_err(|source| ReportError::Io { path: path.display().to_string(), source })
}

#[derive(Deserialize)]
struct LegRow {
    leg: String,
    kind: String,
    n_total: u64,
    n_high: u64,
    n_low: u64,
    max_g: f64,
    mean_g: f64,
}

/// Parses a leg summary CSV back into stats.
pub fn read_leg_csv(text: &str) -> Result<Vec<LegStats>, ReportError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in rdr.deserialize::<LegRow>() {
        let row = row.map_err(|e| ReportError::Csv(e.to_string()))?;
        let kind = match row.kind.as_str() {
            "LAND" => Some(LegKind::Land),
            "SEA" => Some(LegKind::Sea),
            "UNKNOWN" => None,
            other => return Err(ReportError::Csv(format!("unknown leg kind `{other}`"))),
        };
        out.push(LegStats {
            leg_label: row.leg,
            kind,
            n_total: row.n_total,
            n_high: row.n_high,
            n_low: row.n_low,
            max_g: row.max_g,
            mean_g: row.mean_g,
        });
    }
    Ok(out)
}

/// Per-impact CSV: `ts,v_g,class,leg,lat,lon`.
pub fn impacts_csv(impacts: &[CalibratedImpact]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["ts", "v_g", "class", "leg", "lat", "lon"]).expect("in-memory write");
    for i in impacts {
        w.write_record([
            i.ts.to_string().as_str(),
            &fmt_sig6(i.v_g),
            i.klass.as_str(),
            &i.leg_label,
            &format!("{:.6}", i.lat),
            &format!("{:.6}", i.lon),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush to Vec")).expect("utf-8 input")
}

/// Per-flush battery rows followed by `summary,<days elapsed>,<final battery %>`.
/// With no flushes only the summary line is emitted.
pub fn battery_report(journey: &JourneyLog) -> String {
    let mut out = String::new();
    if !journey.flushes.is_empty() {
        out.push_str("flush_ts,battery_pct,records_sent\n");
        for f in &journey.flushes {
            let _ = writeln!(out, "{},{},{}", f.ts, fmt_sig6(f.battery_pct), f.records_sent);
        }
    }
    let days = (journey.end_ts - journey.start_ts) as f64 / 86_400_000.0;
    let _ = writeln!(out, "summary,{},{}", fmt_sig6(days), fmt_sig6(journey.final_battery_pct));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::ImpactClass;

    fn leg(label: &str, kind: LegKind, from_ts: i64, to_ts: i64, color: LegColor) -> LegDef {
        LegDef { label: label.into(), kind, from_ts, to_ts, display_color: color }
    }

    fn impact(ts: i64, v_g: f64) -> CalibratedImpact {
        CalibratedImpact {
            ts,
            v_g,
            klass: if v_g >= 8.0 { ImpactClass::High } else { ImpactClass::Low },
            leg: None,
            leg_label: String::new(),
            lat: 0.0,
            lon: 0.0,
        }
    }

    fn spec() -> ReportSpec {
        ReportSpec { title: "t".into(), device_id: "d".into(), from_ts: 0, to_ts: 300, high_threshold_g: 8.0 }
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(1.0), "1");
        assert_eq!(fmt_sig6(10.0), "10");
        assert_eq!(fmt_sig6(0.03125), "0.03125");
        assert_eq!(fmt_sig6(1.0 / 3.0), "0.333333");
        assert_eq!(fmt_sig6(12.3456789), "12.3457");
        assert_eq!(fmt_sig6(999999.6), "1e6");
        assert_eq!(fmt_sig6(123456.4), "123456");
        assert_eq!(fmt_sig6(-2.5e-7), "-2.5e-7");
        assert_eq!(fmt_sig6(30.30400000001), "30.304");
    }

    #[test]
    fn empty_plot_has_axes_and_threshold() {
        let svg = render_impact_plot(&[], &[], &spec()).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains(r#"class="threshold""#));
        assert!(svg.contains(r#"class="axes""#));
        assert!(!svg.contains(r#"class="impact""#));
    }

    #[test]
    fn bars_follow_leg_colors() {
        let legs = [
            leg("a", LegKind::Land, 0, 100, LegColor::Red),
            leg("b", LegKind::Sea, 100, 200, LegColor::Blue),
            leg("c", LegKind::Land, 200, 300, LegColor::Green),
        ];
        let impacts = [impact(10, 9.0), impact(150, 3.0), impact(300, 12.0), impact(400, 2.0)];
        let svg = render_impact_plot(&impacts, &legs, &spec()).unwrap();
        let bars: Vec<&str> = svg.lines().filter(|l| l.contains(r#"class="impact""#)).collect();
        assert_eq!(bars.len(), 4);
        assert!(bars[0].contains("#d62728"));
        assert!(bars[1].contains("#1f77b4"));
        assert!(bars[2].contains("#2ca02c"));
        assert!(bars[3].contains("#7f7f7f") && bars[3].contains(r#"data-leg="UNKNOWN""#));
    }

    #[test]
    fn unsorted_impacts_are_rejected() {
        let err = render_impact_plot(&[impact(20, 1.0), impact(10, 1.0)], &[], &spec()).unwrap_err();
        assert!(matches!(err, ReportError::Unsorted { index: 1 }));
    }

    #[test]
    fn plot_is_deterministic() {
        let impacts = [impact(10, 9.0), impact(150, 3.0)];
        let a = render_impact_plot(&impacts, &[], &spec()).unwrap();
        let b = render_impact_plot(&impacts, &[], &spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn title_is_escaped() {
        let s = ReportSpec { title: "<a & b>".into(), ..spec() };
        let svg = render_impact_plot(&[], &[], &s).unwrap();
        assert!(svg.contains("&lt;a &amp; b&gt;"));
    }

    #[test]
    fn empty_leg_csv_is_header_only() {
        assert_eq!(leg_csv(&[]), format!("{LEG_CSV_HEADER}\n"));
    }

    #[test]
    fn leg_csv_parses_back() {
        let stats = vec![
            LegStats {
                leg_label: "Factory, road".into(),
                kind: Some(LegKind::Land),
                n_total: 3,
                n_high: 1,
                n_low: 2,
                max_g: 9.876543219,
                mean_g: 4.0 / 3.0,
            },
            LegStats { leg_label: UNKNOWN_LEG.into(), kind: None, n_total: 0, n_high: 0, n_low: 0, max_g: 0.0, mean_g: 0.0 },
        ];
        let back = read_leg_csv(&leg_csv(&stats)).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].leg_label, "Factory, road");
        assert_eq!(back[0].max_g, 9.87654);
        assert!(((back[0].mean_g - stats[0].mean_g) / stats[0].mean_g).abs() < 5e-6);
        assert_eq!(back[1].kind, None);
    }

    #[test]
    fn battery_report_without_flushes() {
        let log = JourneyLog {
            scenario: "s".into(),
            device_id: "d".into(),
            seed: 0,
            start_ts: 0,
            end_ts: 86_400_000 * 2,
            samples_taken: 0,
            captures: vec![],
            flushes: vec![],
            batches: vec![],
            buffered: vec![],
            dropped_count: 0,
            final_battery_pct: 99.5,
        };
        assert_eq!(battery_report(&log), "summary,2,99.5\n");
    }
}
