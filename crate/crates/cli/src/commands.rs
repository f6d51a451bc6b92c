//! The `impact` subcommands, callable without going through argv.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use impact_core::analytics::{load_drop_trials, AnalyticsError};
use impact_core::device_sim::Uplink;
use impact_core::ingest::{batch_to_stored, read_stored_jsonl, LOG_FILE_NAME};
use impact_core::reportgen::{fmt_sig6, impacts_csv, leg_csv, render_impact_plot, battery_report, ReportSpec};
use impact_core::transit_world::{load_scenario, run_simulation_with, LegDef};
use impact_core::{aggregate, calibrate_lambda, DeviceConfig, LegStats, Scenario, StoredRecord, UplinkBatch};

use crate::client::Client;

pub const API_KEY_ENV: &str = "IMPACT_API_KEY";
pub const API_KEYS_ENV: &str = "IMPACT_API_KEYS";

/// Failure of a command, split by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or invalid input files; exit status 2.
    #[error("{0}")]
    Usage(String),
    /// Anything else; exit status 1.
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(msg.to_string())
}

fn internal(msg: impl std::fmt::Display) -> CliError {
    CliError::Internal(msg.to_string())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| internal(format!("cannot write {}: {e}", path.display())))
}

/// Accepts RFC 3339 (`2021-03-01T00:00:00Z`) or integer epoch milliseconds.
pub fn parse_time(s: &str) -> Result<i64, String> {
    if let Ok(ms) = s.parse::<i64>() {
        return Ok(ms);
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .map(|t| t.timestamp_millis())
        .map_err(|e| format!("`{s}` is neither epoch milliseconds nor RFC 3339: {e}"))
}

pub fn load_device_config(path: &Path) -> Result<DeviceConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let config: DeviceConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| usage(format!("{}: field `{}`: {}", path.display(), e.path(), e.inner())))?;
    config.validate().map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(config)
}

pub struct SimulateArgs {
    pub scenario: PathBuf,
    pub config: Option<PathBuf>,
    pub ingest_url: Option<String>,
    pub api_key: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub captured: usize,
    pub persisted: usize,
    pub buffered: usize,
    pub dropped: u64,
    pub flushes: usize,
    pub final_battery_pct: f64,
}

impl std::fmt::Display for SimulateSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "captured  {}", self.captured)?;
        writeln!(f, "persisted {}", self.persisted)?;
        writeln!(f, "buffered  {}", self.buffered)?;
        writeln!(f, "dropped   {}", self.dropped)?;
        writeln!(f, "flushes   {}", self.flushes)?;
        write!(f, "battery   {}%", fmt_sig6(self.final_battery_pct))
    }
}

struct HttpUplink<'a> {
    client: &'a Client,
    persisted: usize,
}

impl Uplink for HttpUplink<'_> {
    fn deliver(&mut self, batch: &UplinkBatch) -> bool {
        match self.client.post_batch(batch) {
            Ok(ack) => {
                self.persisted += ack.new_records;
                true
            }
            Err(e) => {
                log::warn!("batch {} not acknowledged: {e}", batch.seq);
                false
            }
        }
    }
}

/// Offline: every batch is acknowledged and written under `out/batches`.
/// Online: batches are POSTed and only a 200 counts as an ack.
pub fn simulate(args: &SimulateArgs) -> Result<SimulateSummary, CliError> {
    let scenario = load_scenario(&args.scenario).map_err(usage)?;
    let config = match &args.config {
        Some(p) => load_device_config(p)?,
        None => scenario.device_config(),
    };
    let (journey, persisted) = match (&args.ingest_url, &args.out) {
        (Some(url), None) => {
            let key = args.api_key.as_deref().ok_or_else(|| usage(format!("{API_KEY_ENV} must be set for --ingest-url")))?;
            let client = Client::new(url, key);
            client.health().map_err(|e| usage(format!("ingest service unreachable: {e}")))?;
            let mut uplink = HttpUplink { client: &client, persisted: 0 };
            let journey = run_simulation_with(&scenario, &config, args.seed, &mut uplink).map_err(usage)?;
            (journey, uplink.persisted)
        }
        (None, Some(out)) => {
            let mut always = |_: &UplinkBatch| true;
            let journey = run_simulation_with(&scenario, &config, args.seed, &mut always).map_err(usage)?;
            write_offline(out, &journey)?;
            let persisted = journey.delivered_records().len();
            (journey, persisted)
        }
        _ => return Err(usage("exactly one of --ingest-url and --out is required")),
    };
    Ok(SimulateSummary {
        captured: journey.captures.len(),
        persisted,
        buffered: journey.buffered.len(),
        dropped: journey.dropped_count,
        flushes: journey.flushes.len(),
        final_battery_pct: journey.final_battery_pct,
    })
}

fn write_offline(out: &Path, journey: &impact_core::JourneyLog) -> Result<(), CliError> {
    let batches = out.join("batches");
    fs::create_dir_all(&batches).map_err(|e| internal(format!("cannot create {}: {e}", batches.display())))?;
    for b in &journey.batches {
        let path = batches.join(format!("batch-{:06}.json", b.seq));
        write_file(&path, serde_json::to_vec_pretty(b).expect("batch serializes"))?;
    }
    write_file(&out.join("journey.jsonl"), journey.to_jsonl())?;
    write_file(&out.join("battery.csv"), battery_report(journey))
}

pub fn calibrate(drops: &Path) -> Result<String, CliError> {
    let trials = load_drop_trials(drops).map_err(usage)?;
    let c = calibrate_lambda(&trials).map_err(usage)?;
    Ok(format!(
        "lambda {}\nresidual_rms {}\ntrials {}",
        fmt_sig6(c.lambda),
        fmt_sig6(c.residual_rms),
        c.fitted_from.len()
    ))
}

/// Keys from a comma separated list, blanks ignored.
pub fn parse_keys(list: &str) -> Vec<String> {
    list.split(',').map(str::trim).filter(|k| !k.is_empty()).map(String::from).collect()
}

pub fn serve(port: u16, data: &Path, keys: &[String]) -> Result<(), CliError> {
    if keys.is_empty() {
        return Err(usage(format!("no API keys configured; set {API_KEYS_ENV}")));
    }
    let service = crate::server::open_service(Some(data), keys).map_err(internal)?;
    let rt = tokio::runtime::Runtime::new().map_err(internal)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port))
            .await
            .map_err(|e| usage(format!("cannot bind port {port}: {e}")))?;
        log::info!("listening on {}", listener.local_addr().map_err(internal)?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        };
        crate::server::serve(listener, service, shutdown).await.map_err(internal)
    })
}

pub enum Source {
    Url(String),
    Dir(PathBuf),
}

impl Source {
    pub fn parse(s: &str) -> Self {
        if s.starts_with("http://") || s.starts_with("https://") {
            Source::Url(s.to_string())
        } else {
            Source::Dir(PathBuf::from(s))
        }
    }
}

pub enum LambdaSource {
    Value(f64),
    Drops(PathBuf),
}

pub struct ReportArgs {
    pub source: Source,
    pub api_key: Option<String>,
    pub device: String,
    pub from: Option<i64>,
    pub to: Option<i64>,
    pub legs: Option<PathBuf>,
    pub lambda: LambdaSource,
    pub threshold_g: f64,
    pub out: PathBuf,
}

/// A scenario file or a bare JSON array of legs.
pub fn load_legs(path: &Path) -> Result<Vec<LegDef>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    if text.trim_start().starts_with('[') {
        let de = &mut serde_json::Deserializer::from_str(&text);
        return serde_path_to_error::deserialize(de)
            .map_err(|e| usage(format!("{}: field `{}`: {}", path.display(), e.path(), e.inner())));
    }
    Scenario::from_json_str(&text).map(|s| s.legs).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Records from `records.jsonl` and/or `batches/*.json` in `dir`, deduplicated
/// on (device, ts) the same way the server does.
pub fn load_dir_records(dir: &Path) -> Result<Vec<StoredRecord>, CliError> {
    let mut all: BTreeMap<(String, i64), StoredRecord> = BTreeMap::new();
    let mut found = false;
    let log = dir.join(LOG_FILE_NAME);
    if log.is_file() {
        found = true;
        for r in read_stored_jsonl(&log).map_err(usage)? {
            all.entry((r.device_id.clone(), r.ts())).or_insert(r);
        }
    }
    let batch_dir = dir.join("batches");
    if batch_dir.is_dir() {
        found = true;
        let mut paths: Vec<PathBuf> = fs::read_dir(&batch_dir)
            .map_err(|e| internal(format!("cannot list {}: {e}", batch_dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            let text = fs::read_to_string(&p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
            let batch: UplinkBatch =
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            batch.validate().map_err(|e| usage(format!("{}: {e}", p.display())))?;
            for r in batch_to_stored(&batch) {
                all.entry((r.device_id.clone(), r.ts())).or_insert(r);
            }
        }
    }
    if !found {
        return Err(usage(format!("{} has neither {LOG_FILE_NAME} nor batches/", dir.display())));
    }
    Ok(all.into_values().collect())
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub records: usize,
    pub stats: Vec<LegStats>,
    pub table: String,
}

pub fn report(args: &ReportArgs) -> Result<ReportOutput, CliError> {
    if !(args.threshold_g.is_finite() && args.threshold_g > 0.0) {
        return Err(usage(AnalyticsError::Threshold(args.threshold_g)));
    }
    let legs = match &args.legs {
        Some(p) => load_legs(p)?,
        None => Vec::new(),
    };
    let lambda = match &args.lambda {
        LambdaSource::Value(l) => *l,
        LambdaSource::Drops(p) => calibrate_lambda(&load_drop_trials(p).map_err(usage)?).map_err(usage)?.lambda,
    };
    let query_from = args.from.or_else(|| legs.iter().map(|l| l.from_ts).min()).unwrap_or(i64::MIN);
    let query_to = args.to.or_else(|| legs.iter().map(|l| l.to_ts).max()).unwrap_or(i64::MAX);
    if query_from > query_to {
        return Err(usage(format!("--from {query_from} is after --to {query_to}")));
    }

    let records = match &args.source {
        Source::Url(url) => {
            let key = args.api_key.as_deref().ok_or_else(|| usage(format!("{API_KEY_ENV} must be set for a URL source")))?;
            let client = Client::new(url, key);
            let devices = client.devices().map_err(|e| remote_error(&e))?;
            if !devices.contains(&args.device) {
                return Err(usage(format!("unknown device `{}`", args.device)));
            }
            client.query_records(&args.device, query_from, query_to).map_err(|e| remote_error(&e))?
        }
        Source::Dir(dir) => {
            let all = load_dir_records(dir)?;
            if !all.iter().any(|r| r.device_id == args.device) {
                return Err(usage(format!("unknown device `{}`", args.device)));
            }
            all.into_iter()
                .filter(|r| r.device_id == args.device && (query_from..=query_to).contains(&r.ts()))
                .collect()
        }
    };

    let (impacts, stats) = aggregate(&records, &legs, lambda, args.threshold_g).map_err(usage)?;
    let from_ts = args.from.or_else(|| legs.iter().map(|l| l.from_ts).min()).or_else(|| records.first().map(|r| r.ts()));
    let to_ts = args.to.or_else(|| legs.iter().map(|l| l.to_ts).max()).or_else(|| records.last().map(|r| r.ts()));
    let (Some(from_ts), Some(to_ts)) = (from_ts, to_ts) else {
        return Err(usage("no records and no --from/--to or legs to size the chart"));
    };
    let spec = ReportSpec {
        title: "Impact magnitudes".to_string(),
        device_id: args.device.clone(),
        from_ts,
        to_ts: to_ts.max(from_ts + 1),
        high_threshold_g: args.threshold_g,
    };
    let svg = render_impact_plot(&impacts, &legs, &spec).map_err(usage)?;

    fs::create_dir_all(&args.out).map_err(|e| internal(format!("cannot create {}: {e}", args.out.display())))?;
    write_file(&args.out.join("impacts.svg"), svg)?;
    write_file(&args.out.join("legs.csv"), leg_csv(&stats))?;
    write_file(&args.out.join("impacts.csv"), impacts_csv(&impacts))?;

    Ok(ReportOutput { records: records.len(), table: stats_table(&stats), stats })
}

fn remote_error(e: &crate::client::ClientError) -> CliError {
    match e.status() {
        Some(500..) => internal(e),
        _ => usage(e),
    }
}

pub fn stats_table(stats: &[LegStats]) -> String {
    let width = stats.iter().map(|s| s.leg_label.len()).max().unwrap_or(0).max(3);
    let mut out = format!("{:<width$}  {:<7}  {:>7}  {:>6}  {:>6}  {:>9}  {:>9}\n", "leg", "kind", "total", "high", "low", "max_g", "mean_g");
    for s in stats {
        let _ = writeln!(
            out,
            "{:<width$}  {:<7}  {:>7}  {:>6}  {:>6}  {:>9}  {:>9}",
            s.leg_label,
            s.kind_str(),
            s.n_total,
            s.n_high,
            s.n_low,
            fmt_sig6(s.max_g),
            fmt_sig6(s.mean_g)
        );
    }
    out
}
