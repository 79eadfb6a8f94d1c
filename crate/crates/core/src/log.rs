//! Event ingestion and the simple-event-log abstraction.
//!
//! A simple event log forgets everything about a case except the ordered
//! sequence of its activity labels, and keeps how many cases share each
//! sequence.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One recorded activity execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub case_id: String,
    pub activity: String,
    pub timestamp: DateTime<Utc>,
}

/// The ordered activity sequence of a single case.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TraceVariant(pub Vec<String>);

impl TraceVariant {
    pub fn new<I, S>(activities: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        TraceVariant(activities.into_iter().map(Into::into).collect())
    }

    /// The empty sequence. Only the metrics module uses it, as the dummy
    /// node absorbing a size imbalance.
    pub fn empty() -> Self {
        TraceVariant(Vec::new())
    }

    pub fn activities(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for TraceVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}>", self.0.join(","))
    }
}

/// Multiset of trace variants. Every stored frequency is at least one.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimpleEventLog {
    variants: BTreeMap<TraceVariant, u64>,
}

impl SimpleEventLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `count` cases following `variant`. A zero count is ignored.
    pub fn add(&mut self, variant: TraceVariant, count: u64) {
        if count > 0 {
            *self.variants.entry(variant).or_insert(0) += count;
        }
    }

    pub fn frequency(&self, variant: &TraceVariant) -> u64 {
        self.variants.get(variant).copied().unwrap_or(0)
    }

    /// Cases in the log (sum of frequencies).
    pub fn n_cases(&self) -> u64 {
        self.variants.values().sum()
    }

    pub fn n_variants(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }

    /// Variants with their frequencies, in lexicographic variant order.
    pub fn iter(&self) -> impl Iterator<Item = (&TraceVariant, u64)> {
        self.variants.iter().map(|(v, &c)| (v, c))
    }

    pub fn contains(&self, variant: &TraceVariant) -> bool {
        self.variants.contains_key(variant)
    }
}

impl FromIterator<(TraceVariant, u64)> for SimpleEventLog {
    fn from_iter<I: IntoIterator<Item = (TraceVariant, u64)>>(iter: I) -> Self {
        let mut log = SimpleEventLog::new();
        for (variant, count) in iter {
            log.add(variant, count);
        }
        log
    }
}

impl FromIterator<TraceVariant> for SimpleEventLog {
    fn from_iter<I: IntoIterator<Item = TraceVariant>>(iter: I) -> Self {
        iter.into_iter().map(|v| (v, 1)).collect()
    }
}

/// Names of the three CSV columns the ingester reads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub case_id: String,
    pub activity: String,
    pub timestamp: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            case_id: "case_id".into(),
            activity: "activity".into(),
            timestamp: "timestamp".into(),
        }
    }
}

fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    let raw = raw.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f%:z", "%Y-%m-%dT%H:%M:%S%.f%z", "%Y-%m-%d %H:%M:%S%.f%z"] {
        if let Ok(dt) = DateTime::parse_from_str(raw, fmt) {
            return Some(dt.with_timezone(&Utc));
        }
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(Utc.from_utc_datetime(&naive));
        }
    }
    NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|naive| Utc.from_utc_datetime(&naive))
}

/// Reads raw events from CSV. Rows keep their file order.
pub fn read_events<R: Read>(source: R, schema: &CsvSchema) -> Result<Vec<EventRecord>> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedRow { line: 1, message: e.to_string() })?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let case_col = column(&schema.case_id)?;
    let activity_col = column(&schema.activity)?;
    let time_col = column(&schema.timestamp)?;

    let mut events = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::MalformedRow {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |idx: usize, what: &str| -> Result<&str> {
            match record.get(idx) {
                Some(v) if !v.trim().is_empty() => Ok(v.trim()),
                _ => Err(Error::MalformedRow { line, message: format!("empty {what}") }),
            }
        };
        let case_id = field(case_col, "case id")?.to_string();
        let activity = field(activity_col, "activity")?.to_string();
        let raw_time = field(time_col, "timestamp")?;
        let timestamp = parse_timestamp(raw_time)
            .ok_or_else(|| Error::Timestamp { line, value: raw_time.to_string() })?;
        events.push(EventRecord { case_id, activity, timestamp });
    }
    Ok(events)
}

/// Groups events by case, orders each case by timestamp (file order breaks
/// ties) and counts the resulting variants.
pub fn events_to_log(events: &[EventRecord]) -> SimpleEventLog {
    let mut cases: HashMap<&str, Vec<(DateTime<Utc>, &str)>> = HashMap::new();
    for event in events {
        cases
            .entry(event.case_id.as_str())
            .or_default()
            .push((event.timestamp, event.activity.as_str()));
    }
    let mut log = SimpleEventLog::new();
    for (_, mut trace) in cases {
        // stable: equal timestamps keep file order
        trace.sort_by_key(|&(ts, _)| ts);
        log.add(TraceVariant::new(trace.into_iter().map(|(_, a)| a)), 1);
    }
    log
}

pub fn ingest_csv<R: Read>(source: R, schema: &CsvSchema) -> Result<SimpleEventLog> {
    Ok(events_to_log(&read_events(source, schema)?))
}

/// Writes one row per event. Case ids and timestamps are synthetic; the
/// timestamps increase strictly within every case.
pub fn write_csv<W: Write>(log: &SimpleEventLog, sink: W, schema: &CsvSchema) -> Result<()> {
    let mut writer = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    };
    writer
        .write_record([&schema.case_id, &schema.activity, &schema.timestamp])
        .map_err(csv_err)?;
    let origin = Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).unwrap();
    let mut case_no = 0u64;
    for (variant, count) in log.iter() {
        for _ in 0..count {
            case_no += 1;
            let case_id = format!("case_{case_no:06}");
            for (k, activity) in variant.activities().iter().enumerate() {
                let ts = origin + Duration::seconds(k as i64);
                writer
                    .write_record([
                        case_id.as_str(),
                        activity.as_str(),
                        ts.format("%Y-%m-%dT%H:%M:%SZ").to_string().as_str(),
                    ])
                    .map_err(csv_err)?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

/// Descriptive statistics of a log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogStats {
    pub n_events: u64,
    pub n_cases: u64,
    pub n_activities: usize,
    pub n_variants: usize,
    /// Exact ratio `n_variants / n_cases`.
    pub trace_uniqueness: f64,
}

pub fn log_stats(log: &SimpleEventLog) -> Result<LogStats> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let mut activities = std::collections::BTreeSet::new();
    let mut n_events = 0u64;
    for (variant, count) in log.iter() {
        n_events += variant.len() as u64 * count;
        activities.extend(variant.activities().iter().map(String::as_str));
    }
    let n_cases = log.n_cases();
    let n_variants = log.n_variants();
    Ok(LogStats {
        n_events,
        n_cases,
        n_activities: activities.len(),
        n_variants,
        trace_uniqueness: n_variants as f64 / n_cases as f64,
    })
}

impl fmt::Display for LogStats {
    /// Aligned two-column table; uniqueness is truncated to a whole
    /// percentage (below 1% to two decimals).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = self.trace_uniqueness * 100.0;
        let uniqueness = if pct >= 1.0 {
            format!("{}%", pct.floor() as u64)
        } else {
            format!("{:.2}%", (pct * 100.0).floor() / 100.0)
        };
        writeln!(f, "{:<18}{:>10}", "#Events", self.n_events)?;
        writeln!(f, "{:<18}{:>10}", "#Cases", self.n_cases)?;
        writeln!(f, "{:<18}{:>10}", "#Activities", self.n_activities)?;
        writeln!(f, "{:<18}{:>10}", "#Variants", self.n_variants)?;
        write!(f, "{:<18}{:>10}", "Trace Uniqueness", uniqueness)
    }
}
