//! Scenario metrics and their text and CSV renderings.
//!
//! The CSV form is one header line plus one data row. Column order is
//! [`CSV_HEADER`] and never changes between releases; absent values are
//! written `n/a` and floats use the shortest representation that parses
//! back to the same value.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub seed: u64,
    pub duration_ms: u64,
    pub samples_emitted: u64,
    pub samples_stored: u64,
    /// Dead-lettered on the device and never stored.
    pub samples_dead_lettered: u64,
    /// Still waiting in a device outbox when the run ended.
    pub samples_in_flight: u64,
    pub duplicates: u64,
    pub rejected: u64,
    pub seq_gaps: u64,
    /// Fraction of samples whose first transmission reached the server.
    pub raw_delivery_rate: Option<f64>,
    /// Fraction of emitted samples that ended up stored.
    pub eventual_delivery_rate: Option<f64>,
    pub alerts_raised: u64,
    pub alerts_delivered: u64,
    pub alerts_acknowledged: u64,
    pub alerts_pending: u64,
    pub led_latency_max_ms: Option<u64>,
    pub sms_latency_mean_ms: Option<f64>,
    pub sms_latency_p95_ms: Option<u64>,
    pub sample_latency_mean_ms: Option<f64>,
    pub sample_latency_p95_ms: Option<u64>,
    pub max_outbox_backlog: u64,
    /// Log entries present in the cloud replica; absent when replication is off.
    pub cloud_replicated: Option<u64>,
}

pub const CSV_HEADER: &str = "seed,duration_ms,samples_emitted,samples_stored,samples_dead_lettered,\
samples_in_flight,duplicates,rejected,seq_gaps,raw_delivery_rate,eventual_delivery_rate,\
alerts_raised,alerts_delivered,alerts_acknowledged,alerts_pending,led_latency_max_ms,\
sms_latency_mean_ms,sms_latency_p95_ms,sample_latency_mean_ms,sample_latency_p95_ms,\
max_outbox_backlog,cloud_replicated";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportParseError {
    #[error("CSV header does not match")]
    Header,
    #[error("expected one data row")]
    Rows,
    #[error("column `{column}`: cannot parse `{value}`")]
    Value { column: &'static str, value: String },
    #[error("expected {expected} columns, found {found}")]
    Width { expected: usize, found: usize },
}

enum Cell {
    Int(u64),
    OptInt(Option<u64>),
    OptFloat(Option<f64>),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) | Cell::OptInt(Some(v)) => v.to_string(),
            Cell::OptFloat(Some(v)) => v.to_string(),
            Cell::OptInt(None) | Cell::OptFloat(None) => "n/a".to_owned(),
        }
    }
}

impl MetricsReport {
    fn cells(&self) -> [(&'static str, Cell); 22] {
        use Cell::*;
        [
            ("seed", Int(self.seed)),
            ("duration_ms", Int(self.duration_ms)),
            ("samples_emitted", Int(self.samples_emitted)),
            ("samples_stored", Int(self.samples_stored)),
            ("samples_dead_lettered", Int(self.samples_dead_lettered)),
            ("samples_in_flight", Int(self.samples_in_flight)),
            ("duplicates", Int(self.duplicates)),
            ("rejected", Int(self.rejected)),
            ("seq_gaps", Int(self.seq_gaps)),
            ("raw_delivery_rate", OptFloat(self.raw_delivery_rate)),
            ("eventual_delivery_rate", OptFloat(self.eventual_delivery_rate)),
            ("alerts_raised", Int(self.alerts_raised)),
            ("alerts_delivered", Int(self.alerts_delivered)),
            ("alerts_acknowledged", Int(self.alerts_acknowledged)),
            ("alerts_pending", Int(self.alerts_pending)),
            ("led_latency_max_ms", OptInt(self.led_latency_max_ms)),
            ("sms_latency_mean_ms", OptFloat(self.sms_latency_mean_ms)),
            ("sms_latency_p95_ms", OptInt(self.sms_latency_p95_ms)),
            ("sample_latency_mean_ms", OptFloat(self.sample_latency_mean_ms)),
            ("sample_latency_p95_ms", OptInt(self.sample_latency_p95_ms)),
            ("max_outbox_backlog", Int(self.max_outbox_backlog)),
            ("cloud_replicated", OptInt(self.cloud_replicated)),
        ]
    }

    /// One aligned `name  value` line per field.
    pub fn render_text(&self) -> String {
        let cells = self.cells();
        let width = cells.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (name, cell) in &cells {
            let _ = writeln!(out, "{name:<width$}  {}", cell.render());
        }
        out
    }

    pub fn csv_row(&self) -> String {
        self.cells()
            .iter()
            .map(|(_, c)| c.render())
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Header plus data row, newline terminated.
    pub fn render_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}\n", self.csv_row())
    }

    pub fn parse_csv(text: &str) -> Result<MetricsReport, ReportParseError> {
        let mut lines = text.lines().filter(|l| !l.is_empty());
        if lines.next() != Some(CSV_HEADER) {
            return Err(ReportParseError::Header);
        }
        let row = lines.next().ok_or(ReportParseError::Rows)?;
        if lines.next().is_some() {
            return Err(ReportParseError::Rows);
        }
        let values: Vec<&str> = row.split(',').collect();
        let names: Vec<&'static str> = MetricsReport::default().cells().map(|(n, _)| n).to_vec();
        if values.len() != names.len() {
            return Err(ReportParseError::Width {
                expected: names.len(),
                found: values.len(),
            });
        }
        let mut cols = names.into_iter().zip(values);
        let mut next = || cols.next().expect("width checked");
        let bad = |column: &'static str, value: &str| ReportParseError::Value {
            column,
            value: value.to_owned(),
        };
        let int = |(c, v): (&'static str, &str)| v.parse::<u64>().map_err(|_| bad(c, v));
        let opt_int = |(c, v): (&'static str, &str)| match v {
            "n/a" => Ok(None),
            _ => v.parse::<u64>().map(Some).map_err(|_| bad(c, v)),
        };
        let opt_float = |(c, v): (&'static str, &str)| match v {
            "n/a" => Ok(None),
            _ => v.parse::<f64>().map(Some).map_err(|_| bad(c, v)),
        };
        Ok(MetricsReport {
            seed: int(next())?,
            duration_ms: int(next())?,
            samples_emitted: int(next())?,
            samples_stored: int(next())?,
            samples_dead_lettered: int(next())?,
            samples_in_flight: int(next())?,
            duplicates: int(next())?,
            rejected: int(next())?,
            seq_gaps: int(next())?,
            raw_delivery_rate: opt_float(next())?,
            eventual_delivery_rate: opt_float(next())?,
            alerts_raised: int(next())?,
            alerts_delivered: int(next())?,
            alerts_acknowledged: int(next())?,
            alerts_pending: int(next())?,
            led_latency_max_ms: opt_int(next())?,
            sms_latency_mean_ms: opt_float(next())?,
            sms_latency_p95_ms: opt_int(next())?,
            sample_latency_mean_ms: opt_float(next())?,
            sample_latency_p95_ms: opt_int(next())?,
            max_outbox_backlog: int(next())?,
            cloud_replicated: opt_int(next())?,
        })
    }
}

/// Nearest-rank percentile of an unsorted sample; sorts in place.
pub fn percentile(values: &mut [u64], pct: f64) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    let rank = (pct / 100.0 * values.len() as f64).ceil() as usize;
    Some(values[rank.clamp(1, values.len()) - 1])
}

pub fn mean(values: &[u64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64)
    }
}
