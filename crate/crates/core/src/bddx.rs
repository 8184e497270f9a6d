//! BDD-X-style annotation ingest.
//!
//! One JSON object per line. Lines that fail to decode or violate a record
//! invariant are quarantined into a rejects list with their 1-based line
//! number; they never abort the parse.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("annotation stream unreadable: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to encode record: {0}")]
    Encode(#[from] serde_json::Error),
}

/// Supported corpus encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    #[default]
    Jsonl,
}

/// One control reading. `t` is seconds from segment start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlSample {
    pub t: f64,
    /// m/s
    pub speed: f64,
    /// normalized to [0, 1]
    pub accelerator: f64,
    /// degrees, signed
    pub turn_angle: f64,
}

/// Control signals sampled at 1 Hz from the segment start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct ControlSignalSeries {
    pub samples: Vec<ControlSample>,
}

impl ControlSignalSeries {
    pub fn new(samples: Vec<ControlSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub segment_id: String,
    #[serde(rename = "video")]
    pub video_ref: String,
    #[serde(rename = "start")]
    pub start_time: f64,
    #[serde(rename = "end")]
    pub end_time: f64,
    pub action: String,
    pub justification: String,
    pub signals: ControlSignalSeries,
}

impl AnnotationRecord {
    pub fn duration(&self) -> f64 {
        self.end_time - self.start_time
    }

    /// Number of samples a 1 Hz series must carry for this segment.
    pub fn expected_sample_count(&self) -> usize {
        let d = self.duration();
        if d.is_finite() && d > 0.0 {
            (d.floor() as usize).max(1)
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NegativeStart,
    Duration { start: f64, end: f64 },
    EmptySegmentId,
    EmptyAction,
    EmptyJustification,
    SignalCount { expected: usize, actual: usize },
    TimestampOrder { index: usize },
    NegativeSpeed { index: usize },
    AcceleratorRange { index: usize },
    NonFinite { index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NegativeStart => write!(f, "start: start time is negative"),
            Violation::Duration { start, end } => {
                write!(f, "duration: end {end} is not after start {start}")
            }
            Violation::EmptySegmentId => write!(f, "segment_id: empty"),
            Violation::EmptyAction => write!(f, "action: empty after trimming"),
            Violation::EmptyJustification => write!(f, "justification: empty after trimming"),
            Violation::SignalCount { expected, actual } => {
                write!(f, "signal count: expected {expected} samples, found {actual}")
            }
            Violation::TimestampOrder { index } => {
                write!(f, "signal timestamps: sample {index} does not increase")
            }
            Violation::NegativeSpeed { index } => write!(f, "signal speed: sample {index} is negative"),
            Violation::AcceleratorRange { index } => {
                write!(f, "signal accelerator: sample {index} outside [0, 1]")
            }
            Violation::NonFinite { index } => write!(f, "signal values: sample {index} is not finite"),
        }
    }
}

/// Violated invariants of one record. Empty means valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn summary(&self) -> String {
        self.violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ")
    }
}

pub fn validate_record(r: &AnnotationRecord) -> ValidationReport {
    let mut violations = Vec::new();
    if r.segment_id.trim().is_empty() {
        violations.push(Violation::EmptySegmentId);
    }
    if r.start_time.is_nan() || r.start_time < 0.0 {
        violations.push(Violation::NegativeStart);
    }
    if !r.end_time.is_finite() || r.start_time.is_nan() || r.end_time <= r.start_time {
        violations.push(Violation::Duration {
            start: r.start_time,
            end: r.end_time,
        });
    }
    if r.action.trim().is_empty() {
        violations.push(Violation::EmptyAction);
    }
    if r.justification.trim().is_empty() {
        violations.push(Violation::EmptyJustification);
    }

    let expected = r.expected_sample_count();
    if r.signals.len() != expected {
        violations.push(Violation::SignalCount {
            expected,
            actual: r.signals.len(),
        });
    }

    let mut prev_t = f64::NEG_INFINITY;
    for (index, s) in r.signals.samples.iter().enumerate() {
        if ![s.t, s.speed, s.accelerator, s.turn_angle].iter().all(|v| v.is_finite()) {
            violations.push(Violation::NonFinite { index });
            continue;
        }
        if s.t <= prev_t || s.t < 0.0 {
            violations.push(Violation::TimestampOrder { index });
        }
        prev_t = s.t;
        if s.speed < 0.0 {
            violations.push(Violation::NegativeSpeed { index });
        }
        if !(0.0..=1.0).contains(&s.accelerator) {
            violations.push(Violation::AcceleratorRange { index });
        }
    }

    ValidationReport { violations }
}

/// A quarantined input line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedCorpus {
    pub records: Vec<AnnotationRecord>,
    pub rejects: Vec<Reject>,
}

/// Parses a corpus stream. Blank lines are ignored; every other line ends up
/// either as a record or as a reject.
pub fn parse_corpus<R: BufRead>(raw: R, format: CorpusFormat) -> Result<ParsedCorpus, IngestError> {
    let CorpusFormat::Jsonl = format;

    let mut lines = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }

    let decoded: Vec<(usize, Result<AnnotationRecord, String>)> = lines
        .par_iter()
        .map(|(n, line)| (*n, decode_line(line)))
        .collect();

    let mut out = ParsedCorpus::default();
    let mut seen = HashSet::new();
    for (line, result) in decoded {
        match result {
            Ok(record) => {
                if seen.insert(record.segment_id.clone()) {
                    out.records.push(record);
                } else {
                    out.rejects.push(Reject {
                        line,
                        error: format!("duplicate segment_id {:?}", record.segment_id),
                    });
                }
            }
            Err(error) => out.rejects.push(Reject { line, error }),
        }
    }
    Ok(out)
}

fn decode_line(line: &str) -> Result<AnnotationRecord, String> {
    let record: AnnotationRecord =
        serde_json::from_str(line).map_err(|e| format!("schema: {e}"))?;
    let report = validate_record(&record);
    if report.is_valid() {
        Ok(record)
    } else {
        Err(format!("invalid record {:?}: {}", record.segment_id, report.summary()))
    }
}

pub fn write_corpus<W: Write>(records: &[AnnotationRecord], mut out: W) -> Result<(), IngestError> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_rejects<W: Write>(rejects: &[Reject], mut out: W) -> Result<(), IngestError> {
    for r in rejects {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Histogram bucket edges in seconds; the last bucket is open-ended.
pub const DURATION_EDGES: [f64; 6] = [0.0, 2.0, 4.0, 8.0, 16.0, 32.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationBucket {
    pub lo: f64,
    pub hi: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub segments: usize,
    pub videos: usize,
    pub total_seconds: f64,
    pub duration_histogram: Vec<DurationBucket>,
}

pub fn corpus_stats(records: &[AnnotationRecord]) -> CorpusStats {
    let videos: BTreeSet<&str> = records.iter().map(|r| r.video_ref.as_str()).collect();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in records {
        let d = r.duration();
        let bucket = DURATION_EDGES
            .iter()
            .rposition(|&lo| d >= lo)
            .unwrap_or(0);
        *counts.entry(bucket).or_default() += 1;
    }
    let duration_histogram = DURATION_EDGES
        .iter()
        .enumerate()
        .map(|(i, &lo)| DurationBucket {
            lo,
            hi: DURATION_EDGES.get(i + 1).copied(),
            count: counts.get(&i).copied().unwrap_or(0),
        })
        .collect();

    CorpusStats {
        segments: records.len(),
        videos: videos.len(),
        total_seconds: records.iter().map(AnnotationRecord::duration).sum(),
        duration_histogram,
    }
}
