//! Typed observations, CSV batches and variability statistics.
//!
//! Nominal values are kept as text; ordinal, interval and ratio values as
//! `f64`. The CSV batch format is UTF-8 with LF line endings and the header
//! `metric,value,offset_ms` (the offset column may be omitted).

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Instant;
use crate::model::{BenchmarkDefinition, ExecutionId, MetricDefinition, ScaleType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObservationValue {
    Number(f64),
    Text(String),
}

impl ObservationValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ObservationValue::Number(v) => Some(*v),
            ObservationValue::Text(_) => None,
        }
    }
}

impl fmt::Display for ObservationValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObservationValue::Number(v) => write!(f, "{v}"),
            ObservationValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub execution_id: ExecutionId,
    pub metric: String,
    pub value: ObservationValue,
    pub offset_ms: Option<u64>,
    pub recorded_at: Instant,
}

/// A value as submitted, before the metric's scale is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SubmittedValue {
    Number(f64),
    Text(String),
}

impl From<f64> for SubmittedValue {
    fn from(v: f64) -> Self {
        SubmittedValue::Number(v)
    }
}

impl From<&str> for SubmittedValue {
    fn from(s: &str) -> Self {
        SubmittedValue::Text(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ResultsError {
    #[error("metric `{0}` is not defined on this benchmark")]
    UnknownMetric(String),
    #[error("value for {scale} metric `{metric}` has the wrong type: {detail}")]
    ScaleMismatch {
        metric: String,
        scale: &'static str,
        detail: String,
    },
    #[error("execution {0} is not accepting results in its current state")]
    ExecutionNotAcceptingResults(ExecutionId),
    #[error("bad CSV header `{0}`: expected `metric,value,offset_ms` or `metric,value`")]
    BadHeader(String),
    #[error("row {row} (line {line}): {reason}")]
    RowError {
        row: usize,
        line: usize,
        reason: String,
    },
    #[error("at least two values are required")]
    InsufficientData,
    #[error("mean is zero; coefficient of variation undefined")]
    ZeroMean,
    #[error("{0} metrics do not support variability statistics")]
    ScaleUnsupported(&'static str),
}

/// Checks a submitted value against the metric's scale and converts it to
/// its stored representation.
pub fn typed_value(metric: &MetricDefinition, value: SubmittedValue) -> Result<ObservationValue, ResultsError> {
    let mismatch = |detail: String| ResultsError::ScaleMismatch {
        metric: metric.name.clone(),
        scale: metric.scale.as_str(),
        detail,
    };
    match (metric.scale.is_numeric(), value) {
        (true, SubmittedValue::Number(v)) if v.is_finite() => Ok(ObservationValue::Number(v)),
        (true, SubmittedValue::Number(v)) => Err(mismatch(format!("non-finite number {v}"))),
        (true, SubmittedValue::Text(t)) => Err(mismatch(format!("expected a number, got text `{t}`"))),
        (false, SubmittedValue::Text(t)) => Ok(ObservationValue::Text(t)),
        (false, SubmittedValue::Number(v)) => Err(mismatch(format!("expected text, got number {v}"))),
    }
}

/// Builds one observation, enforcing metric existence and scale.
pub fn make_observation(
    benchmark: &BenchmarkDefinition,
    execution_id: &ExecutionId,
    metric: &str,
    value: SubmittedValue,
    offset_ms: Option<u64>,
    now: Instant,
) -> Result<Observation, ResultsError> {
    let def = benchmark
        .metric(metric)
        .ok_or_else(|| ResultsError::UnknownMetric(metric.to_owned()))?;
    let value = typed_value(def, value)?;
    Ok(Observation {
        execution_id: execution_id.clone(),
        metric: metric.to_owned(),
        value,
        offset_ms: if def.scale.is_numeric() { offset_ms } else { None },
        recorded_at: now,
    })
}

/// Parses a whole CSV batch. Either every row converts or an error naming
/// the first bad row is returned.
pub fn parse_csv_batch(
    benchmark: &BenchmarkDefinition,
    execution_id: &ExecutionId,
    payload: &str,
    now: Instant,
) -> Result<Vec<Observation>, ResultsError> {
    let header = payload.lines().next().unwrap_or("");
    let with_offset = match header.trim_end_matches('\r') {
        "metric,value,offset_ms" => true,
        "metric,value" => false,
        other => return Err(ResultsError::BadHeader(other.to_owned())),
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(payload.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let fallback_line = row + 1;
        let rec = rec.map_err(|e| ResultsError::RowError {
            row,
            line: e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(fallback_line),
            reason: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(fallback_line);
        let row_err = |reason: String| ResultsError::RowError { row, line, reason };
        let metric = rec.get(0).unwrap_or_default();
        let raw = rec.get(1).unwrap_or_default();
        let offset = match (with_offset, rec.get(2)) {
            (true, Some(s)) if !s.is_empty() => Some(
                s.parse::<u64>()
                    .map_err(|_| row_err(format!("offset_ms `{s}` is not a non-negative integer")))?,
            ),
            _ => None,
        };
        let def = benchmark
            .metric(metric)
            .ok_or_else(|| row_err(format!("unknown metric `{metric}`")))?;
        let submitted = if def.scale.is_numeric() {
            let v: f64 = raw
                .parse()
                .map_err(|_| row_err(format!("value `{raw}` is not a number for {} metric `{metric}`", def.scale.as_str())))?;
            SubmittedValue::Number(v)
        } else {
            SubmittedValue::Text(raw.to_owned())
        };
        let obs = make_observation(benchmark, execution_id, metric, submitted, offset, now)
            .map_err(|e| row_err(e.to_string()))?;
        out.push(obs);
    }
    Ok(out)
}

/// Renders observations in the batch CSV format.
pub fn to_csv<'a, I>(observations: I) -> String
where
    I: IntoIterator<Item = &'a Observation>,
{
    csv_from_rows(
        observations
            .into_iter()
            .map(|o| (o.metric.clone(), o.value.to_string(), o.offset_ms)),
    )
}

/// Renders raw `(metric, value, offset_ms)` rows in the batch CSV format.
pub fn csv_from_rows<I>(rows: I) -> String
where
    I: IntoIterator<Item = (String, String, Option<u64>)>,
{
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["metric", "value", "offset_ms"]).expect("in-memory write");
    for (metric, value, offset) in rows {
        let offset = offset.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([metric.as_str(), value.as_str(), offset.as_str()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

/// Orders observations of one metric: numerically for numeric scales,
/// lexicographically for nominal values; ties broken by offset.
pub fn sort_observations(obs: &mut [Observation]) {
    obs.sort_by(|a, b| {
        let by_value = match (&a.value, &b.value) {
            (ObservationValue::Number(x), ObservationValue::Number(y)) => x.total_cmp(y),
            (ObservationValue::Text(x), ObservationValue::Text(y)) => x.cmp(y),
            (ObservationValue::Number(_), ObservationValue::Text(_)) => Ordering::Less,
            (ObservationValue::Text(_), ObservationValue::Number(_)) => Ordering::Greater,
        };
        by_value.then(a.offset_ms.cmp(&b.offset_ms))
    });
}

// ---------------------------------------------------------------------------
// Statistics

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Sample standard deviation (n - 1 denominator) as a percentage of the mean.
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64, ResultsError> {
    if values.len() < 2 {
        return Err(ResultsError::InsufficientData);
    }
    let m = mean(values).expect("non-empty");
    if m == 0.0 {
        return Err(ResultsError::ZeroMean);
    }
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    let sd = (ss / (values.len() - 1) as f64).sqrt();
    Ok(sd / m.abs() * 100.0)
}

/// Across- and within-execution variability for one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariabilityRow {
    pub group: String,
    pub across_cv_pct: f64,
    pub within_cv_min_pct: f64,
    pub within_cv_max_pct: f64,
    pub executions: usize,
}

fn round_to_five(pct: f64) -> i64 {
    ((pct / 5.0).round() * 5.0) as i64
}

impl VariabilityRow {
    /// `"A% (L-U%)"` with every figure rounded to the nearest 5 points.
    pub fn render(&self) -> String {
        format!(
            "{}% ({}-{}%)",
            round_to_five(self.across_cv_pct),
            round_to_five(self.within_cv_min_pct),
            round_to_five(self.within_cv_max_pct)
        )
    }
}

impl fmt::Display for VariabilityRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Computes a variability row from per-execution sample series.
///
/// Across-execution cv is taken over the per-execution means; the within
/// range is the min and max of the per-execution cv.
pub fn variability(
    group: &str,
    scale: ScaleType,
    per_execution: &[Vec<f64>],
) -> Result<VariabilityRow, ResultsError> {
    match scale {
        ScaleType::Nominal | ScaleType::Ordinal => return Err(ResultsError::ScaleUnsupported(scale.as_str())),
        ScaleType::Interval | ScaleType::Ratio => {}
    }
    if per_execution.len() < 2 || per_execution.iter().any(|s| s.len() < 2) {
        return Err(ResultsError::InsufficientData);
    }
    let means: Vec<f64> = per_execution.iter().map(|s| mean(s).expect("len >= 2")).collect();
    let across = coefficient_of_variation(&means)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for series in per_execution {
        let cv = coefficient_of_variation(series)?;
        lo = lo.min(cv);
        hi = hi.max(cv);
    }
    Ok(VariabilityRow {
        group: group.to_owned(),
        across_cv_pct: across,
        within_cv_min_pct: lo,
        within_cv_max_pct: hi,
        executions: per_execution.len(),
    })
}
