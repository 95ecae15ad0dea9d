//! Cohort representation and CSV ingestion.
//!
//! Histories live on the gap-time scale internally: per event type, the
//! completed waiting times between consecutive events of that type plus one
//! right-censored residual gap that runs to the end of observation. The
//! terminal event occurs at most once, so its gap time equals calendar time.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("validation error for subject {subject}: {message}")]
    Validation { subject: String, message: String },
    #[error("csv header mismatch: {0}")]
    Header(String),
}

/// Whether the `time` column of event rows carries calendar times or gap times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeScale {
    #[default]
    Calendar,
    Gap,
}

/// Column-mapping options for [`parse_events_csv`].
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    pub time_scale: TimeScale,
    /// Declared number of recurrent types; inferred from the data when `None`.
    pub declared_types: Option<usize>,
}

/// One subject: covariates, observation window, terminal-event data, and the
/// per-type gap sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectHistory {
    pub subject_id: String,
    /// Covariate vector, length equals the cohort-declared dimension.
    pub covariates: Vec<f64>,
    /// End of observation (censoring time), strictly positive.
    pub tau: f64,
    /// Terminal-event time, when one was recorded.
    pub terminal_time: Option<f64>,
    /// Indicator that the terminal event occurred within the window.
    pub terminal_observed: bool,
    /// Completed gap times per recurrent type (type q at index q-1).
    pub gaps: Vec<Vec<f64>>,
    /// Right-censored residual gap per recurrent type.
    pub residual: Vec<f64>,
}

impl SubjectHistory {
    /// End of exposure: `min(tau, terminal time)` when the terminal event was
    /// observed, `tau` otherwise.
    pub fn observation_end(&self) -> f64 {
        match (self.terminal_observed, self.terminal_time) {
            (true, Some(t)) => t.min(self.tau),
            _ => self.tau,
        }
    }

    /// Builds a history from per-type calendar event times.
    ///
    /// `calendar_events[q]` holds the calendar times of type-(q+1) events in
    /// increasing order; gaps are differences between consecutive same-type
    /// events and the residual runs from the last one to the end of
    /// observation.
    pub fn from_calendar(
        subject_id: impl Into<String>,
        covariates: Vec<f64>,
        tau: f64,
        terminal_time: Option<f64>,
        calendar_events: &[Vec<f64>],
    ) -> Result<Self, DataError> {
        let subject_id = subject_id.into();
        let err = |message: String| DataError::Validation {
            subject: subject_id.clone(),
            message,
        };
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(err(format!("tau must be positive and finite, got {tau}")));
        }
        if covariates.iter().any(|x| !x.is_finite()) {
            return Err(err("non-finite covariate".into()));
        }
        let terminal_observed = match terminal_time {
            Some(t) if !(t > 0.0) || !t.is_finite() => {
                return Err(err(format!("terminal time must be positive, got {t}")));
            }
            Some(t) if t > tau => {
                return Err(err(format!(
                    "terminal event at {t} after censoring time {tau}"
                )));
            }
            Some(_) => true,
            None => false,
        };
        let end = match terminal_time {
            Some(t) if terminal_observed => t.min(tau),
            _ => tau,
        };
        let mut gaps = Vec::with_capacity(calendar_events.len());
        let mut residual = Vec::with_capacity(calendar_events.len());
        for (qi, times) in calendar_events.iter().enumerate() {
            let mut sorted = times.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite event time"));
            let mut prev = 0.0;
            let mut g = Vec::with_capacity(sorted.len());
            for &t in &sorted {
                if t > end {
                    return Err(err(format!(
                        "type-{} event at {t} after end of observation {end}",
                        qi + 1
                    )));
                }
                let gap = t - prev;
                if !(gap > 0.0) {
                    return Err(err(format!(
                        "type-{} events at {prev} and {t} give a non-positive gap",
                        qi + 1
                    )));
                }
                g.push(gap);
                prev = t;
            }
            residual.push(end - prev);
            gaps.push(g);
        }
        Ok(SubjectHistory {
            subject_id,
            covariates,
            tau,
            terminal_time,
            terminal_observed,
            gaps,
            residual,
        })
    }

    /// Builds a history directly from per-type gap sequences.
    pub fn from_gaps(
        subject_id: impl Into<String>,
        covariates: Vec<f64>,
        tau: f64,
        terminal_time: Option<f64>,
        gaps: Vec<Vec<f64>>,
    ) -> Result<Self, DataError> {
        let subject_id = subject_id.into();
        let mut calendar = Vec::with_capacity(gaps.len());
        for g in &gaps {
            let mut times = Vec::with_capacity(g.len());
            let mut s = 0.0;
            for &gap in g {
                s += gap;
                times.push(s);
            }
            calendar.push(times);
        }
        // Route through the calendar constructor so every invariant is
        // enforced in one place; the cumulative sums reproduce the gap list
        // exactly when re-differenced against the stored running total.
        let mut built =
            SubjectHistory::from_calendar(subject_id, covariates, tau, terminal_time, &calendar)?;
        let end = built.observation_end();
        for (qi, g) in gaps.into_iter().enumerate() {
            let total: f64 = g.iter().sum();
            built.residual[qi] = end - total;
            built.gaps[qi] = g;
        }
        Ok(built)
    }
}

/// An immutable collection of subject histories with a declared number of
/// recurrent event types and covariate dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub subjects: Vec<SubjectHistory>,
    pub q_count: usize,
    pub p: usize,
}

impl Cohort {
    pub fn new(subjects: Vec<SubjectHistory>, q_count: usize, p: usize) -> Self {
        Cohort {
            subjects,
            q_count,
            p,
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Content hash over every field that affects a fit; used to verify that
    /// two pipelines consumed identical data.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.q_count.to_le_bytes());
        h.update(self.p.to_le_bytes());
        for s in &self.subjects {
            h.update(s.subject_id.as_bytes());
            h.update([0x1f]);
            h.update(s.tau.to_le_bytes());
            h.update([u8::from(s.terminal_observed)]);
            h.update(s.terminal_time.unwrap_or(f64::NAN).to_le_bytes());
            for x in &s.covariates {
                h.update(x.to_le_bytes());
            }
            for (g, r) in s.gaps.iter().zip(&s.residual) {
                for t in g {
                    h.update(t.to_le_bytes());
                }
                h.update(r.to_le_bytes());
            }
        }
        crate::util::sha256_hex(&h.finalize())
    }
}

/// A named invariant violation; violations are data, not failures.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub subject_id: String,
    pub event_type: Option<usize>,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.event_type {
            Some(q) => write!(f, "subject {} type {}: {}", self.subject_id, q, self.rule),
            None => write!(f, "subject {}: {}", self.subject_id, self.rule),
        }
    }
}

/// Checks every stored invariant of every subject; the empty list means the
/// cohort is internally consistent.
pub fn validate_cohort(cohort: &Cohort) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for s in &cohort.subjects {
        if !seen.insert(s.subject_id.clone()) {
            out.push(Violation {
                subject_id: s.subject_id.clone(),
                event_type: None,
                rule: "duplicate subject id".into(),
            });
        }
        let push = |out: &mut Vec<Violation>, q: Option<usize>, rule: String| {
            out.push(Violation {
                subject_id: s.subject_id.clone(),
                event_type: q,
                rule,
            })
        };
        if !(s.tau > 0.0) {
            push(&mut out, None, "tau must be positive".into());
        }
        if s.covariates.len() != cohort.p {
            push(
                &mut out,
                None,
                format!(
                    "covariate length {} differs from cohort p = {}",
                    s.covariates.len(),
                    cohort.p
                ),
            );
        }
        if s.covariates.iter().any(|x| !x.is_finite()) {
            push(&mut out, None, "non-finite covariate".into());
        }
        match (s.terminal_observed, s.terminal_time) {
            (true, Some(t)) if t > s.tau => push(
                &mut out,
                None,
                "terminal marked observed but terminal time exceeds tau".into(),
            ),
            (true, None) => push(
                &mut out,
                None,
                "terminal marked observed without a terminal time".into(),
            ),
            (false, Some(t)) if t <= s.tau => push(
                &mut out,
                None,
                "terminal time within the window but not marked observed".into(),
            ),
            _ => {}
        }
        if s.gaps.len() != cohort.q_count || s.residual.len() != cohort.q_count {
            push(
                &mut out,
                None,
                format!("gap lists for {} types, cohort declares {}", s.gaps.len(), cohort.q_count),
            );
            continue;
        }
        let end = s.observation_end();
        for (qi, (g, &r)) in s.gaps.iter().zip(&s.residual).enumerate() {
            let q = qi + 1;
            if g.iter().any(|&t| !(t > 0.0)) {
                push(&mut out, Some(q), "non-positive gap time".into());
            }
            let total: f64 = g.iter().sum();
            if total > end + 1e-12 * end.max(1.0) {
                push(&mut out, Some(q), "gap-sum exceeds observation window".into());
            }
            if r < -1e-12 * end.max(1.0) {
                push(&mut out, Some(q), "negative residual gap".into());
            }
            if (total + r - end).abs() > 1e-9 * end.max(1.0) {
                push(
                    &mut out,
                    Some(q),
                    "residual plus completed gaps differs from the observation window".into(),
                );
            }
        }
    }
    out
}

const BASE_COLUMNS: [&str; 5] = ["subject_id", "row_kind", "event_type", "time", "tau"];

#[derive(Debug, Default)]
struct RawSubject {
    order: usize,
    tau: Option<f64>,
    covariates: Option<Vec<f64>>,
    terminal: Vec<f64>,
    events: BTreeMap<usize, Vec<f64>>,
    censor_rows: usize,
}

/// Parses the long-format events CSV into a validated [`Cohort`].
///
/// Expected header: `subject_id,row_kind,event_type,time,tau,x1,...,xp` with
/// `row_kind` in `{event, censor}`. Event rows carry `event_type` (0 for the
/// terminal event, 1..Q for recurrent types) and `time`; the single censor
/// row per subject carries `tau` and the covariates.
pub fn parse_events_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Cohort, DataError> {
    let file = std::fs::File::open(path)?;
    parse_events_reader(file, schema)
}

pub fn parse_events_reader(reader: impl Read, schema: &CsvSchema) -> Result<Cohort, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Header(e.to_string()))?
        .clone();
    if headers.len() < BASE_COLUMNS.len() {
        return Err(DataError::Header(format!(
            "expected at least {} columns, found {}",
            BASE_COLUMNS.len(),
            headers.len()
        )));
    }
    for (k, want) in BASE_COLUMNS.iter().enumerate() {
        if headers.get(k).map(str::trim) != Some(*want) {
            return Err(DataError::Header(format!(
                "column {} must be '{}', found '{}'",
                k + 1,
                want,
                headers.get(k).unwrap_or("")
            )));
        }
    }
    let p = headers.len() - BASE_COLUMNS.len();
    for (k, name) in headers.iter().skip(BASE_COLUMNS.len()).enumerate() {
        let want = format!("x{}", k + 1);
        if name.trim() != want {
            return Err(DataError::Header(format!(
                "covariate column {} must be '{}', found '{}'",
                k + 1,
                want,
                name
            )));
        }
    }

    let mut subjects: BTreeMap<String, RawSubject> = BTreeMap::new();
    let mut next_order = 0usize;
    for record in rdr.records() {
        let record = record.map_err(|e| DataError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |message: String| DataError::Parse { line, message };
        let id = record.get(0).unwrap_or("").trim();
        if id.is_empty() {
            return Err(parse_err("empty subject_id".into()));
        }
        let entry = subjects.entry(id.to_string()).or_insert_with(|| {
            let r = RawSubject {
                order: next_order,
                ..RawSubject::default()
            };
            next_order += 1;
            r
        });
        let kind = record.get(1).unwrap_or("").trim();
        let num = |field: usize, name: &str| -> Result<f64, DataError> {
            let raw = record.get(field).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| DataError::Parse {
                line,
                message: format!("field '{name}' is not a number: '{raw}'"),
            })
        };
        match kind {
            "event" => {
                let etype_raw = record.get(2).unwrap_or("").trim();
                let etype: usize = etype_raw.parse().map_err(|_| DataError::Parse {
                    line,
                    message: format!("event_type is not a nonnegative integer: '{etype_raw}'"),
                })?;
                let time = num(3, "time")?;
                if !(time >= 0.0) || !time.is_finite() {
                    return Err(parse_err(format!("negative or non-finite time {time}")));
                }
                if etype == 0 {
                    entry.terminal.push(time);
                } else {
                    entry.events.entry(etype).or_default().push(time);
                }
            }
            "censor" => {
                entry.censor_rows += 1;
                let tau = num(4, "tau")?;
                entry.tau = Some(tau);
                let mut xs = Vec::with_capacity(p);
                for k in 0..p {
                    let raw = record.get(BASE_COLUMNS.len() + k).unwrap_or("").trim();
                    if raw.is_empty() {
                        return Err(parse_err(format!("missing covariate x{}", k + 1)));
                    }
                    xs.push(raw.parse::<f64>().map_err(|_| DataError::Parse {
                        line,
                        message: format!("covariate x{} is not a number: '{raw}'", k + 1),
                    })?);
                }
                entry.covariates = Some(xs);
            }
            other => {
                return Err(parse_err(format!(
                    "row_kind must be 'event' or 'censor', found '{other}'"
                )));
            }
        }
    }

    let mut q_count = schema.declared_types.unwrap_or(0);
    for raw in subjects.values() {
        if let Some((&max_q, _)) = raw.events.iter().next_back() {
            q_count = q_count.max(max_q);
        }
    }

    let mut ordered: Vec<(String, RawSubject)> = subjects.into_iter().collect();
    ordered.sort_by_key(|(_, raw)| raw.order);

    let mut out = Vec::with_capacity(ordered.len());
    for (id, raw) in ordered {
        let verr = |message: String| DataError::Validation {
            subject: id.clone(),
            message,
        };
        if raw.censor_rows == 0 {
            return Err(verr("missing censor row".into()));
        }
        if raw.censor_rows > 1 {
            return Err(verr("more than one censor row".into()));
        }
        let tau = raw.tau.expect("censor row stored tau");
        let covariates = raw.covariates.expect("censor row stored covariates");
        if raw.terminal.len() > 1 {
            return Err(verr("more than one terminal event".into()));
        }
        let terminal_time = raw.terminal.first().copied();
        let mut per_type: Vec<Vec<f64>> = vec![Vec::new(); q_count];
        for (etype, times) in raw.events {
            per_type[etype - 1] = times;
        }
        let subject = match schema.time_scale {
            TimeScale::Calendar => {
                SubjectHistory::from_calendar(id, covariates, tau, terminal_time, &per_type)?
            }
            TimeScale::Gap => {
                SubjectHistory::from_gaps(id, covariates, tau, terminal_time, per_type)?
            }
        };
        out.push(subject);
    }
    let p_seen = out.first().map_or(0, |s| s.covariates.len());
    let cohort = Cohort::new(out, q_count, p_seen);
    if let Some(v) = validate_cohort(&cohort).into_iter().next() {
        return Err(DataError::Validation {
            subject: v.subject_id.clone(),
            message: v.to_string(),
        });
    }
    Ok(cohort)
}

/// Writes a cohort back to the long-format schema. `time_scale` selects what
/// the event rows carry; gap scale round-trips bit-exactly.
pub fn write_events_csv(
    cohort: &Cohort,
    writer: impl Write,
    time_scale: TimeScale,
) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    for k in 1..=cohort.p {
        header.push(format!("x{k}"));
    }
    wtr.write_record(&header)
        .map_err(|e| DataError::Parse { line: 0, message: e.to_string() })?;
    let blank_x = vec![String::new(); cohort.p];
    for s in &cohort.subjects {
        for (qi, g) in s.gaps.iter().enumerate() {
            let mut running = 0.0;
            for &gap in g {
                running += gap;
                let t = match time_scale {
                    TimeScale::Calendar => running,
                    TimeScale::Gap => gap,
                };
                let mut rec = vec![
                    s.subject_id.clone(),
                    "event".into(),
                    format!("{}", qi + 1),
                    format!("{t}"),
                    String::new(),
                ];
                rec.extend(blank_x.iter().cloned());
                wtr.write_record(&rec)
                    .map_err(|e| DataError::Parse { line: 0, message: e.to_string() })?;
            }
        }
        if let (true, Some(t0)) = (s.terminal_observed, s.terminal_time) {
            let mut rec = vec![
                s.subject_id.clone(),
                "event".into(),
                "0".into(),
                format!("{t0}"),
                String::new(),
            ];
            rec.extend(blank_x.iter().cloned());
            wtr.write_record(&rec)
                .map_err(|e| DataError::Parse { line: 0, message: e.to_string() })?;
        }
        let mut rec = vec![
            s.subject_id.clone(),
            "censor".into(),
            String::new(),
            String::new(),
            format!("{}", s.tau),
        ];
        rec.extend(s.covariates.iter().map(|x| format!("{x}")));
        wtr.write_record(&rec)
            .map_err(|e| DataError::Parse { line: 0, message: e.to_string() })?;
    }
    wtr.flush()?;
    Ok(())
}
