//! CSV readers and writers for the pipeline artifacts.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use crate::event_data::{Covariates, LongitudinalDataset, Measurement, SubjectHistory};
use crate::forest::WeightTable;
use crate::gee::FitResult;
use crate::pseudo_obs::PseudoPanel;
use crate::simulate::careqol::{CovariateUpdate, SubjectRecord};
use crate::simulate::{MetricsTable, ReplicateResult, WindowBiasRow};
use crate::{Error, Result};

pub const EVENTS_HEADER: [&str; 3] = ["subject_id", "time", "kind"];
pub const MEASUREMENTS_HEADER: [&str; 3] = ["subject_id", "time", "value"];
pub const TIME_VARYING_HEADER: [&str; 4] = ["subject_id", "time", "name", "value"];
pub const WINDOWS_HEADER: [&str; 6] = ["subject_id", "t", "x", "delta", "at_risk", "residual_censoring"];
pub const PSEUDO_HEADER: [&str; 4] = ["subject_id", "t", "po", "n_r"];
pub const WEIGHTS_HEADER: [&str; 4] = ["subject_id", "t", "pi_hat", "n_oob_trees"];
pub const FIT_HEADER: [&str; 6] = ["term", "estimate", "se", "ci_lo", "ci_hi", "p_value"];

/// Column of the subjects file that flags a full pre-study record.
pub const FULL_HISTORY_COLUMN: &str = "full_history";

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn require_header(rdr: &mut csv::Reader<File>, path: &Path, required: &[&str]) -> Result<csv::StringRecord> {
    let header = rdr.headers()?.clone();
    for col in required {
        if !header.iter().any(|h| h == *col) {
            return Err(Error::MissingCovariate(format!("{col}` in `{}", path.display())));
        }
    }
    Ok(header)
}

fn row_error(path: &Path, line: Option<u64>, msg: impl std::fmt::Display) -> Error {
    let at = line.map_or(String::new(), |l| format!(" line {l}"));
    Error::InvalidInput(format!("{}{at}: {msg}", path.display()))
}

#[derive(Debug, Deserialize)]
struct EventRecord {
    subject_id: String,
    time: f64,
    kind: String,
}

#[derive(Debug, Deserialize)]
struct MeasurementRecord {
    subject_id: String,
    time: f64,
    value: f64,
}

#[derive(Debug, Deserialize)]
struct TimeVaryingRecord {
    subject_id: String,
    time: f64,
    name: String,
    value: f64,
}

/// Parsed subjects file.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectTable {
    pub rows: Vec<SubjectRecord>,
    /// Baseline covariate columns in file order.
    pub columns: Vec<String>,
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

pub fn read_subjects(path: &Path) -> Result<SubjectTable> {
    let mut rdr = reader(path)?;
    let header = require_header(&mut rdr, path, &["subject_id", "censor_time"])?;
    let columns: Vec<String> = header
        .iter()
        .filter(|h| !["subject_id", "censor_time", FULL_HISTORY_COLUMN].contains(h))
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line());
        let mut baseline = Covariates::new();
        let mut subject_id = String::new();
        let mut censor_time = f64::NAN;
        let mut full_history = true;
        for (name, field) in header.iter().zip(rec.iter()) {
            match name {
                "subject_id" => subject_id = field.to_string(),
                FULL_HISTORY_COLUMN => {
                    full_history = parse_flag(field)
                        .ok_or_else(|| row_error(path, line, format!("`{field}` is not a boolean flag")))?;
                }
                _ => {
                    let v: f64 = field
                        .parse()
                        .map_err(|_| row_error(path, line, format!("column `{name}`: `{field}` is not a number")))?;
                    if name == "censor_time" {
                        censor_time = v;
                    } else {
                        baseline.insert(name.to_string(), v);
                    }
                }
            }
        }
        if subject_id.is_empty() {
            return Err(row_error(path, line, "empty subject_id"));
        }
        rows.push(SubjectRecord { subject_id, censor_time, full_history, baseline });
    }
    Ok(SubjectTable { rows, columns })
}

pub fn write_subjects(path: &Path, rows: &[SubjectRecord]) -> Result<()> {
    let columns: Vec<&String> = rows.first().map(|r| r.baseline.keys().collect()).unwrap_or_default();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["subject_id", "censor_time", FULL_HISTORY_COLUMN];
    header.extend(columns.iter().map(|c| c.as_str()));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.subject_id.clone(), r.censor_time.to_string(), u8::from(r.full_history).to_string()];
        for c in &columns {
            rec.push(r.baseline.get(*c).copied().unwrap_or(f64::NAN).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads events and groups them into alternating pairs per subject.
pub fn read_events(path: &Path) -> Result<BTreeMap<String, Vec<(f64, Option<f64>)>>> {
    let mut rdr = reader(path)?;
    require_header(&mut rdr, path, &EVENTS_HEADER)?;
    let mut by: BTreeMap<String, Vec<(f64, bool)>> = BTreeMap::new();
    for rec in rdr.deserialize::<EventRecord>() {
        let rec = rec?;
        let primary = match rec.kind.as_str() {
            "primary" => true,
            "secondary" => false,
            other => return Err(row_error(path, None, format!("subject {}: unknown kind `{other}`", rec.subject_id))),
        };
        by.entry(rec.subject_id).or_default().push((rec.time, primary));
    }
    let mut out = BTreeMap::new();
    for (id, mut events) in by {
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut pairs: Vec<(f64, Option<f64>)> = Vec::new();
        for (time, primary) in events {
            match (primary, pairs.last_mut()) {
                (true, None) | (true, Some((_, Some(_)))) => pairs.push((time, None)),
                (false, Some(last)) if last.1.is_none() => last.1 = Some(time),
                _ => {
                    return Err(Error::InvalidSubject {
                        subject: id,
                        reason: format!("event kinds do not alternate at time {time}"),
                    })
                }
            }
        }
        out.insert(id, pairs);
    }
    Ok(out)
}

pub fn write_events(path: &Path, subjects: &[SubjectHistory]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(EVENTS_HEADER)?;
    for s in subjects {
        for p in &s.pairs {
            w.write_record([s.id.as_str(), &p.primary.to_string(), "primary"])?;
            if let Some(t) = p.secondary {
                w.write_record([s.id.as_str(), &t.to_string(), "secondary"])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_measurements(path: &Path) -> Result<Vec<Measurement>> {
    let mut rdr = reader(path)?;
    require_header(&mut rdr, path, &MEASUREMENTS_HEADER)?;
    rdr.deserialize::<MeasurementRecord>()
        .map(|r| {
            let r = r?;
            Ok(Measurement { subject_id: r.subject_id, time: r.time, value: r.value })
        })
        .collect()
}

pub fn write_measurements(path: &Path, rows: &[Measurement]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MEASUREMENTS_HEADER)?;
    for m in rows {
        w.write_record([m.subject_id.as_str(), &m.time.to_string(), &m.value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Time-varying values grouped by subject, then by time.
pub fn read_time_varying(path: &Path) -> Result<HashMap<String, Vec<(f64, Covariates)>>> {
    let mut rdr = reader(path)?;
    require_header(&mut rdr, path, &TIME_VARYING_HEADER)?;
    let mut by: HashMap<String, BTreeMap<u64, (f64, Covariates)>> = HashMap::new();
    for rec in rdr.deserialize::<TimeVaryingRecord>() {
        let rec = rec?;
        if !rec.time.is_finite() {
            return Err(row_error(path, None, format!("subject {}: non-finite time", rec.subject_id)));
        }
        // order-preserving key for finite floats
        let key = {
            let bits = rec.time.to_bits();
            if rec.time >= 0.0 { bits ^ (1 << 63) } else { !bits }
        };
        by.entry(rec.subject_id)
            .or_default()
            .entry(key)
            .or_insert_with(|| (rec.time, Covariates::new()))
            .1
            .insert(rec.name, rec.value);
    }
    Ok(by.into_iter().map(|(k, v)| (k, v.into_values().collect())).collect())
}

pub fn write_time_varying(path: &Path, rows: &[CovariateUpdate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TIME_VARYING_HEADER)?;
    for r in rows {
        w.write_record([r.subject_id.as_str(), &r.time.to_string(), &r.name, &r.value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_windows(path: &Path, ds: &LongitudinalDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(WINDOWS_HEADER)?;
    for r in &ds.rows {
        w.write_record([
            r.subject_id.clone(),
            r.t.to_string(),
            r.x.to_string(),
            u8::from(r.delta).to_string(),
            u8::from(r.at_risk).to_string(),
            r.residual_censoring.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_pseudo(path: &Path, panel: &PseudoPanel) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PSEUDO_HEADER)?;
    for v in &panel.values {
        w.write_record([v.subject_id.clone(), v.t.to_string(), v.po.to_string(), v.n_r.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Weight rows aligned with the dataset rows.
pub fn write_weights(path: &Path, ds: &LongitudinalDataset, table: &WeightTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(WEIGHTS_HEADER)?;
    for ((r, p), n) in ds.rows.iter().zip(&table.pi_hat).zip(&table.n_oob_trees) {
        w.write_record([r.subject_id.clone(), r.t.to_string(), p.to_string(), n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_fit(path: &Path, fit: &FitResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(FIT_HEADER)?;
    for k in 0..fit.terms.len() {
        w.write_record([
            fit.terms[k].clone(),
            fit.estimate[k].to_string(),
            fit.se[k].to_string(),
            fit.ci_lo[k].to_string(),
            fit.ci_hi[k].to_string(),
            fit.p_value[k].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct FitRow {
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p_value: f64,
}

pub fn read_fit(path: &Path) -> Result<Vec<FitRow>> {
    let mut rdr = reader(path)?;
    require_header(&mut rdr, path, &FIT_HEADER)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Human-readable fit report with a metadata block.
pub fn render_report(fit: &FitResult, meta: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in meta {
        out.push_str(&format!("{k}: {v}\n"));
    }
    out.push_str(&format!("subjects: {}\n", fit.n_subjects));
    out.push_str(&format!("rows: {}\n", fit.n_rows));
    out.push_str(&format!("working correlation: {}\n", fit.correlation));
    out.push_str(&format!("converged: {} ({} iterations)\n", fit.converged, fit.iterations));
    if fit.projected {
        out.push_str("note: working correlation projected to the nearest correlation matrix\n");
    }
    out.push('\n');
    out.push_str(&render_table(
        &fit.terms
            .iter()
            .enumerate()
            .map(|(k, t)| (t.clone(), [fit.estimate[k], fit.se[k], fit.ci_lo[k], fit.ci_hi[k], fit.p_value[k]]))
            .collect::<Vec<_>>(),
    ));
    out
}

pub fn render_table(rows: &[(String, [f64; 5])]) -> String {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(4).max(4);
    let mut out = format!(
        "{:<width$}  {:>10}  {:>10}  {:>10}  {:>10}  {:>8}\n",
        "term", "estimate", "se", "ci_lo", "ci_hi", "p_value"
    );
    for (term, v) in rows {
        out.push_str(&format!(
            "{term:<width$}  {:>10.5}  {:>10.5}  {:>10.5}  {:>10.5}  {:>8.4}\n",
            v[0], v[1], v[2], v[3], v[4]
        ));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub const METRICS_HEADER: [&str; 11] = [
    "method", "term", "truth", "mean_estimate", "bias", "relative_bias", "coverage", "mean_se", "esd", "se_esd", "n",
];
pub const WINDOW_BIAS_HEADER: [&str; 7] = ["method", "window", "t", "mean_estimate", "truth", "bias", "replicates"];
pub const ESTIMATES_HEADER: [&str; 7] = ["replicate", "method", "term", "estimate", "se", "truth", "covered"];

pub fn write_metrics(path: &Path, table: &MetricsTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in &table.rows {
        w.write_record([
            r.method.name().to_string(),
            r.term.clone(),
            r.truth.to_string(),
            r.mean_estimate.to_string(),
            r.bias.to_string(),
            r.relative_bias.to_string(),
            r.coverage.to_string(),
            r.mean_se.to_string(),
            r.esd.to_string(),
            r.se_esd.to_string(),
            r.n_ok.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub term: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub relative_bias: f64,
    pub coverage: f64,
    pub mean_se: f64,
    pub esd: f64,
    pub se_esd: f64,
    pub n: usize,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut rdr = reader(path)?;
    require_header(&mut rdr, path, &METRICS_HEADER)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn render_metrics(rows: &[MetricsRecord]) -> String {
    let mw = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let tw = rows.iter().map(|r| r.term.len()).max().unwrap_or(4).max(4);
    let mut out = format!(
        "{:<mw$}  {:<tw$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>7}\n",
        "method", "term", "truth", "bias", "rel.bias", "coverage", "se", "esd", "se/esd"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<mw$}  {:<tw$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.3}  {:>8.4}  {:>8.4}  {:>7.3}\n",
            r.method, r.term, r.truth, r.bias, r.relative_bias, r.coverage, r.mean_se, r.esd, r.se_esd
        ));
    }
    out
}

pub fn write_window_bias(path: &Path, rows: &[WindowBiasRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(WINDOW_BIAS_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.name().to_string(),
            r.window.to_string(),
            r.t.to_string(),
            r.mean_estimate.to_string(),
            r.truth.to_string(),
            r.bias.to_string(),
            r.replicates.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_estimates(path: &Path, replicates: &[ReplicateResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ESTIMATES_HEADER)?;
    for r in replicates {
        for e in &r.estimates {
            w.write_record([
                r.replicate.to_string(),
                e.method.name().to_string(),
                e.term.clone(),
                e.estimate.to_string(),
                e.se.to_string(),
                e.truth.to_string(),
                u8::from(e.covered()).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
