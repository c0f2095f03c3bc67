//! The five-column event table and its CSV encoding.
//!
//! Header: `patient_id,time_after_dose,time,pk,platelet,dose`. An empty field
//! is a missing value. Rows are grouped by patient and sorted by time.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::dynamics::DoseEvent;
use crate::error::{Error, Result};

pub const RECORD_HEADER: [&str; 6] = ["patient_id", "time_after_dose", "time", "pk", "platelet", "dose"];
pub const TRUTH_HEADER: [&str; 4] = ["patient_id", "time", "cp", "circ"];

const TAD_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub time_after_dose: f64,
    pub time: f64,
    /// Plasma concentration, µg/mL.
    pub pk: Option<f64>,
    /// Platelet count, 10⁹/L.
    pub platelet: Option<f64>,
    /// Dose, mg/kg.
    pub dose: Option<f64>,
}

impl PatientRecord {
    pub fn has_observation(&self) -> bool {
        self.pk.is_some() || self.platelet.is_some()
    }
}

/// One patient's rows in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct Patient {
    pub id: String,
    pub records: Vec<PatientRecord>,
}

impl Patient {
    pub fn doses(&self) -> Vec<DoseEvent> {
        self.records
            .iter()
            .filter_map(|r| r.dose.map(|amount| DoseEvent { time: r.time, amount }))
            .collect()
    }

    pub fn last_time(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.time)
    }

    /// Observed `(time, value)` pairs for the platelet column.
    pub fn platelets(&self) -> Vec<(f64, f64)> {
        self.records.iter().filter_map(|r| r.platelet.map(|v| (r.time, v))).collect()
    }

    pub fn pk_obs(&self) -> Vec<(f64, f64)> {
        self.records.iter().filter_map(|r| r.pk.map(|v| (r.time, v))).collect()
    }
}

/// Dense mechanistic trajectory sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthRow {
    pub patient_id: String,
    pub time: f64,
    pub cp: f64,
    pub circ: f64,
}

/// Splits a validated record list into per-patient groups, preserving order.
pub fn group_patients(records: &[PatientRecord]) -> Vec<Patient> {
    let mut out: Vec<Patient> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some(p) if p.id == r.patient_id => p.records.push(r.clone()),
            _ => out.push(Patient {
                id: r.patient_id.clone(),
                records: vec![r.clone()],
            }),
        }
    }
    out
}

pub fn flatten_patients(patients: &[Patient]) -> Vec<PatientRecord> {
    patients.iter().flat_map(|p| p.records.iter().cloned()).collect()
}

/// Checks every record invariant; `line_of(i)` maps a row index to the line
/// number reported in errors.
pub fn validate_records(records: &[PatientRecord], line_of: impl Fn(usize) -> u64) -> Result<()> {
    let mut seen = HashSet::new();
    let mut prev: Option<&PatientRecord> = None;
    let mut last_dose: Option<f64> = None;
    for (i, r) in records.iter().enumerate() {
        let line = line_of(i);
        if r.patient_id.is_empty() {
            return Err(Error::data_at(line, "empty patient_id"));
        }
        let new_patient = prev.map_or(true, |p| p.patient_id != r.patient_id);
        if new_patient {
            if !seen.insert(r.patient_id.clone()) {
                return Err(Error::data_at(
                    line,
                    format!("rows for patient `{}` are not contiguous", r.patient_id),
                ));
            }
            last_dose = None;
        } else if let Some(p) = prev {
            if r.time < p.time {
                return Err(Error::data_at(
                    line,
                    format!("time {} precedes {} for patient `{}`", r.time, p.time, r.patient_id),
                ));
            }
        }
        if !(r.time >= 0.0 && r.time.is_finite()) {
            return Err(Error::data_at(line, format!("time {} must be a non-negative number", r.time)));
        }
        if r.pk.is_none() && r.platelet.is_none() && r.dose.is_none() {
            return Err(Error::data_at(line, "row carries none of pk, platelet, dose"));
        }
        for (name, v) in [("pk", r.pk), ("platelet", r.platelet), ("dose", r.dose)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::data_at(line, format!("{name} value {v} must be non-negative")));
                }
            }
        }
        if r.dose.is_some() {
            last_dose = Some(r.time);
        }
        let expected = last_dose.map_or(0.0, |d| r.time - d);
        if (r.time_after_dose - expected).abs() > TAD_TOL {
            return Err(Error::data_at(
                line,
                format!("time_after_dose {} but expected {}", r.time_after_dose, expected),
            ));
        }
        prev = Some(r);
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_records<W: Write>(records: &[PatientRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(RECORD_HEADER)?;
    for r in records {
        wtr.write_record([
            r.patient_id.clone(),
            r.time_after_dose.to_string(),
            r.time.to_string(),
            fmt_opt(r.pk),
            fmt_opt(r.platelet),
            fmt_opt(r.dose),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn parse_f64(field: &str, name: &str, line: u64) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::data_at(line, format!("cannot parse {name} `{field}`")))
}

fn parse_opt(field: &str, name: &str, line: u64) -> Result<Option<f64>> {
    if field.trim().is_empty() {
        Ok(None)
    } else {
        parse_f64(field, name, line).map(Some)
    }
}

fn check_header(rdr: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::data_at(
            1,
            format!("header must be `{}`", expected.join(",")),
        ));
    }
    Ok(())
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<PatientRecord>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    check_header(&mut rdr, &RECORD_HEADER)?;
    let mut out = Vec::new();
    let mut lines = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != RECORD_HEADER.len() {
            return Err(Error::data_at(line, format!("expected 6 fields, found {}", rec.len())));
        }
        out.push(PatientRecord {
            patient_id: rec[0].to_string(),
            time_after_dose: parse_f64(&rec[1], "time_after_dose", line)?,
            time: parse_f64(&rec[2], "time", line)?,
            pk: parse_opt(&rec[3], "pk", line)?,
            platelet: parse_opt(&rec[4], "platelet", line)?,
            dose: parse_opt(&rec[5], "dose", line)?,
        });
        lines.push(line);
    }
    validate_records(&out, |i| lines[i])?;
    Ok(out)
}

pub fn write_dataset(records: &[PatientRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_records(records, std::io::BufWriter::new(file))
}

pub fn read_dataset(path: &Path) -> Result<Vec<PatientRecord>> {
    let file = std::fs::File::open(path)?;
    read_records(std::io::BufReader::new(file))
}

pub fn write_truth(rows: &[TruthRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut wtr = csv::Writer::from_writer(std::io::BufWriter::new(file));
    wtr.write_record(TRUTH_HEADER)?;
    for r in rows {
        wtr.write_record([r.patient_id.clone(), r.time.to_string(), r.cp.to_string(), r.circ.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRow>> {
    let file = std::fs::File::open(path)?;
    let mut rdr = csv::Reader::from_reader(std::io::BufReader::new(file));
    check_header(&mut rdr, &TRUTH_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push(TruthRow {
            patient_id: rec[0].to_string(),
            time: parse_f64(&rec[1], "time", line)?,
            cp: parse_f64(&rec[2], "cp", line)?,
            circ: parse_f64(&rec[3], "circ", line)?,
        });
    }
    Ok(out)
}
