use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Patient, PatientRecord, TruthRow};
use crate::dynamics::{grid_index, DoseEvent};
use crate::error::{Error, Result};

/// Observation cut-offs used for augmentation; the last keeps everything.
pub const CUTS: [f64; 5] = [21.0, 35.0, 42.0, 63.0, f64::INFINITY];

/// Seeded shuffle, then the first `round(ratio·n)` ids train. Each side keeps
/// the input order.
pub fn split_patients(ids: &[String], ratio: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let n = ids.len();
    if n < 2 {
        return Err(Error::data(format!("need at least 2 patients to split, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = ids.iter().cloned().zip(is_train).partition(|(_, t)| *t);
    Ok((train.into_iter().map(|x| x.0).collect(), test.into_iter().map(|x| x.0).collect()))
}

/// Keeps observations before `cut`; later rows survive only as dose rows.
pub fn truncate_observations(records: &[PatientRecord], cut: f64) -> Vec<PatientRecord> {
    records
        .iter()
        .filter_map(|r| {
            if r.time < cut {
                Some(r.clone())
            } else {
                r.dose.map(|_| PatientRecord { pk: None, platelet: None, ..r.clone() })
            }
        })
        .collect()
}

/// Target values on the model grid, raw units. `None` = not observed.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSeries {
    pub pk: Vec<Option<f64>>,
    pub platelet: Vec<Option<f64>>,
}

impl TargetSeries {
    pub fn len(&self) -> usize {
        self.pk.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pk.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedExample {
    pub patient_id: String,
    pub cut_day: f64,
    pub input: Vec<PatientRecord>,
    pub doses: Vec<DoseEvent>,
    pub targets: TargetSeries,
}

fn step_of(t: f64, dt: f64, what: &str, id: &str) -> Result<usize> {
    grid_index(t, dt).ok_or_else(|| Error::data(format!("{what} time {t} of patient `{id}` is off the {dt}-day grid")))
}

/// Full-series targets for one patient. PK comes from the dense truth rows
/// when given, otherwise from the sparse observations.
pub fn build_targets(patient: &Patient, truth: Option<&[TruthRow]>, dt: f64) -> Result<TargetSeries> {
    let n = step_of(patient.last_time(), dt, "last", &patient.id)? + 1;
    let mut pk = vec![None; n];
    let mut platelet = vec![None; n];
    match truth {
        Some(rows) => {
            for r in rows {
                if let Some(k) = grid_index(r.time, dt) {
                    if k < n {
                        pk[k] = Some(r.cp);
                    }
                }
            }
        }
        None => {
            for (t, v) in patient.pk_obs() {
                pk[step_of(t, dt, "pk", &patient.id)?] = Some(v);
            }
        }
    }
    for (t, v) in patient.platelets() {
        platelet[step_of(t, dt, "platelet", &patient.id)?] = Some(v);
    }
    Ok(TargetSeries { pk, platelet })
}

pub fn index_truth(rows: &[TruthRow]) -> HashMap<&str, Vec<TruthRow>> {
    let mut map: HashMap<&str, Vec<TruthRow>> = HashMap::new();
    for r in rows {
        map.entry(r.patient_id.as_str()).or_default().push(r.clone());
    }
    map
}

/// Five examples per patient, one per entry of [`CUTS`], in patient order.
pub fn augment(patients: &[Patient], truth: Option<&[TruthRow]>, dt: f64) -> Result<Vec<AugmentedExample>> {
    let index = truth.map(index_truth);
    let mut out = Vec::with_capacity(patients.len() * CUTS.len());
    for p in patients {
        if !p.records.iter().any(|r| r.has_observation()) {
            return Err(Error::data(format!("patient `{}` has no observations", p.id)));
        }
        let t = match &index {
            Some(map) => Some(
                map.get(p.id.as_str())
                    .ok_or_else(|| Error::data(format!("no truth rows for patient `{}`", p.id)))?
                    .as_slice(),
            ),
            None => None,
        };
        let targets = build_targets(p, t, dt)?;
        let doses = p.doses();
        for cut in CUTS {
            out.push(AugmentedExample {
                patient_id: p.id.clone(),
                cut_day: cut,
                input: truncate_observations(&p.records, cut),
                doses: doses.clone(),
                targets: targets.clone(),
            });
        }
    }
    Ok(out)
}
