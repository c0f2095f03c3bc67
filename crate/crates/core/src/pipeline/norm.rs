use serde::{Deserialize, Serialize};

use crate::dataset::PatientRecord;
use crate::error::{Error, Result};

/// Column order for the statistics arrays.
pub const COLUMNS: [&str; 5] = ["time_after_dose", "time", "pk", "platelet", "dose"];
pub const TAD: usize = 0;
pub const TIME: usize = 1;
pub const PK: usize = 2;
pub const PLATELET: usize = 3;
pub const DOSE: usize = 4;

/// Per-column mean and sd from the training rows.
///
/// Missing pk and platelet entries are excluded. A missing dose means no drug
/// was given, so the dose column counts it as 0 mg/kg.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub means: [f64; 5],
    pub sds: [f64; 5],
}

fn column(records: &[PatientRecord], col: usize) -> Vec<f64> {
    records
        .iter()
        .filter_map(|r| match col {
            TAD => Some(r.time_after_dose),
            TIME => Some(r.time),
            PK => r.pk,
            PLATELET => r.platelet,
            _ => Some(r.dose.unwrap_or(0.0)),
        })
        .collect()
}

pub fn compute_norm(records: &[PatientRecord]) -> Result<NormStats> {
    let mut means = [0.0; 5];
    let mut sds = [0.0; 5];
    for col in 0..5 {
        let v = column(records, col);
        let first = v.first().copied();
        if first.map_or(true, |f| v.iter().all(|&x| x == f)) {
            return Err(Error::data(format!(
                "column {} needs at least two distinct observed values",
                COLUMNS[col]
            )));
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        means[col] = mean;
        sds[col] = var.sqrt();
    }
    Ok(NormStats { means, sds })
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        if self.sds.iter().any(|s| !(*s > 0.0 && s.is_finite())) || self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Checkpoint("normalization statistics must be finite with sd > 0".into()));
        }
        Ok(())
    }

    pub fn apply(&self, col: usize, v: f64) -> f64 {
        (v - self.means[col]) / self.sds[col]
    }

    pub fn invert(&self, col: usize, z: f64) -> f64 {
        z * self.sds[col] + self.means[col]
    }

    /// Concentration to the scale-only ODE space.
    pub fn scale_pk(&self, cp: f64) -> f64 {
        cp / self.sds[PK]
    }

    pub fn unscale_pk(&self, s: f64) -> f64 {
        s * self.sds[PK]
    }

    /// mg/kg to the scale-only injection amount.
    pub fn scale_dose(&self, amount: f64) -> f64 {
        amount / self.sds[DOSE]
    }
}
