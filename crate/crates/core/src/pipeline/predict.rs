use rayon::prelude::*;

use super::checkpoint::{Checkpoint, Stage};
use super::norm::PLATELET;
use crate::dataset::PatientRecord;
use crate::dynamics::DoseEvent;
use crate::error::Result;
use crate::model::{prepare_input, scale_doses, EncodedPatient, ModelInput};

/// Model output in data units at one grid time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub time: f64,
    /// µg/mL.
    pub cp: f64,
    /// 10⁹/L; `None` for PK-only checkpoints.
    pub platelet: Option<f64>,
}

/// One prediction request: encoder records, dose-port events, horizon.
#[derive(Clone, Debug)]
pub struct Case {
    pub records: Vec<PatientRecord>,
    pub doses: Vec<DoseEvent>,
    pub t_end: f64,
}

impl Checkpoint {
    pub fn prepare(&self, records: &[PatientRecord]) -> Result<ModelInput> {
        prepare_input(records, &self.norm, self.model.config().ic_window)
    }

    pub fn encode(&self, records: &[PatientRecord]) -> Result<EncodedPatient> {
        self.model.encode(&self.prepare(records)?)
    }

    /// Rolls an encoded patient forward under `doses`, unscaled.
    pub fn predict_encoded(&self, enc: &EncodedPatient, doses: &[DoseEvent], t_end: f64) -> Result<Vec<Prediction>> {
        let scaled = scale_doses(doses, &self.norm, self.model.config().dt)?;
        let rows = self.model.rollout(enc, &scaled, t_end)?;
        Ok(rows
            .into_iter()
            .map(|r| Prediction {
                time: r.time,
                cp: self.norm.unscale_pk(r.pk),
                platelet: (self.stage == Stage::Pkpd).then(|| self.norm.invert(PLATELET, r.pd)),
            })
            .collect())
    }

    pub fn predict(&self, records: &[PatientRecord], doses: &[DoseEvent], t_end: f64) -> Result<Vec<Prediction>> {
        let enc = self.encode(records)?;
        self.predict_encoded(&enc, doses, t_end)
    }

    /// Independent cases in parallel; output order follows input order.
    pub fn predict_many(&self, cases: &[Case]) -> Result<Vec<Vec<Prediction>>> {
        cases
            .par_iter()
            .map(|c| self.predict(&c.records, &c.doses, c.t_end))
            .collect()
    }
}
