//! Virtual patients, dosing schedules and noisy observation sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{PatientRecord, TruthRow};
use crate::dynamics::{integrate, DoseEvent, MechParams, Trajectory};
use crate::error::{Error, Result};

/// Integration step for synthetic data.
pub const SIM_STEP: f64 = 0.01;
/// Spacing of the dense ground-truth rows.
pub const TRUTH_STEP: f64 = 0.25;

// Stream tags; each (patient, purpose) pair owns one ChaCha stream.
const STREAM_PARAMS: u64 = 0;
const STREAM_COVARIATES: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regimen {
    /// Days between doses.
    pub interval: f64,
    /// mg/kg per dose.
    pub dose: f64,
    pub n_doses: usize,
}

impl Regimen {
    pub fn new(interval: f64, dose: f64, n_doses: usize) -> Result<Self> {
        let r = Regimen { interval, dose, n_doses };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.interval > 0.0 && self.interval.is_finite()) {
            return Err(Error::Config(format!("regimen interval {} must be positive", self.interval)));
        }
        if !(self.dose >= 0.0 && self.dose.is_finite()) {
            return Err(Error::Config(format!("regimen dose {} must be non-negative", self.dose)));
        }
        if self.n_doses == 0 {
            return Err(Error::Config("regimen needs at least one dose".into()));
        }
        Ok(())
    }
}

pub fn schedule_doses(regimen: &Regimen) -> Vec<DoseEvent> {
    (0..regimen.n_doses)
        .map(|i| DoseEvent {
            time: i as f64 * regimen.interval,
            amount: regimen.dose,
        })
        .collect()
}

/// One entry of the cohort's regimen mix. The number of doses is implied by
/// the cohort duration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedRegimen {
    pub interval: f64,
    pub dose: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub typical: MechParams,
    /// Log-scale sd per parameter, ordered as `dynamics::PARAM_NAMES`.
    pub omegas: [f64; 8],
    pub pk_noise_cv: f64,
    pub pd_noise_cv: f64,
    pub pk_sample_times: Vec<f64>,
    pub pd_sample_times: Vec<f64>,
    pub regimen_mix: Vec<WeightedRegimen>,
    pub duration: f64,
    pub weight_mean: f64,
    pub weight_sd: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        let duration = 126.0;
        CohortConfig {
            n_patients: 200,
            typical: MechParams::typical(),
            omegas: [0.25, 0.15, 0.3, 0.3, 0.15, 0.2, 0.3, 0.2],
            pk_noise_cv: 0.1,
            pd_noise_cv: 0.1,
            pk_sample_times: default_pk_times(duration),
            pd_sample_times: default_pd_times(duration),
            regimen_mix: vec![
                WeightedRegimen { interval: 21.0, dose: 3.6, weight: 0.55 },
                WeightedRegimen { interval: 7.0, dose: 2.4, weight: 0.15 },
                WeightedRegimen { interval: 21.0, dose: 2.4, weight: 0.1 },
                WeightedRegimen { interval: 21.0, dose: 4.8, weight: 0.1 },
                WeightedRegimen { interval: 7.0, dose: 1.2, weight: 0.1 },
            ],
            duration,
            weight_mean: 75.0,
            weight_sd: 12.0,
            seed: 0,
        }
    }
}

fn per_cycle(duration: f64, offsets: &[f64], extra: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = extra.to_vec();
    let mut start = 0.0;
    while start <= duration {
        t.extend(offsets.iter().map(|o| start + o).filter(|&x| x <= duration));
        start += 21.0;
    }
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// Dense first cycle, then days 0, 1, 4, 8, 15 of every 21-day cycle.
pub fn default_pk_times(duration: f64) -> Vec<f64> {
    per_cycle(duration, &[0.0, 1.0, 4.0, 8.0, 15.0], &[2.0, 3.0, 7.0, 11.0, 14.0, 18.0])
}

/// Days 0, 4, 8, 11, 15 of every 21-day cycle so the nadir is visible.
pub fn default_pd_times(duration: f64) -> Vec<f64> {
    per_cycle(duration, &[0.0, 4.0, 8.0, 11.0, 15.0], &[])
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Config("n_patients must be positive".into()));
        }
        self.typical.validate()?;
        if self.omegas.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("omegas must be non-negative".into()));
        }
        for cv in [self.pk_noise_cv, self.pd_noise_cv] {
            if !(cv >= 0.0 && cv.is_finite()) {
                return Err(Error::Config(format!("noise cv {cv} must be non-negative")));
            }
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config("duration must be positive".into()));
        }
        for t in self.pk_sample_times.iter().chain(&self.pd_sample_times) {
            if !(*t >= 0.0 && t.fract() == 0.0 && *t <= self.duration) {
                return Err(Error::Config(format!(
                    "sample time {t} must be a whole day within the duration"
                )));
            }
        }
        if self.regimen_mix.is_empty() {
            return Err(Error::Config("regimen_mix is empty".into()));
        }
        for r in &self.regimen_mix {
            if !(r.weight > 0.0 && r.weight.is_finite()) {
                return Err(Error::Config("regimen weights must be positive".into()));
            }
            Regimen::new(r.interval, r.dose, 1)?;
        }
        if !(self.weight_mean > 0.0 && self.weight_sd >= 0.0) {
            return Err(Error::Config("body weight distribution is invalid".into()));
        }
        Ok(())
    }

    /// Mix entry expanded to a regimen covering `[0, duration)`.
    pub fn regimen_for(&self, w: &WeightedRegimen) -> Regimen {
        Regimen {
            interval: w.interval,
            dose: w.dose,
            n_doses: ((self.duration / w.interval).ceil() as usize).max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VirtualPatient {
    pub id: String,
    pub index: usize,
    pub params: MechParams,
    /// kg.
    pub weight: f64,
    pub regimen: Regimen,
}

pub fn patient_id(index: usize, n: usize) -> String {
    let width = n.to_string().len().max(4);
    format!("P{:0width$}", index + 1)
}

fn stream(seed: u64, index: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((index as u64) << 4) | purpose);
    rng
}

pub fn sample_population(config: &CohortConfig) -> Result<Vec<VirtualPatient>> {
    config.validate()?;
    let total_w: f64 = config.regimen_mix.iter().map(|r| r.weight).sum();
    let typical = config.typical.to_array();
    let weight_dist = Normal::new(config.weight_mean, config.weight_sd)
        .map_err(|e| Error::Config(format!("weight distribution: {e}")))?;
    Ok((0..config.n_patients)
        .map(|i| {
            let mut prng = stream(config.seed, i, STREAM_PARAMS);
            let params = MechParams::from_array(std::array::from_fn(|k| {
                let eta: f64 = StandardNormal.sample(&mut prng);
                typical[k] * (config.omegas[k] * eta).exp()
            }));
            let mut crng = stream(config.seed, i, STREAM_COVARIATES);
            let weight = weight_dist.sample(&mut crng).clamp(40.0, 150.0);
            let u: f64 = crng.gen::<f64>() * total_w;
            let mut acc = 0.0;
            let mut chosen = config.regimen_mix[config.regimen_mix.len() - 1];
            for r in &config.regimen_mix {
                acc += r.weight;
                if u < acc {
                    chosen = *r;
                    break;
                }
            }
            VirtualPatient {
                id: patient_id(i, config.n_patients),
                index: i,
                params,
                weight,
                regimen: config.regimen_for(&chosen),
            }
        })
        .collect())
}

/// Builds the event rows for one patient from an integrated trajectory.
fn assemble(
    patient: &VirtualPatient,
    doses: &[DoseEvent],
    config: &CohortConfig,
    traj: &Trajectory,
) -> Result<Vec<PatientRecord>> {
    let mut rng = stream(config.seed, patient.index, STREAM_NOISE);
    let mut noisy = |v: f64, cv: f64| -> f64 {
        if cv == 0.0 {
            return v;
        }
        let eps: f64 = StandardNormal.sample(&mut rng);
        (v * (1.0 + cv * eps)).max(0.0)
    };

    let mut times: Vec<f64> = config
        .pk_sample_times
        .iter()
        .chain(&config.pd_sample_times)
        .copied()
        .chain(doses.iter().map(|d| d.time))
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();

    let mut out = Vec::with_capacity(times.len());
    let mut last_dose: Option<f64> = None;
    for t in times {
        let dose = doses.iter().find(|d| d.time == t).map(|d| d.amount);
        if dose.is_some() {
            last_dose = Some(t);
        }
        let k = traj.index_of(t)?;
        let pk = config
            .pk_sample_times
            .contains(&t)
            .then(|| noisy(traj.cp_before(k), config.pk_noise_cv));
        let platelet = config
            .pd_sample_times
            .contains(&t)
            .then(|| noisy(traj.circ(k), config.pd_noise_cv));
        out.push(PatientRecord {
            patient_id: patient.id.clone(),
            time_after_dose: last_dose.map_or(0.0, |d| t - d),
            time: t,
            pk,
            platelet,
            dose,
        });
    }
    Ok(out)
}

fn patient_doses(patient: &VirtualPatient, config: &CohortConfig) -> Vec<DoseEvent> {
    schedule_doses(&patient.regimen)
        .into_iter()
        .filter(|d| d.time < config.duration)
        .collect()
}

fn truth_from(patient: &VirtualPatient, traj: &Trajectory, duration: f64) -> Vec<TruthRow> {
    let stride = (TRUTH_STEP / traj.step).round() as usize;
    (0..traj.len())
        .step_by(stride)
        .filter(|&k| traj.time(k) <= duration + 1e-9)
        .map(|k| TruthRow {
            patient_id: patient.id.clone(),
            time: traj.time(k),
            cp: traj.cp_before(k),
            circ: traj.circ(k),
        })
        .collect()
}

pub fn synthesize_records(
    patient: &VirtualPatient,
    doses: &[DoseEvent],
    config: &CohortConfig,
) -> Result<Vec<PatientRecord>> {
    let traj = integrate(&patient.params, doses, patient.weight, config.duration, SIM_STEP)?;
    assemble(patient, doses, config, &traj)
}

/// A generated cohort: observation rows plus dense noiseless trajectories.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub patients: Vec<VirtualPatient>,
    pub records: Vec<PatientRecord>,
    pub truth: Vec<TruthRow>,
}

pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort> {
    use rayon::prelude::*;
    let patients = sample_population(config)?;
    let parts: Vec<(Vec<PatientRecord>, Vec<TruthRow>)> = patients
        .par_iter()
        .map(|p| {
            let doses = patient_doses(p, config);
            let traj = integrate(&p.params, &doses, p.weight, config.duration, SIM_STEP)?;
            Ok((assemble(p, &doses, config, &traj)?, truth_from(p, &traj, config.duration)))
        })
        .collect::<Result<_>>()?;
    let (records, truth): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    Ok(Cohort {
        patients,
        records: records.concat(),
        truth: truth.concat(),
    })
}
