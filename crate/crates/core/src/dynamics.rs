//! Mechanistic ground truth: a linear two-compartment PK model driving the
//! Friberg transit-compartment model of myelosuppression, integrated with
//! fixed-step classical RK4.
//!
//! Units: amounts in mg, volumes in L, concentrations in µg/mL (= mg/L),
//! cell counts in 10⁹/L, time in days.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-compartment PK parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PkParams {
    /// Clearance, L/day.
    pub cl: f64,
    /// Central volume, L.
    pub v1: f64,
    /// Inter-compartmental clearance, L/day.
    pub q: f64,
    /// Peripheral volume, L.
    pub v2: f64,
}

/// Friberg myelosuppression parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdParams {
    /// Mean transit time, days.
    pub mtt: f64,
    /// Feedback exponent.
    pub gamma: f64,
    /// Linear drug-effect slope, mL/µg.
    pub slope: f64,
    /// Baseline circulating platelets, 10⁹/L.
    pub circ0: f64,
}

impl PdParams {
    /// Transit rate through the proliferative and three maturation
    /// compartments.
    pub fn ktr(&self) -> f64 {
        4.0 / self.mtt
    }
}

/// Individual mechanistic parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechParams {
    pub pk: PkParams,
    pub pd: PdParams,
}

pub const PARAM_NAMES: [&str; 8] = ["cl", "v1", "q", "v2", "mtt", "gamma", "slope", "circ0"];

impl MechParams {
    /// Typical values that give a nadir around day 8 and recovery by day 21
    /// after a 3.6 mg/kg bolus.
    pub fn typical() -> Self {
        Self {
            pk: PkParams {
                cl: 0.7,
                v1: 3.1,
                q: 0.9,
                v2: 1.4,
            },
            pd: PdParams {
                mtt: 3.0,
                gamma: 0.2,
                slope: 0.003,
                circ0: 210.0,
            },
        }
    }

    /// Parameters in `PARAM_NAMES` order.
    pub fn to_array(&self) -> [f64; 8] {
        [
            self.pk.cl,
            self.pk.v1,
            self.pk.q,
            self.pk.v2,
            self.pd.mtt,
            self.pd.gamma,
            self.pd.slope,
            self.pd.circ0,
        ]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self {
            pk: PkParams {
                cl: a[0],
                v1: a[1],
                q: a[2],
                v2: a[3],
            },
            pd: PdParams {
                mtt: a[4],
                gamma: a[5],
                slope: a[6],
                circ0: a[7],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in PARAM_NAMES.iter().zip(self.to_array()) {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(format!("{name} = {v} must be positive and finite")));
            }
        }
        Ok(())
    }
}

/// Full mechanistic state.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct MechState {
    pub a1: f64,
    pub a2: f64,
    pub prol: f64,
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub circ: f64,
}

impl MechState {
    /// Drug-free steady state: every cell compartment at baseline.
    pub fn baseline(pd: &PdParams) -> Self {
        Self {
            a1: 0.0,
            a2: 0.0,
            prol: pd.circ0,
            t1: pd.circ0,
            t2: pd.circ0,
            t3: pd.circ0,
            circ: pd.circ0,
        }
    }

    fn to_array(self) -> [f64; 7] {
        [self.a1, self.a2, self.prol, self.t1, self.t2, self.t3, self.circ]
    }

    fn from_array(a: [f64; 7]) -> Self {
        Self {
            a1: a[0],
            a2: a[1],
            prol: a[2],
            t1: a[3],
            t2: a[4],
            t3: a[5],
            circ: a[6],
        }
    }
}

/// An instantaneous bolus; `amount` is in mg/kg.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoseEvent {
    pub time: f64,
    pub amount: f64,
}

/// `(da1/dt, da2/dt)` of the linear two-compartment model.
pub fn pk_rhs(state: &MechState, p: &PkParams) -> [f64; 2] {
    let k10 = p.cl / p.v1;
    let k12 = p.q / p.v1;
    let k21 = p.q / p.v2;
    [
        -k10 * state.a1 - k12 * state.a1 + k21 * state.a2,
        k12 * state.a1 - k21 * state.a2,
    ]
}

/// `(dProl, dT1, dT2, dT3, dCirc)/dt` for plasma concentration `cp`.
pub fn friberg_rhs(state: &MechState, p: &PdParams, cp: f64) -> Result<[f64; 5]> {
    if state.circ <= 0.0 {
        return Err(Error::DegenerateState(format!(
            "circulating count {} leaves the feedback term undefined",
            state.circ
        )));
    }
    let ktr = p.ktr();
    let e_drug = (p.slope * cp).min(1.0);
    let feedback = (p.circ0 / state.circ).powf(p.gamma);
    Ok([
        ktr * state.prol * (1.0 - e_drug) * feedback - ktr * state.prol,
        ktr * (state.prol - state.t1),
        ktr * (state.t1 - state.t2),
        ktr * (state.t2 - state.t3),
        ktr * state.t3 - ktr * state.circ,
    ])
}

fn full_rhs(s: &[f64; 7], params: &MechParams) -> Result<[f64; 7]> {
    let state = MechState::from_array(*s);
    let pk = pk_rhs(&state, &params.pk);
    let cp = state.a1 / params.pk.v1;
    let pd = friberg_rhs(&state, &params.pd, cp)?;
    Ok([pk[0], pk[1], pd[0], pd[1], pd[2], pd[3], pd[4]])
}

/// States on a uniform grid `t_k = k·step`.
///
/// The state recorded at a dose instant already contains the dose, so
/// `cp` is right-continuous. Observations at a dose instant are taken just
/// before the dose; `cp_before` gives that left limit.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub step: f64,
    pub states: Vec<MechState>,
    a1_before: Vec<f64>,
    v1: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.step
    }

    pub fn cp(&self, k: usize) -> f64 {
        self.states[k].a1 / self.v1
    }

    pub fn circ(&self, k: usize) -> f64 {
        self.states[k].circ
    }

    /// Concentration just before any dose given at grid point `k`.
    pub fn cp_before(&self, k: usize) -> f64 {
        self.a1_before[k] / self.v1
    }

    /// Grid index of `t`, which must be a grid point within the trajectory.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let k = grid_index(t, self.step).ok_or(Error::DoseAlignment { time: t, step: self.step })?;
        if k >= self.states.len() {
            return Err(Error::InvalidParams(format!(
                "time {t} beyond trajectory end {}",
                self.time(self.states.len() - 1)
            )));
        }
        Ok(k)
    }

    /// `(time, cp, circ)` rows as observed: pre-dose at dose instants.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        (0..self.states.len()).map(|k| (self.time(k), self.cp_before(k), self.circ(k)))
    }
}

/// Index `k` with `k·step == t` up to rounding, if there is one.
pub fn grid_index(t: f64, step: f64) -> Option<usize> {
    if t < 0.0 {
        return None;
    }
    let k = (t / step).round();
    if (k * step - t).abs() <= 1e-9 * t.abs().max(1.0) {
        Some(k as usize)
    } else {
        None
    }
}

/// Classical RK4 from the drug-free baseline. Doses (mg/kg, scaled by
/// `weight` kg) are added to the central compartment at their grid instant
/// before that step's slopes are evaluated.
pub fn integrate(params: &MechParams, doses: &[DoseEvent], weight: f64, t_end: f64, h: f64) -> Result<Trajectory> {
    params.validate()?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidParams(format!("step {h} must be positive")));
    }
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidParams(format!("t_end {t_end} must be non-negative")));
    }
    if !(weight > 0.0 && weight.is_finite()) {
        return Err(Error::InvalidParams(format!("weight {weight} must be positive")));
    }
    let n = (t_end / h).round() as usize;
    let mut dose_at = vec![0.0; n + 1];
    let mut last = f64::NEG_INFINITY;
    for d in doses {
        if d.time <= last {
            return Err(Error::InvalidParams("dose times must be strictly increasing".into()));
        }
        if d.amount < 0.0 || !d.amount.is_finite() {
            return Err(Error::InvalidParams(format!("dose amount {} must be non-negative", d.amount)));
        }
        last = d.time;
        let k = grid_index(d.time, h).ok_or(Error::DoseAlignment { time: d.time, step: h })?;
        if k <= n {
            dose_at[k] += d.amount * weight;
        }
    }

    let mut s = MechState::baseline(&params.pd).to_array();
    let mut states = Vec::with_capacity(n + 1);
    let mut a1_before = Vec::with_capacity(n + 1);
    for (k, &dose) in dose_at.iter().enumerate() {
        a1_before.push(s[0]);
        s[0] += dose;
        states.push(MechState::from_array(s));
        if k == n {
            break;
        }
        let k1 = full_rhs(&s, params)?;
        let k2 = full_rhs(&axpy(&s, &k1, 0.5 * h), params)?;
        let k3 = full_rhs(&axpy(&s, &k2, 0.5 * h), params)?;
        let k4 = full_rhs(&axpy(&s, &k3, h), params)?;
        for i in 0..7 {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite state at t = {}", (k + 1) as f64 * h)));
        }
    }
    Ok(Trajectory {
        step: h,
        states,
        a1_before,
        v1: params.pk.v1,
    })
}

fn axpy(s: &[f64; 7], k: &[f64; 7], c: f64) -> [f64; 7] {
    std::array::from_fn(|i| s[i] + c * k[i])
}
