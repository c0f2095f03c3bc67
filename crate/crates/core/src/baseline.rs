//! Per-patient maximum a posteriori fit of the mechanistic model, the
//! comparator for the neural forecasts.

use serde::{Deserialize, Serialize};

use crate::dataset::PatientRecord;
use crate::dynamics::{integrate, DoseEvent, MechParams};
use crate::error::{Error, Result};

/// Integration step for fitting and prediction.
pub const FIT_STEP: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    pub typical: MechParams,
    /// Log-scale prior sd per parameter; 0 fixes the parameter at typical.
    pub omegas: [f64; 8],
    /// Additive residual sd, µg/mL.
    pub sigma_pk: f64,
    /// Additive residual sd, 10⁹/L.
    pub sigma_platelet: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            typical: MechParams::typical(),
            omegas: [0.3; 8],
            sigma_pk: 2.0,
            sigma_platelet: 10.0,
        }
    }
}

impl PriorSpec {
    /// Prior for data whose doses are per kg of an unknown body weight:
    /// volumes and clearance are expressed per kg of `weight_mean`, and the
    /// weight spread is folded into their prior sds.
    pub fn per_kg(typical: &MechParams, omegas: [f64; 8], weight_mean: f64, weight_cv: f64) -> Self {
        let mut t = *typical;
        t.pk.cl /= weight_mean;
        t.pk.v1 /= weight_mean;
        t.pk.q /= weight_mean;
        t.pk.v2 /= weight_mean;
        let mut w = omegas;
        for o in w.iter_mut().take(4) {
            *o = (*o * *o + weight_cv * weight_cv).sqrt();
        }
        PriorSpec { typical: t, omegas: w, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.typical.validate()?;
        if self.omegas.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("prior sds must be non-negative".into()));
        }
        if !(self.sigma_pk > 0.0 && self.sigma_platelet > 0.0) {
            return Err(Error::Config("residual sds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub params: MechParams,
    pub objective: f64,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective after each simplex iteration.
    pub history: Vec<f64>,
}

/// Settings for the simplex search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimplexOptions {
    pub max_evals: usize,
    pub f_tol: f64,
    pub x_tol: f64,
    pub initial_step: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions { max_evals: 4000, f_tol: 1e-10, x_tol: 1e-8, initial_step: 0.2 }
    }
}

pub struct SimplexOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub evaluations: usize,
    pub converged: bool,
    pub history: Vec<f64>,
}

/// Nelder–Mead with the standard coefficients (reflection 1, expansion 2,
/// contraction ½, shrink ½). Non-finite objective values count as +∞.
pub fn nelder_mead(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], opts: SimplexOptions) -> SimplexOutcome {
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    if n == 0 {
        let v = eval(x0, &mut evals);
        return SimplexOutcome { x: vec![], f: v, evaluations: evals, converged: true, history: vec![v] };
    }
    let mut pts: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += opts.initial_step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p, &mut evals)).collect();
    let mut history = Vec::new();
    let mut converged = false;

    while evals < opts.max_evals {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = idx.iter().map(|&i| pts[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        history.push(vals[0]);

        let spread = (vals[n] - vals[0]).abs();
        let size = pts[1..]
            .iter()
            .map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= opts.f_tol * (1.0 + vals[0].abs()) && size <= opts.x_tol {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..n).map(|j| pts[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let along = |c: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + c * (pts[n][j] - centroid[j])).collect() };

        let xr = along(-1.0);
        let fr = eval(&xr, &mut evals);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
            continue;
        }
        if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < vals[n] {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < vals[n].min(fr) {
            pts[n] = xc;
            vals[n] = fc;
            continue;
        }
        for i in 1..=n {
            let p: Vec<f64> = (0..n).map(|j| pts[0][j] + 0.5 * (pts[i][j] - pts[0][j])).collect();
            vals[i] = eval(&p, &mut evals);
            pts[i] = p;
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).expect("non-empty simplex");
    if history.last() != Some(&vals[best]) {
        history.push(vals[best]);
    }
    SimplexOutcome { x: pts[best].clone(), f: vals[best], evaluations: evals, converged, history }
}

/// Observations `(time, value)` of each kind inside the fitting window.
struct Window {
    pk: Vec<(usize, f64)>,
    platelet: Vec<(usize, f64)>,
    t_end: f64,
}

fn window(records: &[PatientRecord]) -> Result<Window> {
    let idx = |t: f64| {
        crate::dynamics::grid_index(t, FIT_STEP)
            .ok_or_else(|| Error::data(format!("observation time {t} is off the {FIT_STEP}-day grid")))
    };
    let mut pk = Vec::new();
    let mut platelet = Vec::new();
    let mut t_end: f64 = 0.0;
    for r in records {
        if let Some(v) = r.pk {
            pk.push((idx(r.time)?, v));
            t_end = t_end.max(r.time);
        }
        if let Some(v) = r.platelet {
            platelet.push((idx(r.time)?, v));
            t_end = t_end.max(r.time);
        }
    }
    if pk.is_empty() || platelet.is_empty() {
        return Err(Error::data("fit window needs at least one pk and one platelet observation"));
    }
    Ok(Window { pk, platelet, t_end })
}

/// MAP estimate from the windowed records. `doses` may extend beyond the
/// window; `weight` converts mg/kg doses to mg.
pub fn fit_individual(records_obs: &[PatientRecord], doses: &[DoseEvent], weight: f64, prior: &PriorSpec) -> Result<FitResult> {
    prior.validate()?;
    let w = window(records_obs)?;
    let log_typ: Vec<f64> = prior.typical.to_array().iter().map(|v| v.ln()).collect();
    let free: Vec<usize> = (0..8).filter(|&i| prior.omegas[i] > 0.0).collect();

    let to_params = |x: &[f64]| -> MechParams {
        let mut a = prior.typical.to_array();
        for (k, &i) in free.iter().enumerate() {
            a[i] = x[k].exp();
        }
        MechParams::from_array(a)
    };
    let mut objective = |x: &[f64]| -> f64 {
        let p = to_params(x);
        let Ok(traj) = integrate(&p, doses, weight, w.t_end, FIT_STEP) else {
            return f64::INFINITY;
        };
        let mut s = 0.0;
        for &(k, v) in &w.pk {
            s += ((v - traj.cp_before(k)) / prior.sigma_pk).powi(2);
        }
        for &(k, v) in &w.platelet {
            s += ((v - traj.circ(k)) / prior.sigma_platelet).powi(2);
        }
        for (k, &i) in free.iter().enumerate() {
            s += ((x[k] - log_typ[i]) / prior.omegas[i]).powi(2);
        }
        s
    };

    let x0: Vec<f64> = free.iter().map(|&i| log_typ[i]).collect();
    let opts = SimplexOptions::default();
    let first = nelder_mead(&mut objective, &x0, opts);
    let second = nelder_mead(&mut objective, &first.x, opts);
    let mut history = first.history;
    history.extend(second.history.iter().map(|&v| v.min(first.f)));
    let (x, f) = if second.f <= first.f { (second.x, second.f) } else { (first.x, first.f) };
    if !f.is_finite() {
        return Err(Error::Numeric("baseline objective is non-finite everywhere explored".into()));
    }
    Ok(FitResult {
        params: to_params(&x),
        objective: f,
        evaluations: first.evaluations + second.evaluations,
        converged: second.converged,
        history,
    })
}

/// Individual predictions `(cp, circ)` at `times`.
pub fn predict_forward(params: &MechParams, doses: &[DoseEvent], weight: f64, times: &[f64]) -> Result<Vec<(f64, f64)>> {
    let t_end = times.iter().copied().fold(0.0, f64::max);
    let traj = integrate(params, doses, weight, t_end, FIT_STEP)?;
    times
        .iter()
        .map(|&t| {
            let k = traj.index_of(t)?;
            Ok((traj.cp_before(k), traj.circ(k)))
        })
        .collect()
}
