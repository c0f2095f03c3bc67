//! Forecast metrics, the windowed benchmark protocol and counterfactual
//! regimen simulation with quantile bands.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::baseline::{fit_individual, predict_forward, PriorSpec};
use crate::cohort::{schedule_doses, Regimen};
use crate::dataset::{Patient, TruthRow};
use crate::dynamics::{grid_index, DoseEvent};
use crate::error::{Error, Result};
use crate::pipeline::data::truncate_observations;
use crate::pipeline::{Case, Checkpoint, Stage};

fn check_pair(pred: &[f64], obs: &[f64], min: usize) -> Result<()> {
    if pred.len() != obs.len() {
        return Err(Error::data(format!("{} predictions for {} observations", pred.len(), obs.len())));
    }
    if pred.len() < min {
        return Err(Error::Undefined("metric", format!("needs at least {min} points, got {}", pred.len())));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Squared Pearson correlation.
pub fn r_squared(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs, 2)?;
    let (mp, mo) = (mean(pred), mean(obs));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, o) in pred.iter().zip(obs) {
        sxy += (p - mp) * (o - mo);
        sxx += (p - mp).powi(2);
        syy += (o - mo).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("r²", "a series has zero variance".into()));
    }
    Ok(sxy * sxy / (sxx * syy))
}

/// `1 − SS_res / SS_tot`, reported alongside r² in verbose output.
pub fn coefficient_of_determination(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs, 2)?;
    let mo = mean(obs);
    let ss_tot: f64 = obs.iter().map(|o| (o - mo).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Undefined("R²", "observations have zero variance".into()));
    }
    let ss_res: f64 = pred.iter().zip(obs).map(|(p, o)| (o - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs, 1)?;
    Ok((pred.iter().zip(obs).map(|(p, o)| (p - o).powi(2)).sum::<f64>() / pred.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scenario {
    pub t_obs: f64,
    pub horizon_start: f64,
}

impl Scenario {
    pub fn new(t_obs: f64, horizon_start: Option<f64>) -> Result<Self> {
        if !(t_obs > 0.0) {
            return Err(Error::Config(format!("t_obs {t_obs} must be positive")));
        }
        let horizon_start = horizon_start.unwrap_or(t_obs);
        if horizon_start < t_obs {
            return Err(Error::Config(format!("horizon {horizon_start} precedes t_obs {t_obs}")));
        }
        Ok(Scenario { t_obs, horizon_start })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub scenario: Scenario,
    pub predictor: String,
    pub n_obs: usize,
    pub n_pred: usize,
    /// Squared Pearson correlation; the reported r².
    pub r2: f64,
    /// `1 − SS_res/SS_tot`, shown only in verbose output.
    pub r2_det: f64,
    pub rmse: f64,
}

pub const REPORT_HEADER: &str = "scenario_tobs,horizon_start,predictor,n_obs,n_pred,r2,rmse";

pub fn report_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.scenario.t_obs, r.scenario.horizon_start, r.predictor, r.n_obs, r.n_pred, r.r2, r.rmse
        );
    }
    s
}

/// Weight and prior used by the baseline when body weight is not recorded.
#[derive(Clone, Debug)]
pub struct BaselineSetup {
    pub prior: PriorSpec,
    pub weight: f64,
}

/// Which predictors to run. The oracle reads dense noiseless trajectories.
#[derive(Clone, Copy, Default)]
pub struct Predictors<'a> {
    pub neural: Option<&'a Checkpoint>,
    pub baseline: Option<&'a BaselineSetup>,
    pub naive: bool,
    pub oracle: Option<&'a [TruthRow]>,
}

pub const NEURAL: &str = "neural";
pub const BASELINE: &str = "baseline";
pub const NAIVE: &str = "naive";
pub const ORACLE: &str = "oracle";

/// Per-patient platelet predictions at the scored times.
struct Pool {
    obs: Vec<f64>,
    by_predictor: Vec<(&'static str, Vec<f64>)>,
    n_obs: usize,
}

fn score_patient(
    p: &Patient,
    sc: Scenario,
    preds: &Predictors,
    truth: &HashMap<&str, HashMap<u64, f64>>,
) -> Result<Option<(usize, Vec<(f64, f64)>, Vec<(&'static str, Vec<f64>)>)>> {
    let input = truncate_observations(&p.records, sc.t_obs);
    let window_plt: Vec<(f64, f64)> = input.iter().filter_map(|r| r.platelet.map(|v| (r.time, v))).collect();
    let has_pk = input.iter().any(|r| r.pk.is_some());
    let targets: Vec<(f64, f64)> = p.platelets().into_iter().filter(|(t, _)| *t >= sc.horizon_start).collect();
    // Every predictor needs the same footing: at least one PK and one
    // platelet observation in the window.
    if window_plt.is_empty() || !has_pk || targets.is_empty() {
        return Ok(None);
    }
    let n_obs = input.iter().filter(|r| r.has_observation()).count();
    let doses = p.doses();
    let t_end = p.last_time();
    let times: Vec<f64> = targets.iter().map(|x| x.0).collect();
    let mut out = Vec::new();

    if let Some(ck) = preds.neural {
        let series = ck.predict(&input, &doses, t_end)?;
        let dt = ck.model.config().dt;
        let vals = times
            .iter()
            .map(|&t| {
                let k = grid_index(t, dt).ok_or(Error::DoseAlignment { time: t, step: dt })?;
                series[k].platelet.ok_or_else(|| Error::Config("neural predictor needs a pkpd checkpoint".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((NEURAL, vals));
    }
    if let Some(b) = preds.baseline {
        let fit = fit_individual(&input, &doses, b.weight, &b.prior)?;
        let vals = predict_forward(&fit.params, &doses, b.weight, &times)?.into_iter().map(|x| x.1).collect();
        out.push((BASELINE, vals));
    }
    if preds.naive {
        let last = window_plt.last().expect("non-empty").1;
        out.push((NAIVE, vec![last; times.len()]));
    }
    if preds.oracle.is_some() {
        let rows = truth
            .get(p.id.as_str())
            .ok_or_else(|| Error::data(format!("no truth rows for patient `{}`", p.id)))?;
        let vals = times
            .iter()
            .map(|t| {
                rows.get(&t.to_bits())
                    .copied()
                    .ok_or_else(|| Error::data(format!("no truth row at t={t} for `{}`", p.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((ORACLE, vals));
    }
    Ok(Some((n_obs, targets, out)))
}

/// Pools windowed forecasts across patients and scores every predictor on
/// the same observation set.
pub fn benchmark(patients: &[Patient], preds: &Predictors, scenarios: &[Scenario]) -> Result<Vec<MetricsRow>> {
    if let Some(ck) = preds.neural {
        if ck.stage != Stage::Pkpd {
            return Err(Error::Config("neural predictor needs a pkpd checkpoint".into()));
        }
    }
    let mut truth: HashMap<&str, HashMap<u64, f64>> = HashMap::new();
    for r in preds.oracle.unwrap_or(&[]) {
        truth.entry(r.patient_id.as_str()).or_default().insert(r.time.to_bits(), r.circ);
    }
    let mut rows = Vec::new();
    for &sc in scenarios {
        let per_patient = patients
            .par_iter()
            .map(|p| score_patient(p, sc, preds, &truth))
            .collect::<Result<Vec<_>>>()?;
        let mut pool = Pool { obs: Vec::new(), by_predictor: Vec::new(), n_obs: 0 };
        for (n_obs, targets, out) in per_patient.into_iter().flatten() {
            pool.n_obs += n_obs;
            pool.obs.extend(targets.iter().map(|x| x.1));
            for (name, vals) in out {
                match pool.by_predictor.iter_mut().find(|(n, _)| *n == name) {
                    Some((_, v)) => v.extend(vals),
                    None => pool.by_predictor.push((name, vals)),
                }
            }
        }
        if pool.obs.is_empty() {
            return Err(Error::Empty("prediction pool"));
        }
        for (name, vals) in &pool.by_predictor {
            rows.push(MetricsRow {
                scenario: sc,
                predictor: name.to_string(),
                n_obs: pool.n_obs,
                n_pred: vals.len(),
                r2: r_squared(vals, &pool.obs)?,
                r2_det: coefficient_of_determination(vals, &pool.obs)?,
                rmse: rmse(vals, &pool.obs)?,
            });
        }
    }
    Ok(rows)
}

// ---- regimen grammar and simulation ----

/// Days covered by a named regimen.
pub const DEFAULT_SPAN: f64 = 252.0;

/// `q1w:<mg/kg>` | `q3w:<mg/kg>` | `q3d:<mg/kg>` | `every:<days>:<mg/kg>:<n>`.
/// Named forms repeat across [`DEFAULT_SPAN`] days.
pub fn parse_regimen(spec: &str) -> Result<Regimen> {
    let parts: Vec<&str> = spec.trim().split(':').collect();
    let num = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Config(format!("bad {what} `{s}` in regimen `{spec}`")))
    };
    let named = |interval: f64, dose: &str| -> Result<Regimen> {
        Regimen::new(interval, num(dose, "dose")?, (DEFAULT_SPAN / interval).round() as usize)
    };
    match parts.as_slice() {
        ["q1w", d] => named(7.0, d),
        ["q3w", d] => named(21.0, d),
        ["q3d", d] => named(3.0, d),
        ["every", i, d, n] => {
            let n: usize = n
                .parse()
                .map_err(|_| Error::Config(format!("bad dose count `{n}` in regimen `{spec}`")))?;
            Regimen::new(num(i, "interval")?, num(d, "dose")?, n)
        }
        _ => Err(Error::Config(format!(
            "unrecognised regimen `{spec}`; expected q1w:<mg/kg>, q3w:<mg/kg>, q3d:<mg/kg> or every:<days>:<mg/kg>:<n>"
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Series {
    Pk,
    Platelet,
}

impl Series {
    pub fn name(self) -> &'static str {
        match self {
            Series::Pk => "pk",
            Series::Platelet => "platelet",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantileRow {
    pub series: Series,
    pub time: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantileTable {
    pub rows: Vec<QuantileRow>,
}

impl QuantileTable {
    pub fn series(&self, s: Series) -> impl Iterator<Item = &QuantileRow> {
        self.rows.iter().filter(move |r| r.series == s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("series,time,q05,q50,q95\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.series.name(), r.time, r.q05, r.q50, r.q95);
        }
        out
    }
}

/// Linear-interpolation sample quantile (R type 7). `sorted` must be sorted.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Encodes every patient from their full records, drives each with
/// `doses` through the dose port and summarizes across patients.
pub fn simulate_regimen(ck: &Checkpoint, patients: &[Patient], doses: &[DoseEvent], t_end: f64) -> Result<QuantileTable> {
    if ck.stage != Stage::Pkpd {
        return Err(Error::Config("regimen simulation needs a pkpd checkpoint".into()));
    }
    if patients.is_empty() {
        return Err(Error::Empty("patients"));
    }
    let cases: Vec<Case> = patients
        .iter()
        .map(|p| Case { records: p.records.clone(), doses: doses.to_vec(), t_end })
        .collect();
    let runs = ck.predict_many(&cases)?;
    let n = runs[0].len();
    let mut rows = Vec::with_capacity(2 * n);
    for series in [Series::Pk, Series::Platelet] {
        for k in 0..n {
            let mut v: Vec<f64> = runs
                .iter()
                .map(|r| match series {
                    Series::Pk => r[k].cp,
                    Series::Platelet => r[k].platelet.expect("pkpd stage"),
                })
                .collect();
            v.sort_by(f64::total_cmp);
            rows.push(QuantileRow {
                series,
                time: runs[0][k].time,
                q05: quantile(&v, 0.05),
                q50: quantile(&v, 0.5),
                q95: quantile(&v, 0.95),
            });
        }
    }
    Ok(QuantileTable { rows })
}

/// Regimen doses with the horizon ending one interval after the last dose.
pub fn regimen_schedule(r: &Regimen) -> (Vec<DoseEvent>, f64) {
    (schedule_doses(r), r.n_doses as f64 * r.interval)
}

/// Median PK at each of doses 2..=n+1. Outputs at a dose instant are
/// pre-dose, so these are the troughs.
pub fn median_troughs(table: &QuantileTable, doses: &[DoseEvent], dt: f64, n: usize) -> Vec<f64> {
    let pk: Vec<&QuantileRow> = table.series(Series::Pk).collect();
    doses
        .iter()
        .skip(1)
        .take(n)
        .filter_map(|d| {
            let k = grid_index(d.time, dt)?;
            pk.get(k).map(|r| r.q50)
        })
        .collect()
}

/// Mean over consecutive `window`-day spans of the median platelet range.
pub fn median_swing(table: &QuantileTable, window: f64) -> f64 {
    let pl: Vec<&QuantileRow> = table.series(Series::Platelet).collect();
    let t_end = pl.last().map_or(0.0, |r| r.time);
    let mut swings = Vec::new();
    let mut start = 0.0;
    while start + window <= t_end + 1e-9 {
        let vals: Vec<f64> = pl.iter().filter(|r| r.time >= start && r.time < start + window).map(|r| r.q50).collect();
        if let (Some(max), Some(min)) = (
            vals.iter().copied().reduce(f64::max),
            vals.iter().copied().reduce(f64::min),
        ) {
            swings.push(max - min);
        }
        start += window;
    }
    if swings.is_empty() {
        0.0
    } else {
        mean(&swings)
    }
}

/// True when every full `period`-day cycle from `from` on shows a drop below
/// the cycle-start value followed by a rebound of at least half the drop.
pub fn drop_and_recovery(times: &[f64], values: &[f64], from: f64, period: f64) -> bool {
    let t_end = times.last().copied().unwrap_or(0.0);
    let mut start = from;
    let mut cycles = 0;
    while start + period <= t_end + 1e-9 {
        let idx: Vec<usize> = (0..times.len()).filter(|&i| times[i] >= start && times[i] < start + period).collect();
        if idx.len() < 3 {
            return false;
        }
        let first = values[idx[0]];
        let last = values[*idx.last().expect("non-empty")];
        let (imin, min) = idx
            .iter()
            .map(|&i| (i, values[i]))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty");
        let drop = first - min;
        if !(drop > 0.01 * first.abs()) || imin == idx[0] || last - min < 0.5 * drop {
            return false;
        }
        cycles += 1;
        start += period;
    }
    cycles > 0
}

// ---- SVG ----

/// Geometry of the two-panel band plot; exposed so callers can map data to
/// pixels exactly as the renderer does.
#[derive(Clone, Debug, PartialEq)]
pub struct SvgLayout {
    pub width: f64,
    pub panel_height: f64,
    pub margin: f64,
    pub t_max: f64,
    /// `(min, max)` value range of the pk and platelet panels.
    pub ranges: [(f64, f64); 2],
}

impl SvgLayout {
    pub fn for_table(table: &QuantileTable) -> Result<Self> {
        if table.rows.is_empty() {
            return Err(Error::Empty("quantile table"));
        }
        let t_max = table.rows.iter().map(|r| r.time).fold(0.0, f64::max);
        let range = |s: Series| {
            let (lo, hi) = table
                .series(s)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.q05), hi.max(r.q95)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        Ok(SvgLayout {
            width: 800.0,
            panel_height: 300.0,
            margin: 50.0,
            t_max: if t_max > 0.0 { t_max } else { 1.0 },
            ranges: [range(Series::Pk), range(Series::Platelet)],
        })
    }

    fn panel(series: Series) -> usize {
        match series {
            Series::Pk => 0,
            Series::Platelet => 1,
        }
    }

    pub fn height(&self) -> f64 {
        2.0 * self.panel_height
    }

    pub fn x(&self, t: f64) -> f64 {
        self.margin + (self.width - 2.0 * self.margin) * t / self.t_max
    }

    pub fn y(&self, series: Series, v: f64) -> f64 {
        let p = Self::panel(series);
        let (lo, hi) = self.ranges[p];
        let top = p as f64 * self.panel_height + self.margin * 0.5;
        let h = self.panel_height - self.margin;
        top + h * (1.0 - (v - lo) / (hi - lo))
    }
}

pub fn quantile_svg(table: &QuantileTable) -> Result<String> {
    let lay = SvgLayout::for_table(table)?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        lay.width,
        lay.height(),
        lay.width,
        lay.height()
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for series in [Series::Pk, Series::Platelet] {
        let rows: Vec<&QuantileRow> = table.series(series).collect();
        if rows.is_empty() {
            continue;
        }
        let upper = rows.iter().map(|r| format!("{:.2},{:.2}", lay.x(r.time), lay.y(series, r.q95)));
        let lower = rows.iter().rev().map(|r| format!("{:.2},{:.2}", lay.x(r.time), lay.y(series, r.q05)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(
            s,
            r##"<polygon class="band" data-series="{}" points="{}" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>"##,
            series.name(),
            band.join(" ")
        );
        let median: Vec<String> = rows.iter().map(|r| format!("{:.2},{:.2}", lay.x(r.time), lay.y(series, r.q50))).collect();
        let _ = writeln!(
            s,
            r##"<polyline class="median" data-series="{}" points="{}" fill="none" stroke="#08519c" stroke-width="1.5"/>"##,
            series.name(),
            median.join(" ")
        );
        let (lo, hi) = lay.ranges[SvgLayout::panel(series)];
        let label = match series {
            Series::Pk => "PK (µg/mL)",
            Series::Platelet => "Platelets (10⁹/L)",
        };
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" font-family="sans-serif">{} [{:.1}, {:.1}]</text>"#,
            lay.margin,
            lay.y(series, hi) - 6.0,
            label,
            lo,
            hi
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
            lay.x(0.0),
            lay.y(series, lo),
            lay.x(lay.t_max),
            lay.y(series, lo)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" font-family="sans-serif">time (days), 0 to {}</text>"#,
        lay.width / 2.0 - 60.0,
        lay.height() - 8.0,
        lay.t_max
    );
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_quantile_svg(table: &QuantileTable, path: &Path) -> Result<()> {
    let svg = quantile_svg(table)?;
    std::fs::write(path, svg)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}
