use neuralpkpd::baseline::{fit_individual, predict_forward, PriorSpec};
use neuralpkpd::cohort::{schedule_doses, synthesize_records, CohortConfig, Regimen, VirtualPatient};
use neuralpkpd::dataset::PatientRecord;
use neuralpkpd::dynamics::{DoseEvent, MechParams, PARAM_NAMES};

const WEIGHT: f64 = 70.0;

fn patient(params: MechParams) -> (Vec<PatientRecord>, Vec<DoseEvent>, CohortConfig) {
    let cfg = CohortConfig { n_patients: 1, pk_noise_cv: 0.0, pd_noise_cv: 0.0, ..Default::default() };
    let regimen = Regimen::new(21.0, 3.6, 6).unwrap();
    let vp = VirtualPatient { id: "P0001".into(), index: 0, params, weight: WEIGHT, regimen };
    let doses = schedule_doses(&regimen);
    let recs = synthesize_records(&vp, &doses, &cfg).unwrap();
    (recs, doses, cfg)
}

fn window(recs: &[PatientRecord], t_obs: f64) -> Vec<PatientRecord> {
    recs.iter().filter(|r| r.time < t_obs).cloned().collect()
}

fn r2(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let c: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    c * c / (va * vb)
}

#[test]
fn recovers_typical_parameters_from_noiseless_data() {
    let typical = MechParams::typical();
    let (recs, doses, _) = patient(typical);
    let prior = PriorSpec::default();
    let fit = fit_individual(&window(&recs, 21.0), &doses, WEIGHT, &prior).unwrap();
    for (i, (a, b)) in fit.params.to_array().iter().zip(typical.to_array()).enumerate() {
        assert!(((a - b) / b).abs() < 0.05, "{}: {a} vs {b}", PARAM_NAMES[i]);
    }
    assert!(fit.history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn zero_prior_sds_return_typical() {
    let mut shifted = MechParams::typical().to_array();
    shifted.iter_mut().for_each(|v| *v *= 1.5);
    let (recs, doses, _) = patient(MechParams::from_array(shifted));
    let prior = PriorSpec { omegas: [0.0; 8], ..Default::default() };
    let fit = fit_individual(&window(&recs, 21.0), &doses, WEIGHT, &prior).unwrap();
    assert_eq!(fit.params, prior.typical);
}

#[test]
fn forward_prediction_from_shifted_truth() {
    let mut a = MechParams::typical().to_array();
    a.iter_mut().for_each(|v| *v *= 0.3f64.exp());
    let truth = MechParams::from_array(a);
    let (recs, doses, _) = patient(truth);
    let t_obs = 21.0;
    let prior = PriorSpec { omegas: [3.0; 8], sigma_pk: 0.5, sigma_platelet: 2.0, ..Default::default() };
    let fit = fit_individual(&window(&recs, t_obs), &doses, WEIGHT, &prior).unwrap();

    let future: Vec<&PatientRecord> = recs.iter().filter(|r| r.time >= t_obs).collect();
    let times: Vec<f64> = future.iter().map(|r| r.time).collect();
    let pred = predict_forward(&fit.params, &doses, WEIGHT, &times).unwrap();
    let (mut p_pk, mut o_pk, mut p_pl, mut o_pl) = (vec![], vec![], vec![], vec![]);
    for (r, (cp, circ)) in future.iter().zip(&pred) {
        if let Some(v) = r.pk {
            p_pk.push(*cp);
            o_pk.push(v);
        }
        if let Some(v) = r.platelet {
            p_pl.push(*circ);
            o_pl.push(v);
        }
    }
    assert!(r2(&p_pk, &o_pk) >= 0.99, "pk r2 {}", r2(&p_pk, &o_pk));
    assert!(r2(&p_pl, &o_pl) >= 0.99, "platelet r2 {}", r2(&p_pl, &o_pl));
}

#[test]
fn fitted_predictions_reproduce_window_data() {
    let typical = MechParams::typical();
    let (recs, doses, _) = patient(typical);
    let win = window(&recs, 21.0);
    let fit = fit_individual(&win, &doses, WEIGHT, &PriorSpec::default()).unwrap();
    let times: Vec<f64> = win.iter().map(|r| r.time).collect();
    let pred = predict_forward(&fit.params, &doses, WEIGHT, &times).unwrap();
    for (r, (cp, circ)) in win.iter().zip(pred) {
        if let Some(v) = r.pk {
            assert!((cp - v).abs() <= 1e-3 * v.abs().max(1e-9), "pk at {}: {cp} vs {v}", r.time);
        }
        if let Some(v) = r.platelet {
            assert!((circ - v).abs() <= 1e-3 * v, "platelet at {}: {circ} vs {v}", r.time);
        }
    }
}

#[test]
fn fit_is_deterministic() {
    let mut a = MechParams::typical().to_array();
    a[0] *= 1.2;
    a[5] *= 0.8;
    let (recs, doses, _) = patient(MechParams::from_array(a));
    let w = window(&recs, 21.0);
    let f1 = fit_individual(&w, &doses, WEIGHT, &PriorSpec::default()).unwrap();
    let f2 = fit_individual(&w, &doses, WEIGHT, &PriorSpec::default()).unwrap();
    assert_eq!(f1, f2);
}
