//! The reference integrator checked against independent oracles: the closed-form
//! bi-exponential for the PK part and a separately written fine-step RK4 for
//! the Friberg part.

use neuralpkpd::dynamics::{integrate, DoseEvent, MechParams};
use proptest::prelude::*;

fn scenario_params() -> MechParams {
    let mut p = MechParams::typical();
    p.pk.cl = 0.7;
    p.pk.v1 = 3.1;
    p.pk.q = 0.9;
    p.pk.v2 = 1.4;
    p
}

/// Central amount after a unit bolus, closed form.
fn biexponential_a1(p: &MechParams, dose_mg: f64, t: f64) -> f64 {
    let k10 = p.pk.cl / p.pk.v1;
    let k12 = p.pk.q / p.pk.v1;
    let k21 = p.pk.q / p.pk.v2;
    let s = k10 + k12 + k21;
    let disc = (s * s - 4.0 * k10 * k21).sqrt();
    let alpha = 0.5 * (s + disc);
    let beta = 0.5 * (s - disc);
    dose_mg * ((alpha - k21) / (alpha - beta) * (-alpha * t).exp() + (k21 - beta) / (alpha - beta) * (-beta * t).exp())
}

/// Independent fixed-step RK4 of the same ODE system, written from scratch.
fn oracle(p: &MechParams, doses_mg: &[(f64, f64)], t_end: f64, h: f64) -> Vec<(f64, f64, f64)> {
    let (cl, v1, q, v2) = (p.pk.cl, p.pk.v1, p.pk.q, p.pk.v2);
    let (mtt, gamma, slope, c0) = (p.pd.mtt, p.pd.gamma, p.pd.slope, p.pd.circ0);
    let ktr = 4.0 / mtt;
    let f = |y: &[f64; 7]| -> [f64; 7] {
        let cp = y[0] / v1;
        let e = (slope * cp).min(1.0);
        [
            -(cl + q) / v1 * y[0] + q / v2 * y[1],
            q / v1 * y[0] - q / v2 * y[1],
            ktr * y[2] * ((1.0 - e) * (c0 / y[6]).powf(gamma) - 1.0),
            ktr * (y[2] - y[3]),
            ktr * (y[3] - y[4]),
            ktr * (y[4] - y[5]),
            ktr * (y[5] - y[6]),
        ]
    };
    let n = (t_end / h).round() as usize;
    let mut y = [0.0, 0.0, c0, c0, c0, c0, c0];
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 * h;
        for &(td, amt) in doses_mg {
            if ((td - t) / h).abs() < 0.5 {
                y[0] += amt;
            }
        }
        out.push((t, y[0] / v1, y[6]));
        if k == n {
            break;
        }
        let k1 = f(&y);
        let y2: [f64; 7] = std::array::from_fn(|i| y[i] + 0.5 * h * k1[i]);
        let k2 = f(&y2);
        let y3: [f64; 7] = std::array::from_fn(|i| y[i] + 0.5 * h * k2[i]);
        let k3 = f(&y3);
        let y4: [f64; 7] = std::array::from_fn(|i| y[i] + h * k3[i]);
        let k4 = f(&y4);
        for i in 0..7 {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    out
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn zero_dose_holds_baseline_for_100_days() {
    let p = MechParams::typical();
    let traj = integrate(&p, &[], 70.0, 100.0, 0.01).unwrap();
    for s in &traj.states {
        for v in [s.prol, s.t1, s.t2, s.t3, s.circ] {
            assert!(rel(v, p.pd.circ0) <= 1e-6);
        }
    }
}

#[test]
fn rk4_matches_closed_form_and_fine_step_oracle_at_day_21() {
    let p = scenario_params();
    let doses = [DoseEvent { time: 0.0, amount: 3.6 }];
    let traj = integrate(&p, &doses, 70.0, 21.0, 0.01).unwrap();
    let k = traj.index_of(21.0).unwrap();

    let exact_cp = biexponential_a1(&p, 3.6 * 70.0, 21.0) / p.pk.v1;
    assert!(rel(traj.cp(k), exact_cp) < 1e-6, "{} vs {}", traj.cp(k), exact_cp);

    let fine = oracle(&p, &[(0.0, 3.6 * 70.0)], 21.0, 0.0005);
    let (t, cp, circ) = *fine.last().unwrap();
    assert!((t - 21.0).abs() < 1e-9);
    assert!(rel(traj.cp(k), cp) < 1e-6);
    assert!(rel(traj.circ(k), circ) < 1e-6, "{} vs {}", traj.circ(k), circ);
}

#[test]
fn multi_dose_trajectory_matches_oracle_everywhere() {
    let p = scenario_params();
    let doses: Vec<DoseEvent> = (0..3).map(|i| DoseEvent { time: 21.0 * i as f64, amount: 3.6 }).collect();
    let traj = integrate(&p, &doses, 70.0, 63.0, 0.01).unwrap();
    let mg: Vec<(f64, f64)> = doses.iter().map(|d| (d.time, d.amount * 70.0)).collect();
    let fine = oracle(&p, &mg, 63.0, 0.0005);
    for day in 0..=63 {
        let k = traj.index_of(day as f64).unwrap();
        let (_, cp, circ) = fine[day * 2000];
        assert!(rel(traj.cp(k), cp) < 1e-6, "cp day {day}");
        assert!(rel(traj.circ(k), circ) < 1e-6, "circ day {day}");
    }
}

#[test]
fn rk4_is_fourth_order_between_doses() {
    // Errors against the fine oracle at h, h/2, h/4 on a smooth stretch.
    let mut p = scenario_params();
    p.pk.cl = 3.0;
    p.pk.q = 4.0;
    let doses = [DoseEvent { time: 0.0, amount: 3.6 }];
    let reference = oracle(&p, &[(0.0, 3.6 * 70.0)], 4.0, 1e-4);
    let (_, cp_ref, circ_ref) = *reference.last().unwrap();
    let errs: Vec<(f64, f64)> = [0.1, 0.05, 0.025]
        .iter()
        .map(|&h| {
            let t = integrate(&p, &doses, 70.0, 4.0, h).unwrap();
            let k = t.len() - 1;
            ((t.cp(k) - cp_ref).abs(), (t.circ(k) - circ_ref).abs())
        })
        .collect();
    for w in errs.windows(2) {
        let ratio_cp = w[0].0 / w[1].0;
        let ratio_circ = w[0].1 / w[1].1;
        assert!((13.0..=19.5).contains(&ratio_cp), "cp ratio {ratio_cp}");
        assert!((13.0..=19.5).contains(&ratio_circ), "circ ratio {ratio_circ}");
    }
}

#[test]
fn pk_superposition_of_two_doses() {
    let p = scenario_params();
    let a = [DoseEvent { time: 0.0, amount: 3.6 }];
    let b = [DoseEvent { time: 7.0, amount: 2.4 }];
    let both = [a[0], b[0]];
    let ta = integrate(&p, &a, 70.0, 30.0, 0.01).unwrap();
    let tb = integrate(&p, &b, 70.0, 30.0, 0.01).unwrap();
    let tab = integrate(&p, &both, 70.0, 30.0, 0.01).unwrap();
    for k in 0..tab.len() {
        let sum = ta.cp(k) + tb.cp(k);
        let err = (tab.cp(k) - sum).abs();
        assert!(err <= 1e-9 * sum.max(1e-12), "t={} {} vs {}", tab.time(k), tab.cp(k), sum);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn states_stay_non_negative(
        scale in prop::array::uniform8(0.5f64..2.0),
        amounts in prop::collection::vec(0.0f64..8.0, 1..5),
        interval in 1u32..21,
    ) {
        let base = MechParams::typical().to_array();
        let p = MechParams::from_array(std::array::from_fn(|i| base[i] * scale[i]));
        let doses: Vec<DoseEvent> = amounts
            .iter()
            .enumerate()
            .map(|(i, &amount)| DoseEvent { time: (i as u32 * interval) as f64, amount })
            .collect();
        let traj = integrate(&p, &doses, 70.0, 60.0, 0.02).unwrap();
        for s in &traj.states {
            for v in [s.a1, s.a2, s.prol, s.t1, s.t2, s.t3, s.circ] {
                prop_assert!(v >= 0.0);
            }
        }
    }
}
