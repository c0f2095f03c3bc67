use neuralpkpd::cohort::{generate_cohort, sample_population, CohortConfig};
use neuralpkpd::dataset::{group_patients, read_records, validate_records, write_records};
use proptest::prelude::*;

#[test]
fn log_cl_sd_matches_omega() {
    let mut omegas = [0.0; 8];
    omegas[0] = 0.3;
    let cfg = CohortConfig { n_patients: 10_000, omegas, seed: 3, ..Default::default() };
    let pop = sample_population(&cfg).unwrap();
    let logs: Vec<f64> = pop.iter().map(|p| (p.params.pk.cl / cfg.typical.pk.cl).ln()).collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let sd = (logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((sd - 0.3).abs() / 0.3 < 0.02, "sd {sd}");
    // Other parameters untouched.
    assert!(pop.iter().all(|p| p.params.pk.v1 == cfg.typical.pk.v1));
}

#[test]
fn day_eight_nadir_in_most_patients() {
    let cfg = CohortConfig { n_patients: 200, pd_noise_cv: 0.0, seed: 5, ..Default::default() };
    let cohort = generate_cohort(&cfg).unwrap();
    let by_id: std::collections::HashMap<_, _> = cohort.patients.iter().map(|p| (p.id.clone(), p)).collect();
    let mut below = 0;
    let mut total = 0;
    for r in cohort.records.iter().filter(|r| r.time == 8.0) {
        let circ0 = by_id[&r.patient_id].params.pd.circ0;
        total += 1;
        if r.platelet.unwrap() < circ0 {
            below += 1;
        }
    }
    assert_eq!(total, 200);
    assert!(below as f64 >= 0.95 * total as f64, "{below}/{total}");
}

#[test]
fn regimen_mix_within_binomial_noise() {
    let cfg = CohortConfig { n_patients: 4000, seed: 9, ..Default::default() };
    let pop = sample_population(&cfg).unwrap();
    let total_w: f64 = cfg.regimen_mix.iter().map(|r| r.weight).sum();
    for w in &cfg.regimen_mix {
        let p = w.weight / total_w;
        let count = pop
            .iter()
            .filter(|v| v.regimen.interval == w.interval && v.regimen.dose == w.dose)
            .count() as f64;
        let n = pop.len() as f64;
        let sd = (n * p * (1.0 - p)).sqrt();
        assert!((count - n * p).abs() < 4.0 * sd, "{w:?}: {count} vs {}", n * p);
    }
}

#[test]
fn truth_rows_cover_grid() {
    let cfg = CohortConfig { n_patients: 2, ..Default::default() };
    let c = generate_cohort(&cfg).unwrap();
    let per = c.truth.iter().filter(|r| r.patient_id == c.patients[0].id).count();
    assert_eq!(per, (cfg.duration / 0.25) as usize + 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_records_valid_and_round_trip(seed in 0u64..1000, n in 1usize..6, cv in 0.0f64..0.5) {
        let cfg = CohortConfig { n_patients: n, seed, pk_noise_cv: cv, pd_noise_cv: cv, ..Default::default() };
        let c = generate_cohort(&cfg).unwrap();
        validate_records(&c.records, |i| i as u64 + 2).unwrap();
        prop_assert_eq!(group_patients(&c.records).len(), n);
        let mut buf = Vec::new();
        write_records(&c.records, &mut buf).unwrap();
        prop_assert_eq!(read_records(buf.as_slice()).unwrap(), c.records);
    }
}
