use neuralpkpd::dataset::PatientRecord;
use neuralpkpd::dynamics::DoseEvent;
use neuralpkpd::model::{prepare_input, scale_doses, Encoded, ModelConfig, ModelInput, NeuralPkPd};
use neuralpkpd::pipeline::NormStats;
use proptest::prelude::*;
use tensornet::{Graph, Tensor};

fn norm() -> NormStats {
    NormStats { means: [5.0, 40.0, 30.0, 200.0, 0.3], sds: [5.0, 35.0, 25.0, 40.0, 1.0] }
}

fn small_config() -> ModelConfig {
    ModelConfig { pk_gru: 4, pd_gru: 5, ic_gru: 3, pkvf_hidden: 6, pdvf_hidden: 7, pd_param_dim: 3, pk_param_dim: 2, ..Default::default() }
}

fn records(pk: &[Option<f64>], plt: &[Option<f64>]) -> Vec<PatientRecord> {
    let times = [0.0, 1.0, 4.0, 8.0];
    (0..4)
        .map(|i| PatientRecord {
            patient_id: "A".into(),
            time_after_dose: times[i],
            time: times[i],
            pk: pk[i],
            platelet: plt[i],
            dose: (i == 0).then_some(3.6),
        })
        .collect()
}

fn input() -> ModelInput {
    prepare_input(
        &records(&[Some(80.0), Some(50.0), None, Some(20.0)], &[Some(210.0), None, Some(170.0), Some(130.0)]),
        &norm(),
        21.0,
    )
    .unwrap()
}

#[test]
fn pd_step_depends_on_pk_only_through_cp() {
    let m = NeuralPkPd::new(ModelConfig::default(), 1).unwrap();
    let mut g = Graph::new(m.store());
    let pk = g.input_with_grad(Tensor::row(vec![0.8, 0.3]));
    let pd = g.input_with_grad(Tensor::row(vec![0.1, 0.2, -0.1, 0.0]));
    let pkp = g.input_with_grad(Tensor::row(vec![0.1, -0.2, 0.3, 0.05]));
    let pdp = g.input_with_grad(Tensor::row((0..10).map(|i| 0.1 * i as f64).collect()));
    let enc = Encoded { pk_params: pkp, pd_params: Some(pdp), pd_init: None };
    let (_, (npk, npd)) = m.step_graph(&mut g, pk, Some(pd), &enc, None).unwrap();

    let s = g.sum(npd.unwrap());
    let grads = g.backward(s).unwrap();
    let dpk = grads.input(pk).unwrap().data();
    assert_eq!(dpk[1], 0.0, "non-dosed compartment must not reach PD");
    assert_ne!(dpk[0], 0.0);
    assert!(grads.input(pkp).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));

    let s = g.sum(npk);
    let grads = g.backward(s).unwrap();
    for v in [pd, pdp] {
        assert!(grads.input(v).map_or(true, |t| t.data().iter().all(|&x| x == 0.0)));
    }
}

#[test]
fn platelet_perturbation_moves_pd_params() {
    let m = NeuralPkPd::new(small_config(), 2).unwrap();
    let base = input();
    let mut bumped = base.clone();
    bumped.pd_rows[2][4] += 1e-4;
    let a = m.encode_pd(&base).unwrap();
    let b = m.encode_pd(&bumped).unwrap();
    let sens: f64 = a.iter().zip(&b).map(|(x, y)| ((y - x) / 1e-4).abs()).sum();
    assert!(sens > 1e-6, "sensitivity {sens}");
}

/// Finite differences through encoders, ICNet and the unrolled cell.
#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let mut m = NeuralPkPd::new(small_config(), 5).unwrap();
    let inputs = [input()];
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let doses = scale_doses(&[DoseEvent { time: 0.0, amount: 3.6 }, DoseEvent { time: 1.0, amount: 1.0 }], &norm(), 0.25).unwrap();
    let n = 9;
    let target = Tensor::matrix(1, n, (0..n).map(|k| 0.1 * k as f64).collect()).unwrap();
    let mask = Tensor::full(&[1, n], 1.0);

    let loss_of = |m: &NeuralPkPd| -> f64 {
        let mut g = Graph::new(m.store());
        let f = m.forward(&mut g, &refs, &[&doses], n, true).unwrap();
        let a = g.masked_mse(f.pk, &target, &mask).unwrap();
        let b = g.masked_mse(f.pd.unwrap(), &target, &mask).unwrap();
        let l = g.add(a, b).unwrap();
        g.value(l).data()[0]
    };

    let grads = {
        let mut g = Graph::new(m.store());
        let f = m.forward(&mut g, &refs, &[&doses], n, true).unwrap();
        let a = g.masked_mse(f.pk, &target, &mask).unwrap();
        let b = g.masked_mse(f.pd.unwrap(), &target, &mask).unwrap();
        let l = g.add(a, b).unwrap();
        g.backward(l).unwrap()
    };

    let entries: Vec<_> = m.store().iter().map(|(id, e)| (id, e.name.clone(), e.value.clone())).collect();
    let mut checked = 0;
    for (id, name, value) in entries {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(value.shape()));
        for j in (0..value.len()).step_by(3) {
            let h = 1e-5;
            let mut plus = value.clone();
            plus.data_mut()[j] += h;
            m.store_mut().set_value(id, plus).unwrap();
            let lp = loss_of(&m);
            let mut minus = value.clone();
            minus.data_mut()[j] -= h;
            m.store_mut().set_value(id, minus).unwrap();
            let lm = loss_of(&m);
            m.store_mut().set_value(id, value.clone()).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic.data()[j];
            let err = (fd - an).abs();
            assert!(err < 1e-9 || err / fd.abs().max(an.abs()).max(1e-6) < 1e-4, "{name}[{j}]: fd {fd} vs {an}");
            checked += 1;
        }
    }
    assert!(checked > 100);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pk_series_independent_of_platelets_and_pd_params(
        seed in 0u64..50,
        plt in prop::collection::vec(prop::option::of(50.0f64..400.0), 4),
        pdp in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let m = NeuralPkPd::new(small_config(), seed).unwrap();
        let pk = [Some(80.0), Some(50.0), None, Some(20.0)];
        let mut plt = plt;
        plt[0] = Some(plt[0].unwrap_or(200.0));
        let a = prepare_input(&records(&pk, &[Some(210.0), None, Some(170.0), Some(130.0)]), &norm(), 21.0).unwrap();
        let b = prepare_input(&records(&pk, &plt), &norm(), 21.0).unwrap();
        let doses = scale_doses(&[DoseEvent { time: 0.0, amount: 3.6 }, DoseEvent { time: 7.0, amount: 3.6 }], &norm(), 0.25).unwrap();
        let ea = m.encode(&a).unwrap();
        let mut eb = m.encode(&b).unwrap();
        eb.pd_params = pdp;
        let ra = m.rollout(&ea, &doses, 14.0).unwrap();
        let rb = m.rollout(&eb, &doses, 14.0).unwrap();
        for (x, y) in ra.iter().zip(&rb) {
            prop_assert_eq!(x.pk.to_bits(), y.pk.to_bits());
        }
    }

    #[test]
    fn pk_series_non_negative(
        seed in 0u64..1000,
        amounts in prop::collection::vec(0.0f64..10.0, 1..4),
        params in prop::collection::vec(-5.0f64..5.0, 2),
    ) {
        let m = NeuralPkPd::new(small_config(), seed).unwrap();
        let mut enc = m.encode(&input()).unwrap();
        enc.pk_params = params;
        let doses: Vec<DoseEvent> = amounts.iter().enumerate().map(|(i, &a)| DoseEvent { time: 3.0 * i as f64, amount: a }).collect();
        let r = m.rollout(&enc, &scale_doses(&doses, &norm(), 0.25).unwrap(), 12.0).unwrap();
        prop_assert!(r.iter().all(|row| row.pk >= 0.0));
    }
}
