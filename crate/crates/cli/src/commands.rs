use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use neuralpkpd::cohort::generate_cohort;
use neuralpkpd::dataset::{flatten_patients, group_patients, read_dataset, read_truth, write_dataset, write_truth, Patient};
use neuralpkpd::evaluation::{
    benchmark, quantile_svg, regimen_schedule, report_csv, BaselineSetup, Predictors, Scenario,
};
use neuralpkpd::pipeline::{split_patients, train_pd, train_pk, Checkpoint};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{CliError, EvaluateArgs, RegimenArgs, SimulateArgs, StageArg, TrainArgs};

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(neuralpkpd::Error::from)?;
    Ok(sha256_hex(&bytes))
}

fn config_hash<T: Serialize>(v: &T) -> Result<String, CliError> {
    let text = serde_json::to_string(v).map_err(neuralpkpd::Error::from)?;
    Ok(sha256_hex(text.as_bytes()))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(neuralpkpd::Error::from)?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

/// Side file recording what is needed to rerun a command bit-exactly.
fn write_manifest(path: &Path, command: &str, config: Value, inputs: &[&Path], outputs: &[&Path]) -> Result<(), CliError> {
    let hashes = |ps: &[&Path]| -> Result<BTreeMap<String, String>, CliError> {
        ps.iter().map(|p| Ok((p.display().to_string(), file_hash(p)?))).collect()
    };
    let m = json!({
        "tool": "neuralpkpd",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "argv": std::env::args().skip(1).collect::<Vec<_>>(),
        "config_hash": config_hash(&config)?,
        "config": config,
        "inputs": hashes(inputs)?,
        "outputs": hashes(outputs)?,
    });
    let text = serde_json::to_string_pretty(&m).map_err(neuralpkpd::Error::from)? + "\n";
    write(path, &text)
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn pick(flag: Option<PathBuf>, dir: &Option<PathBuf>, file: &str, what: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| dir.as_ref().map(|d| d.join(file)))
        .ok_or_else(|| CliError::Usage(format!("{what} not given and no default in the config")))
}

fn need_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{} does not exist", path.display())))
    }
}

fn load_patients(path: &Path) -> Result<Vec<Patient>, CliError> {
    need_file(path)?;
    let records = read_dataset(path)?;
    let patients = group_patients(&records);
    if patients.is_empty() {
        return Err(neuralpkpd::Error::Empty("patients").into());
    }
    Ok(patients)
}

pub fn simulate_cohort(mut cfg: RunConfig, a: SimulateArgs) -> Result<(), CliError> {
    if let Some(n) = a.n {
        cfg.cohort.n_patients = n;
    }
    if let Some(s) = a.seed {
        cfg.cohort.seed = s;
    }
    if let Some(cv) = a.noise {
        cfg.cohort.pk_noise_cv = cv;
        cfg.cohort.pd_noise_cv = cv;
    }
    if let Some(d) = a.duration {
        // Sampling follows the new duration unless the config set it.
        let defaults = neuralpkpd::cohort::CohortConfig::default();
        if cfg.cohort.pk_sample_times == defaults.pk_sample_times {
            cfg.cohort.pk_sample_times = neuralpkpd::cohort::default_pk_times(d);
        }
        if cfg.cohort.pd_sample_times == defaults.pd_sample_times {
            cfg.cohort.pd_sample_times = neuralpkpd::cohort::default_pd_times(d);
        }
        cfg.cohort.duration = d;
    }
    let out = a
        .out
        .or_else(|| cfg.data_dir.clone())
        .ok_or_else(|| CliError::Usage("--out not given and no data_dir in the config".into()))?;
    cfg.cohort.validate()?;

    let cohort = generate_cohort(&cfg.cohort)?;
    let patients = group_patients(&cohort.records);
    let ids: Vec<String> = patients.iter().map(|p| p.id.clone()).collect();
    let (train_ids, _) = split_patients(&ids, cfg.split_ratio, cfg.cohort.seed)?;
    let (train, test): (Vec<Patient>, Vec<Patient>) = patients.into_iter().partition(|p| train_ids.contains(&p.id));

    std::fs::create_dir_all(&out).map_err(neuralpkpd::Error::from)?;
    let (tp, vp, tr) = (out.join("train.csv"), out.join("test.csv"), out.join("truth.csv"));
    write_dataset(&flatten_patients(&train), &tp)?;
    write_dataset(&flatten_patients(&test), &vp)?;
    write_truth(&cohort.truth, &tr)?;

    let config = json!({ "cohort": cfg.cohort, "split_ratio": cfg.split_ratio });
    let files: BTreeMap<&str, String> =
        [("train.csv", file_hash(&tp)?), ("test.csv", file_hash(&vp)?), ("truth.csv", file_hash(&tr)?)].into();
    let manifest = json!({
        "tool": "neuralpkpd",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "simulate-cohort",
        "seed": cfg.cohort.seed,
        "n_train": train.len(),
        "n_test": test.len(),
        "config_hash": config_hash(&config)?,
        "config": config,
        "files": files,
    });
    write(&out.join("manifest.json"), &(serde_json::to_string_pretty(&manifest).map_err(neuralpkpd::Error::from)? + "\n"))?;
    println!("wrote {} train / {} test patients to {}", train.len(), test.len(), out.display());
    Ok(())
}

pub fn train(cfg: RunConfig, a: TrainArgs) -> Result<(), CliError> {
    let pk_ckpt = match (a.stage, &a.pk_ckpt) {
        (StageArg::Pd, None) => return Err(CliError::Usage("--stage pd requires --pk-ckpt".into())),
        (StageArg::Pk, Some(_)) => return Err(CliError::Usage("--pk-ckpt applies to --stage pd only".into())),
        (_, p) => p.clone(),
    };
    let data = pick(a.data, &cfg.data_dir, "train.csv", "--data")?;
    let mut tc = match a.stage {
        StageArg::Pk => cfg.train_pk.clone(),
        StageArg::Pd => cfg.train_pd.clone(),
    };
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(lr) = a.lr {
        tc.lr = lr;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    if let Some(p) = a.patience {
        tc.patience = p;
    }
    tc.validate()?;
    let patients = load_patients(&data)?;

    let (epochs, log_every) = (tc.epochs, a.log_every);
    let mut observer = |epoch: usize, loss: f64| {
        if (log_every > 0 && epoch % log_every == 0) || epoch == epochs {
            eprintln!("epoch {epoch} loss {loss:.6e}");
        }
    };
    let mut inputs = vec![data.clone()];
    let (ckpt, report) = match a.stage {
        StageArg::Pk => {
            let truth = if a.sparse_pk {
                None
            } else {
                let path = a
                    .truth
                    .clone()
                    .unwrap_or_else(|| data.parent().unwrap_or(Path::new(".")).join("truth.csv"));
                need_file(&path)?;
                inputs.push(path.clone());
                Some(read_truth(&path)?)
            };
            train_pk(&patients, truth.as_deref(), &cfg.model, &tc, &mut observer)?
        }
        StageArg::Pd => {
            let path = pk_ckpt.expect("checked above");
            need_file(&path)?;
            inputs.push(path.clone());
            let pk = Checkpoint::load(&path)?;
            train_pd(&patients, &pk, &tc, &mut observer)?
        }
    };
    if report.stopped_early {
        eprintln!("stopped early after {} epochs", report.losses.len());
    }
    ckpt.save(&a.out)?;
    let config = json!({
        "stage": match a.stage { StageArg::Pk => "pk", StageArg::Pd => "pd" },
        "model": cfg.model,
        "train": tc,
        "sparse_pk": a.sparse_pk,
    });
    let ins: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    write_manifest(&manifest_path(&a.out), "train", config, &ins, &[&a.out])?;
    match report.final_loss() {
        Some(l) => println!("final loss {l:.6e}"),
        None => println!("final loss n/a (0 epochs)"),
    }
    Ok(())
}

fn scenarios(t_obs: &[f64], horizon: &[f64]) -> Result<Vec<Scenario>, CliError> {
    let h: Vec<Option<f64>> = match horizon.len() {
        0 => vec![None; t_obs.len()],
        1 => vec![Some(horizon[0]); t_obs.len()],
        n if n == t_obs.len() => horizon.iter().map(|&x| Some(x)).collect(),
        n => {
            return Err(CliError::Usage(format!(
                "--horizon takes one value or one per --t-obs ({} given, {n} horizons)",
                t_obs.len()
            )))
        }
    };
    t_obs
        .iter()
        .zip(h)
        .map(|(&t, h)| Scenario::new(t, h).map_err(|e| CliError::Usage(e.to_string())))
        .collect()
}

pub fn evaluate(cfg: RunConfig, a: EvaluateArgs) -> Result<(), CliError> {
    let sc = scenarios(&a.t_obs, &a.horizon)?;
    let data = pick(a.data, &cfg.data_dir, "test.csv", "--data")?;
    let ckpt_path = a
        .ckpt
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| CliError::Usage("--ckpt not given and no checkpoint in the config".into()))?;
    let report = pick(a.report, &cfg.reports, "report.csv", "--report")?;
    need_file(&ckpt_path)?;
    let ck = Checkpoint::load(&ckpt_path)?;
    let patients = load_patients(&data)?;
    let setup = BaselineSetup { prior: cfg.baseline_prior(), weight: 1.0 };
    let truth = match &a.oracle {
        Some(p) => {
            need_file(p)?;
            Some(read_truth(p)?)
        }
        None => None,
    };
    let preds = Predictors {
        neural: Some(&ck),
        baseline: a.baseline.then_some(&setup),
        naive: a.naive,
        oracle: truth.as_deref(),
    };
    let rows = benchmark(&patients, &preds, &sc)?;
    write(&report, &report_csv(&rows))?;

    for r in &rows {
        let mut line = format!(
            "t_obs {:>5} horizon {:>5} {:<9} n_obs {:>6} n_pred {:>6} r2 {:.4} rmse {:.3}",
            r.scenario.t_obs, r.scenario.horizon_start, r.predictor, r.n_obs, r.n_pred, r.r2, r.rmse
        );
        if a.verbose {
            line.push_str(&format!(" R2(1-SSres/SStot) {:.4}", r.r2_det));
        }
        println!("{line}");
    }
    let config = json!({
        "t_obs": a.t_obs, "horizon": a.horizon, "baseline": a.baseline, "naive": a.naive,
        "oracle": a.oracle.is_some(), "baseline_prior": cfg.baseline, "cohort": cfg.cohort,
    });
    let mut ins: Vec<&Path> = vec![&data, &ckpt_path];
    if let Some(p) = &a.oracle {
        ins.push(p);
    }
    write_manifest(&manifest_path(&report), "evaluate", config, &ins, &[&report])
}

pub fn simulate_regimen(cfg: RunConfig, a: RegimenArgs) -> Result<(), CliError> {
    let data = pick(a.data, &cfg.data_dir, "train.csv", "--data")?;
    let ckpt_path = a
        .ckpt
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| CliError::Usage("--ckpt not given and no checkpoint in the config".into()))?;
    let out = pick(a.out, &cfg.reports, "regimen.csv", "--out")?;
    need_file(&ckpt_path)?;
    let ck = Checkpoint::load(&ckpt_path)?;
    let patients = load_patients(&data)?;
    let (mut doses, default_end) = regimen_schedule(&a.regimen);
    let t_end = a.t_end.unwrap_or(default_end);
    doses.retain(|d| d.time <= t_end);
    let table = neuralpkpd::evaluation::simulate_regimen(&ck, &patients, &doses, t_end)?;
    // Render first so an SVG failure leaves no partial outputs.
    let svg = a.svg.as_ref().map(|_| quantile_svg(&table)).transpose()?;
    write(&out, &table.to_csv())?;
    let mut outs: Vec<&Path> = vec![&out];
    if let (Some(p), Some(s)) = (&a.svg, &svg) {
        write(p, s)?;
        outs.push(p);
    }
    println!(
        "simulated {} patients under every {} days x {} mg/kg x {} doses to day {t_end}",
        patients.len(),
        a.regimen.interval,
        a.regimen.dose,
        a.regimen.n_doses
    );
    let config = json!({ "regimen": { "interval": a.regimen.interval, "dose": a.regimen.dose, "n_doses": a.regimen.n_doses }, "t_end": t_end });
    write_manifest(&manifest_path(&out), "simulate-regimen", config, &[&data, &ckpt_path], &outs)
}
