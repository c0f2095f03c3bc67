//! The neural-PK/PD network: GRU encoders, the initial-condition net and a
//! forward-Euler recurrent cell with dose injection.
//!
//! Everything is built batched on a [`Graph`]; the single-patient methods are
//! thin batch-of-one wrappers, so both paths share identical arithmetic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensornet::{bidirectional, Graph, Gru, Linear, ParamStore, Tensor, Var};

use crate::dataset::PatientRecord;
use crate::dynamics::{grid_index, DoseEvent};
use crate::error::{Error, Result};
use crate::pipeline::norm::{NormStats, DOSE, PK, PLATELET, TAD, TIME};

pub const PK_FEATURES: usize = 5;
pub const PD_FEATURES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub pk_state_dim: usize,
    pub pd_state_dim: usize,
    pub pk_param_dim: usize,
    pub pd_param_dim: usize,
    pub pk_gru: usize,
    pub pd_gru: usize,
    pub ic_gru: usize,
    pub pkvf_hidden: usize,
    pub pdvf_hidden: usize,
    pub dt: f64,
    pub pk_obs_index: usize,
    pub pd_obs_index: usize,
    /// Rows with `time` below this (days) feed the initial-condition net.
    pub ic_window: f64,
    /// Multiplier on the initial output layer of both vector fields. Small
    /// values start the cell near zero dynamics so long rollouts stay bounded.
    pub vf_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            pk_state_dim: 2,
            pd_state_dim: 4,
            pk_param_dim: 4,
            pd_param_dim: 10,
            pk_gru: 20,
            pd_gru: 50,
            ic_gru: 10,
            pkvf_hidden: 32,
            pdvf_hidden: 64,
            dt: 0.25,
            pk_obs_index: 0,
            pd_obs_index: 0,
            ic_window: 21.0,
            vf_init_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let per_day = 1.0 / self.dt;
        if !(self.dt > 0.0 && self.dt <= 1.0 && (per_day - per_day.round()).abs() < 1e-9) {
            return Err(Error::Config(format!("dt {} must divide one day", self.dt)));
        }
        if self.pk_state_dim == 0 || self.pd_state_dim == 0 || self.pk_state_dim + self.pd_state_dim > 8 {
            return Err(Error::Config("state dims must be positive and sum to at most 8".into()));
        }
        if self.pk_obs_index >= self.pk_state_dim || self.pd_obs_index >= self.pd_state_dim {
            return Err(Error::Config("observation index out of range".into()));
        }
        let widths = [self.pk_param_dim, self.pd_param_dim, self.pk_gru, self.pd_gru, self.ic_gru];
        if widths.iter().chain(&[self.pkvf_hidden, self.pdvf_hidden]).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.vf_init_scale >= 0.0 && self.vf_init_scale.is_finite()) {
            return Err(Error::Config("vf_init_scale must be non-negative".into()));
        }
        if !(self.ic_window > 0.0) {
            return Err(Error::Config("ic_window must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_for(&self, t_end: f64) -> Result<usize> {
        grid_index(t_end, self.dt)
            .map(|k| k + 1)
            .ok_or(Error::DoseAlignment { time: t_end, step: self.dt })
    }
}

/// Normalized encoder rows for one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub pk_rows: Vec<[f64; PK_FEATURES]>,
    pub pd_rows: Vec<[f64; PD_FEATURES]>,
    pub ic_rows: Vec<[f64; PD_FEATURES]>,
    /// First observed platelet count, standardized (0 if none).
    pub first_platelet: f64,
}

/// Builds encoder features: tad, time, pk, pk-present, then dose (PK encoder)
/// or platelet, platelet-present (PD encoder and ICNet).
pub fn prepare_input(records: &[PatientRecord], norm: &NormStats, ic_window: f64) -> Result<ModelInput> {
    if records.is_empty() {
        return Err(Error::Empty("patient records"));
    }
    let mut pk_rows = Vec::with_capacity(records.len());
    let mut pd_rows = Vec::with_capacity(records.len());
    for r in records {
        let tad = norm.apply(TAD, r.time_after_dose);
        let time = norm.apply(TIME, r.time);
        let (pk, pk_on) = r.pk.map_or((0.0, 0.0), |v| (norm.apply(PK, v), 1.0));
        let (plt, plt_on) = r.platelet.map_or((0.0, 0.0), |v| (norm.apply(PLATELET, v), 1.0));
        let dose = norm.apply(DOSE, r.dose.unwrap_or(0.0));
        pk_rows.push([tad, time, pk, pk_on, dose]);
        pd_rows.push([tad, time, pk, pk_on, plt, plt_on]);
    }
    let mut ic_rows: Vec<_> = records
        .iter()
        .zip(&pd_rows)
        .filter(|(r, _)| r.time < ic_window)
        .map(|(_, row)| *row)
        .collect();
    if ic_rows.is_empty() {
        ic_rows.push(pd_rows[0]);
    }
    let first_platelet = records
        .iter()
        .find_map(|r| r.platelet)
        .map_or(0.0, |v| norm.apply(PLATELET, v));
    Ok(ModelInput { pk_rows, pd_rows, ic_rows, first_platelet })
}

/// A dose on the model grid in scale-only units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaledDose {
    pub step: usize,
    pub amount: f64,
}

pub fn scale_doses(doses: &[DoseEvent], norm: &NormStats, dt: f64) -> Result<Vec<ScaledDose>> {
    doses
        .iter()
        .map(|d| {
            let step = grid_index(d.time, dt).ok_or(Error::DoseAlignment { time: d.time, step: dt })?;
            if !(d.amount >= 0.0) {
                return Err(Error::data(format!("negative dose {} at t={}", d.amount, d.time)));
            }
            Ok(ScaledDose { step, amount: norm.scale_dose(d.amount) })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPatient {
    pub pk_params: Vec<f64>,
    pub pd_params: Vec<f64>,
    pub pd_init: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdeState {
    pub pk: Vec<f64>,
    pub pd: Vec<f64>,
}

/// Observable states at one grid time, model units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutRow {
    pub time: f64,
    pub pk: f64,
    pub pd: f64,
}

/// Graph handles for a batched forward pass.
pub struct Encoded {
    pub pk_params: Var,
    pub pd_params: Option<Var>,
    pub pd_init: Option<Var>,
}

pub struct Forward {
    /// `[B, T]` observed PK component.
    pub pk: Var,
    /// `[B, T]` observed PD component; absent for PK-only passes.
    pub pd: Option<Var>,
}

#[derive(Clone, Debug)]
struct Layers {
    pk_gru: Gru,
    pk_head: Linear,
    pkvf1: Linear,
    pkvf2: Linear,
    pd_gru: Gru,
    pd_head: Linear,
    ic_fwd: Gru,
    ic_bwd: Gru,
    ic_head: Linear,
    pdvf1: Linear,
    pdvf2: Linear,
}

/// Parameter names owned by the PK half of the network.
pub fn is_pk_param(name: &str) -> bool {
    name.starts_with("pk_encoder.") || name.starts_with("pkvf.")
}

#[derive(Clone, Debug)]
pub struct NeuralPkPd {
    config: ModelConfig,
    store: ParamStore,
    layers: Layers,
}

impl NeuralPkPd {
    /// Fresh weights, uniform ±1/√fan-in, from a seeded stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let pk_in = c.pk_state_dim + c.pk_param_dim;
        let pd_in = c.pd_state_dim + c.pd_param_dim + 1;
        let layers = Layers {
            pk_gru: Gru::init(&mut s, "pk_encoder.gru", PK_FEATURES, c.pk_gru, &mut rng)?,
            pk_head: Linear::init(&mut s, "pk_encoder.out", c.pk_gru, c.pk_param_dim, &mut rng)?,
            pkvf1: Linear::init(&mut s, "pkvf.l1", pk_in, c.pkvf_hidden, &mut rng)?,
            pkvf2: Linear::init(&mut s, "pkvf.l2", c.pkvf_hidden, c.pk_state_dim, &mut rng)?,
            pd_gru: Gru::init(&mut s, "pd_encoder.gru", PD_FEATURES, c.pd_gru, &mut rng)?,
            pd_head: Linear::init(&mut s, "pd_encoder.out", c.pd_gru, c.pd_param_dim, &mut rng)?,
            ic_fwd: Gru::init(&mut s, "icnet.fwd", PD_FEATURES, c.ic_gru, &mut rng)?,
            ic_bwd: Gru::init(&mut s, "icnet.bwd", PD_FEATURES, c.ic_gru, &mut rng)?,
            ic_head: Linear::init(&mut s, "icnet.out", 2 * c.ic_gru, 1, &mut rng)?,
            pdvf1: Linear::init(&mut s, "pdvf.l1", pd_in, c.pdvf_hidden, &mut rng)?,
            pdvf2: Linear::init(&mut s, "pdvf.l2", c.pdvf_hidden, c.pd_state_dim, &mut rng)?,
        };
        for layer in [&layers.pkvf2, &layers.pdvf2] {
            for id in layer.ids() {
                let mut t = s.value(id).clone();
                t.data_mut().iter_mut().for_each(|v| *v *= c.vf_init_scale);
                s.set_value(id, t)?;
            }
        }
        Ok(NeuralPkPd { config, store: s, layers })
    }

    /// Wraps an existing store, checking every expected tensor is present
    /// with the shape the config implies.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let reference = NeuralPkPd::new(config.clone(), 0)?;
        for (_, e) in reference.store.iter() {
            let id = store
                .id(&e.name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor `{}`", e.name)))?;
            let got = store.value(id).shape();
            if got != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    e.name,
                    got,
                    e.value.shape()
                )));
            }
        }
        if store.len() != reference.store.len() {
            return Err(Error::Checkpoint("checkpoint carries unexpected tensors".into()));
        }
        let layers = Layers {
            pk_gru: Gru::bind(&store, "pk_encoder.gru")?,
            pk_head: Linear::bind(&store, "pk_encoder.out")?,
            pkvf1: Linear::bind(&store, "pkvf.l1")?,
            pkvf2: Linear::bind(&store, "pkvf.l2")?,
            pd_gru: Gru::bind(&store, "pd_encoder.gru")?,
            pd_head: Linear::bind(&store, "pd_encoder.out")?,
            ic_fwd: Gru::bind(&store, "icnet.fwd")?,
            ic_bwd: Gru::bind(&store, "icnet.bwd")?,
            ic_head: Linear::bind(&store, "icnet.out")?,
            pdvf1: Linear::bind(&store, "pdvf.l1")?,
            pdvf2: Linear::bind(&store, "pdvf.l2")?,
        };
        Ok(NeuralPkPd { config, store, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    /// Sets the trainable flag of the PK half and its complement.
    pub fn set_stage(&mut self, train_pk: bool, train_pd: bool) {
        let ids: Vec<_> = self.store.iter().map(|(id, e)| (id, is_pk_param(&e.name))).collect();
        for (id, pk) in ids {
            self.store.set_trainable(id, if pk { train_pk } else { train_pd });
        }
    }

    // ---- batched graph construction ----

    fn sequence_inputs<const F: usize>(g: &mut Graph, seqs: &[&[[f64; F]]]) -> Result<(Vec<Var>, Vec<Vec<f64>>)> {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if len == 0 || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Empty("encoder rows"));
        }
        let b = seqs.len();
        let mut steps = Vec::with_capacity(len);
        let mut masks = Vec::with_capacity(len);
        for t in 0..len {
            let mut data = vec![0.0; b * F];
            let mut mask = vec![0.0; b];
            for (i, s) in seqs.iter().enumerate() {
                if let Some(row) = s.get(t) {
                    data[i * F..(i + 1) * F].copy_from_slice(row);
                    mask[i] = 1.0;
                }
            }
            steps.push(g.input(Tensor::matrix(b, F, data)?));
            masks.push(mask);
        }
        Ok((steps, masks))
    }

    pub fn encode_pk_graph(&self, g: &mut Graph, inputs: &[&ModelInput]) -> Result<Var> {
        let seqs: Vec<&[[f64; PK_FEATURES]]> = inputs.iter().map(|i| i.pk_rows.as_slice()).collect();
        let (steps, masks) = Self::sequence_inputs(g, &seqs)?;
        let h = self.layers.pk_gru.sequence(g, &steps, Some(&masks))?;
        Ok(self.layers.pk_head.forward(g, h)?)
    }

    pub fn encode_pd_graph(&self, g: &mut Graph, inputs: &[&ModelInput]) -> Result<Var> {
        let seqs: Vec<&[[f64; PD_FEATURES]]> = inputs.iter().map(|i| i.pd_rows.as_slice()).collect();
        let (steps, masks) = Self::sequence_inputs(g, &seqs)?;
        let h = self.layers.pd_gru.sequence(g, &steps, Some(&masks))?;
        Ok(self.layers.pd_head.forward(g, h)?)
    }

    /// `tile(first platelet) + tile(ICNet scalar)`, shape `[B, pd_state_dim]`.
    pub fn initial_pd_graph(&self, g: &mut Graph, inputs: &[&ModelInput]) -> Result<Var> {
        let seqs: Vec<&[[f64; PD_FEATURES]]> = inputs.iter().map(|i| i.ic_rows.as_slice()).collect();
        let (steps, masks) = Self::sequence_inputs(g, &seqs)?;
        let h = bidirectional(g, &self.layers.ic_fwd, &self.layers.ic_bwd, &steps, Some(&masks))?;
        let scalar = self.layers.ic_head.forward(g, h)?;
        let n = self.config.pd_state_dim;
        let correction = g.tile_cols(scalar, n)?;
        let first = g.input(Tensor::matrix(inputs.len(), 1, inputs.iter().map(|i| i.first_platelet).collect())?);
        let base = g.tile_cols(first, n)?;
        Ok(g.add(base, correction)?)
    }

    pub fn encode_graph(&self, g: &mut Graph, inputs: &[&ModelInput], with_pd: bool) -> Result<Encoded> {
        let pk_params = self.encode_pk_graph(g, inputs)?;
        if !with_pd {
            return Ok(Encoded { pk_params, pd_params: None, pd_init: None });
        }
        Ok(Encoded {
            pk_params,
            pd_params: Some(self.encode_pd_graph(g, inputs)?),
            pd_init: Some(self.initial_pd_graph(g, inputs)?),
        })
    }

    pub fn pk_vf_graph(&self, g: &mut Graph, pk: Var, pk_params: Var) -> Result<Var> {
        let x = g.concat_cols(&[pk, pk_params])?;
        let h = self.layers.pkvf1.forward(g, x)?;
        let h = g.softplus(h);
        Ok(self.layers.pkvf2.forward(g, h)?)
    }

    pub fn pd_vf_graph(&self, g: &mut Graph, pd: Var, pd_params: Var, cp: Var) -> Result<Var> {
        let x = g.concat_cols(&[pd, pd_params, cp])?;
        let h = self.layers.pdvf1.forward(g, x)?;
        let h = g.selu(h);
        Ok(self.layers.pdvf2.forward(g, h)?)
    }

    /// Injects `dose` (if any) and returns the post-injection state together
    /// with the Euler-advanced one.
    pub fn step_graph(
        &self,
        g: &mut Graph,
        pk: Var,
        pd: Option<Var>,
        enc: &Encoded,
        dose: Option<Var>,
    ) -> Result<((Var, Option<Var>), (Var, Option<Var>))> {
        let dt = self.config.dt;
        let s_pk = match dose {
            Some(d) => g.add(pk, d)?,
            None => pk,
        };
        let vf = self.pk_vf_graph(g, s_pk, enc.pk_params)?;
        let next_pk = g.add_scaled(s_pk, vf, dt)?;
        let next_pk = g.relu(next_pk);
        let next_pd = match (pd, enc.pd_params) {
            (Some(pd), Some(pdp)) => {
                let cp = g.slice_cols(s_pk, self.config.pk_obs_index, 1)?;
                let vf = self.pd_vf_graph(g, pd, pdp, cp)?;
                Some(g.add_scaled(pd, vf, dt)?)
            }
            _ => None,
        };
        Ok(((s_pk, pd), (next_pk, next_pd)))
    }

    /// Unrolls the cell for `n_steps` grid points from a zero PK state.
    /// Row `b` of the outputs belongs to `doses[b]`.
    pub fn rollout_graph(&self, g: &mut Graph, enc: &Encoded, doses: &[&[ScaledDose]], n_steps: usize) -> Result<Forward> {
        let c = &self.config;
        let b = doses.len();
        if n_steps == 0 {
            return Err(Error::Empty("rollout grid"));
        }
        let mut by_step: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_steps];
        for (i, ds) in doses.iter().enumerate() {
            for d in ds.iter() {
                if d.step < n_steps {
                    by_step[d.step].push((i, d.amount));
                }
            }
        }
        let mut pk = g.input(Tensor::zeros(&[b, c.pk_state_dim]));
        let mut pd = enc.pd_init;
        let mut pk_out = Vec::with_capacity(n_steps);
        let mut pd_out = Vec::with_capacity(n_steps);
        for (k, step_doses) in by_step.iter().enumerate() {
            // The output at a grid time is the state entering that step, so a
            // dose given at `t` first shows at `t + dt`.
            pk_out.push(g.slice_cols(pk, c.pk_obs_index, 1)?);
            if let Some(pd) = pd {
                pd_out.push(g.slice_cols(pd, c.pd_obs_index, 1)?);
            }
            if k + 1 == n_steps {
                break;
            }
            let dose = if step_doses.is_empty() {
                None
            } else {
                let mut data = vec![0.0; b * c.pk_state_dim];
                for &(i, a) in step_doses {
                    data[i * c.pk_state_dim + c.pk_obs_index] += a;
                }
                Some(g.input(Tensor::matrix(b, c.pk_state_dim, data)?))
            };
            let (_, (npk, npd)) = self.step_graph(g, pk, pd, enc, dose)?;
            pk = npk;
            pd = npd;
        }
        let pk = g.concat_cols(&pk_out)?;
        let pd = if pd_out.is_empty() { None } else { Some(g.concat_cols(&pd_out)?) };
        Ok(Forward { pk, pd })
    }

    /// Encode and unroll a batch in one graph.
    pub fn forward(
        &self,
        g: &mut Graph,
        inputs: &[&ModelInput],
        doses: &[&[ScaledDose]],
        n_steps: usize,
        with_pd: bool,
    ) -> Result<Forward> {
        let enc = self.encode_graph(g, inputs, with_pd)?;
        self.rollout_graph(g, &enc, doses, n_steps)
    }

    // ---- single-patient API ----

    fn one_row(g: &Graph, v: Var) -> Vec<f64> {
        g.value(v).row_slice(0).to_vec()
    }

    pub fn encode_pk(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let v = self.encode_pk_graph(&mut g, &[input])?;
        Ok(Self::one_row(&g, v))
    }

    pub fn encode_pd(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let v = self.encode_pd_graph(&mut g, &[input])?;
        Ok(Self::one_row(&g, v))
    }

    pub fn estimate_initial_pd(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let v = self.initial_pd_graph(&mut g, &[input])?;
        Ok(Self::one_row(&g, v))
    }

    pub fn encode(&self, input: &ModelInput) -> Result<EncodedPatient> {
        let mut g = Graph::new(&self.store);
        let e = self.encode_graph(&mut g, &[input], true)?;
        Ok(EncodedPatient {
            pk_params: Self::one_row(&g, e.pk_params),
            pd_params: Self::one_row(&g, e.pd_params.expect("pd requested")),
            pd_init: Self::one_row(&g, e.pd_init.expect("pd requested")),
        })
    }

    fn enc_inputs(&self, g: &mut Graph, enc: &EncodedPatient) -> Result<Encoded> {
        let c = &self.config;
        let check = |v: &[f64], n: usize, what: &str| {
            if v.len() != n {
                Err(Error::Tensor(tensornet::Error::Shape {
                    op: "encoded patient",
                    detail: format!("{what} has {} entries, expected {n}", v.len()),
                }))
            } else {
                Ok(())
            }
        };
        check(&enc.pk_params, c.pk_param_dim, "pk_params")?;
        check(&enc.pd_params, c.pd_param_dim, "pd_params")?;
        check(&enc.pd_init, c.pd_state_dim, "pd_init")?;
        Ok(Encoded {
            pk_params: g.input(Tensor::row(enc.pk_params.clone())),
            pd_params: Some(g.input(Tensor::row(enc.pd_params.clone()))),
            pd_init: Some(g.input(Tensor::row(enc.pd_init.clone()))),
        })
    }

    pub fn pk_vf(&self, pk_state: &[f64], pk_params: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let s = g.input(Tensor::row(pk_state.to_vec()));
        let p = g.input(Tensor::row(pk_params.to_vec()));
        let v = self.pk_vf_graph(&mut g, s, p)?;
        Ok(Self::one_row(&g, v))
    }

    pub fn pd_vf(&self, pd_state: &[f64], pd_params: &[f64], cp: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let s = g.input(Tensor::row(pd_state.to_vec()));
        let p = g.input(Tensor::row(pd_params.to_vec()));
        let cp = g.input(Tensor::row(vec![cp]));
        let v = self.pd_vf_graph(&mut g, s, p, cp)?;
        Ok(Self::one_row(&g, v))
    }

    pub fn ode_step(&self, state: &OdeState, enc: &EncodedPatient, dose_now: f64) -> Result<OdeState> {
        if !(dose_now >= 0.0) {
            return Err(Error::data(format!("dose {dose_now} must be non-negative")));
        }
        let mut g = Graph::new(&self.store);
        let e = self.enc_inputs(&mut g, enc)?;
        let pk = g.input(Tensor::row(state.pk.clone()));
        let pd = g.input(Tensor::row(state.pd.clone()));
        let dose = (dose_now != 0.0).then(|| {
            let mut d = vec![0.0; self.config.pk_state_dim];
            d[self.config.pk_obs_index] = dose_now;
            g.input(Tensor::row(d))
        });
        let (_, (npk, npd)) = self.step_graph(&mut g, pk, Some(pd), &e, dose)?;
        let out = OdeState {
            pk: Self::one_row(&g, npk),
            pd: Self::one_row(&g, npd.expect("pd present")),
        };
        if out.pk.iter().chain(&out.pd).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite ODE state".into()));
        }
        Ok(out)
    }

    /// Observable PK and PD at every grid time in `[0, t_end]`, model units.
    pub fn rollout(&self, enc: &EncodedPatient, doses: &[ScaledDose], t_end: f64) -> Result<Vec<RolloutRow>> {
        let n = self.config.steps_for(t_end)?;
        if let Some(d) = doses.iter().find(|d| d.step >= n) {
            return Err(Error::data(format!("dose at step {} lies beyond t_end {t_end}", d.step)));
        }
        let mut g = Graph::new(&self.store);
        let e = self.enc_inputs(&mut g, enc)?;
        let f = self.rollout_graph(&mut g, &e, &[doses], n)?;
        collect_rows(&g, &f, 0, n, self.config.dt)
    }
}

/// Reads row `b` of a forward pass back as `(time, pk, pd)` triples.
pub fn collect_rows(g: &Graph, f: &Forward, b: usize, n: usize, dt: f64) -> Result<Vec<RolloutRow>> {
    let pk = g.value(f.pk).row_slice(b);
    let pd = f.pd.map(|v| g.value(v).row_slice(b));
    let rows: Vec<RolloutRow> = (0..n)
        .map(|k| RolloutRow {
            time: k as f64 * dt,
            pk: pk[k],
            pd: pd.map_or(f64::NAN, |p| p[k]),
        })
        .collect();
    if rows.iter().any(|r| !r.pk.is_finite() || (f.pd.is_some() && !r.pd.is_finite())) {
        return Err(Error::Numeric("non-finite rollout".into()));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm() -> NormStats {
        NormStats { means: [5.0, 40.0, 30.0, 200.0, 0.3], sds: [5.0, 35.0, 25.0, 40.0, 1.0] }
    }

    fn records(platelet_shift: f64, dose: f64) -> Vec<PatientRecord> {
        let mk = |t: f64, tad: f64, pk: Option<f64>, plt: Option<f64>, d: Option<f64>| PatientRecord {
            patient_id: "A".into(),
            time_after_dose: tad,
            time: t,
            pk,
            platelet: plt.map(|v| v + platelet_shift),
            dose: d,
        };
        vec![
            mk(0.0, 0.0, Some(80.0), Some(210.0), Some(dose)),
            mk(1.0, 1.0, Some(50.0), None, None),
            mk(4.0, 4.0, Some(30.0), Some(180.0), None),
            mk(8.0, 8.0, None, Some(120.0), None),
            mk(21.0, 0.0, Some(85.0), Some(200.0), Some(dose)),
        ]
    }

    fn model() -> NeuralPkPd {
        NeuralPkPd::new(ModelConfig::default(), 3).unwrap()
    }

    #[test]
    fn pk_encoder_ignores_platelets() {
        let m = model();
        let a = prepare_input(&records(0.0, 3.6), &norm(), 21.0).unwrap();
        let b = prepare_input(&records(-55.0, 3.6), &norm(), 21.0).unwrap();
        assert_eq!(m.encode_pk(&a).unwrap(), m.encode_pk(&b).unwrap());
        assert_ne!(m.encode_pd(&a).unwrap(), m.encode_pd(&b).unwrap());
    }

    #[test]
    fn pd_encoder_ignores_dose_column() {
        let m = model();
        let a = prepare_input(&records(0.0, 3.6), &norm(), 21.0).unwrap();
        let b = prepare_input(&records(0.0, 2.4), &norm(), 21.0).unwrap();
        assert_eq!(m.encode_pd(&a).unwrap(), m.encode_pd(&b).unwrap());
        assert_ne!(m.encode_pk(&a).unwrap(), m.encode_pk(&b).unwrap());
    }

    #[test]
    fn empty_input_rejected() {
        assert!(prepare_input(&[], &norm(), 21.0).is_err());
        let m = model();
        let empty = ModelInput { pk_rows: vec![], pd_rows: vec![], ic_rows: vec![], first_platelet: 0.0 };
        assert!(m.encode_pk(&empty).is_err());
    }

    #[test]
    fn zero_icnet_gives_tiled_first_platelet() {
        let mut m = model();
        let ids: Vec<_> = m.store().iter().filter(|(_, e)| e.name.starts_with("icnet.out")).map(|(id, e)| (id, e.value.shape().to_vec())).collect();
        for (id, shape) in ids {
            m.store_mut().set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let inp = prepare_input(&records(0.0, 3.6), &norm(), 21.0).unwrap();
        let z = norm().apply(PLATELET, 210.0);
        assert_eq!(m.estimate_initial_pd(&inp).unwrap(), vec![z; 4]);
    }

    #[test]
    fn initial_pd_components_equal() {
        let m = model();
        let inp = prepare_input(&records(0.0, 3.6), &norm(), 21.0).unwrap();
        let v = m.estimate_initial_pd(&inp).unwrap();
        assert!(v.iter().all(|&x| x == v[0]));
    }

    fn zero_vf(m: &mut NeuralPkPd) {
        let ids: Vec<_> = m
            .store()
            .iter()
            .filter(|(_, e)| e.name.starts_with("pkvf.l2") || e.name.starts_with("pdvf.l2"))
            .map(|(id, e)| (id, e.value.shape().to_vec()))
            .collect();
        for (id, shape) in ids {
            m.store_mut().set_value(id, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn injection_with_zero_vector_fields() {
        let mut m = model();
        zero_vf(&mut m);
        let enc = EncodedPatient { pk_params: vec![0.1; 4], pd_params: vec![0.2; 10], pd_init: vec![0.0; 4] };
        let s = OdeState { pk: vec![0.5, 0.7], pd: vec![0.1, -0.2, 0.3, 0.4] };
        let n = m.ode_step(&s, &enc, 1.25).unwrap();
        assert_eq!(n.pk, vec![0.5 + 1.25, 0.7]);
        assert_eq!(n.pd, s.pd);
    }

    #[test]
    fn relu_clamps_negative_components() {
        let mut m = model();
        zero_vf(&mut m);
        let id = m.store().id("pkvf.l2.b").unwrap();
        m.store_mut().set_value(id, Tensor::vector(vec![-100.0, 1.0])).unwrap();
        let enc = EncodedPatient { pk_params: vec![0.0; 4], pd_params: vec![0.0; 10], pd_init: vec![0.0; 4] };
        let s = OdeState { pk: vec![1.0, 1.0], pd: vec![0.0; 4] };
        let n = m.ode_step(&s, &enc, 0.0).unwrap();
        assert_eq!(n.pk[0], 0.0);
        assert_eq!(n.pk[1], 1.0 + 0.25);
    }

    #[test]
    fn single_step_matches_hand_rolled_mlp() {
        let m = model();
        let enc = EncodedPatient { pk_params: vec![0.0; 4], pd_params: vec![0.0; 10], pd_init: vec![0.0; 4] };
        let s = OdeState { pk: vec![0.0; 2], pd: vec![0.0; 4] };
        let n = m.ode_step(&s, &enc, 0.0).unwrap();
        // With a zero input the first layer reduces to its bias.
        let st = m.store();
        let b1 = st.value(st.id("pkvf.l1.b").unwrap()).data().to_vec();
        let w2 = st.value(st.id("pkvf.l2.w").unwrap()).clone();
        let b2 = st.value(st.id("pkvf.l2.b").unwrap()).data().to_vec();
        for i in 0..2 {
            let mut acc = b2[i];
            for (j, &bj) in b1.iter().enumerate() {
                let sp = if bj > 0.0 { bj + (-bj).exp().ln_1p() } else { bj.exp().ln_1p() };
                acc += w2.get2(i, j) * sp;
            }
            let expect = (0.25 * acc).max(0.0);
            assert!((n.pk[i] - expect).abs() < 1e-14, "{} vs {}", n.pk[i], expect);
        }
    }

    #[test]
    fn rollout_zero_horizon_returns_initial_state() {
        let m = model();
        let enc = EncodedPatient { pk_params: vec![0.3; 4], pd_params: vec![0.1; 10], pd_init: vec![-0.4; 4] };
        let r = m.rollout(&enc, &[], 0.0).unwrap();
        assert_eq!(r, vec![RolloutRow { time: 0.0, pk: 0.0, pd: -0.4 }]);
        // A dose at the last grid point has not yet entered the output.
        let dosed = m.rollout(&enc, &[ScaledDose { step: 0, amount: 2.0 }], 0.0).unwrap();
        assert_eq!(dosed, r);
        let later = m.rollout(&enc, &[ScaledDose { step: 0, amount: 2.0 }], 0.25).unwrap();
        assert!(later[1].pk > 0.0);
    }

    #[test]
    fn dose_port_changes_pk_and_stays_non_negative() {
        let m = model();
        let inp = prepare_input(&records(0.0, 3.6), &norm(), 21.0).unwrap();
        let enc = m.encode(&inp).unwrap();
        let q3w: Vec<DoseEvent> = (0..2).map(|i| DoseEvent { time: 21.0 * i as f64, amount: 3.6 }).collect();
        let q1w: Vec<DoseEvent> = (0..6).map(|i| DoseEvent { time: 7.0 * i as f64, amount: 2.4 }).collect();
        let a = m.rollout(&enc, &scale_doses(&q3w, &norm(), 0.25).unwrap(), 42.0).unwrap();
        let b = m.rollout(&enc, &scale_doses(&q1w, &norm(), 0.25).unwrap(), 42.0).unwrap();
        assert_eq!(a.len(), 169);
        assert_ne!(a, b);
        assert!(a.iter().chain(&b).all(|r| r.pk >= 0.0));
    }

    #[test]
    fn misaligned_dose_rejected() {
        let d = [DoseEvent { time: 1.1, amount: 1.0 }];
        assert!(matches!(scale_doses(&d, &norm(), 0.25), Err(Error::DoseAlignment { .. })));
    }

    #[test]
    fn deterministic_outputs() {
        let a = model();
        let b = model();
        let inp = prepare_input(&records(0.0, 3.6), &norm(), 21.0).unwrap();
        assert_eq!(a.encode(&inp).unwrap(), b.encode(&inp).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { dt: 0.3, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { pk_state_dim: 4, pd_state_dim: 5, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { dt: 0.5, ..Default::default() }.validate().is_ok());
    }
}
