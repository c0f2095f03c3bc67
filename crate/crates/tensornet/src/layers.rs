//! Parameterised layers: dense `Linear` and the GRU cell.
//!
//! Layers only hold [`ParamId`]s; weights live in a [`ParamStore`] so that a
//! loaded checkpoint and a freshly initialised model share one code path.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, GruVars, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Uniform `(−a, a)` tensor with `a = 1/√fan_in`.
pub fn uniform_init<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut R) -> Result<Self> {
        let w = store.insert(format!("{name}.w"), uniform_init(rng, &[n_out, n_in], n_in), true)?;
        let b = store.insert(format!("{name}.b"), uniform_init(rng, &[n_out], n_in), true)?;
        Ok(Self { w, b, n_in, n_out })
    }

    /// Resolves an existing layer from the store by name.
    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        let w = store.id(&format!("{name}.w"))?;
        let b = store.id(&format!("{name}.b"))?;
        let shape = store.value(w).shape();
        if shape.len() != 2 || store.value(b).shape() != [shape[0]] {
            return shape_err("Linear::bind", format!("`{name}` has inconsistent shapes"));
        }
        Ok(Self {
            w,
            b,
            n_in: shape[1],
            n_out: shape[0],
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, Some(b))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

const GRU_PARTS: [&str; 9] = ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"];

#[derive(Clone, Copy, Debug)]
pub struct Gru {
    ids: [ParamId; 9],
    pub n_in: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, n_in: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut ids = Vec::with_capacity(9);
        for part in GRU_PARTS {
            let (shape, fan_in) = match &part[..1] {
                "w" => (vec![hidden, n_in], n_in),
                "u" => (vec![hidden, hidden], hidden),
                _ => (vec![hidden], hidden),
            };
            let t = uniform_init(rng, &shape, fan_in);
            ids.push(store.insert(format!("{name}.{part}"), t, true)?);
        }
        Ok(Self {
            ids: ids.try_into().expect("nine parts"),
            n_in,
            hidden,
        })
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        let mut ids = Vec::with_capacity(9);
        for part in GRU_PARTS {
            ids.push(store.id(&format!("{name}.{part}"))?);
        }
        let ids: [ParamId; 9] = ids.try_into().expect("nine parts");
        let w_shape = store.value(ids[0]).shape();
        if w_shape.len() != 2 {
            return shape_err("Gru::bind", format!("`{name}.w_z` must be 2-D"));
        }
        Ok(Self {
            ids,
            n_in: w_shape[1],
            hidden: w_shape[0],
        })
    }

    pub fn ids(&self) -> [ParamId; 9] {
        self.ids
    }

    pub fn vars(&self, g: &mut Graph) -> GruVars {
        let v: Vec<Var> = self.ids.iter().map(|&id| g.param(id)).collect();
        GruVars {
            w_z: v[0],
            u_z: v[1],
            b_z: v[2],
            w_r: v[3],
            u_r: v[4],
            b_r: v[5],
            w_h: v[6],
            u_h: v[7],
            b_h: v[8],
        }
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var, mask: Option<&[f64]>) -> Result<Var> {
        let p = self.vars(g);
        g.gru_step(x, h, &p, mask)
    }

    /// Scans a padded batch of sequences from a zero state and returns the
    /// final state `[B, hidden]`. `steps[t]` is `[B, n_in]`; `masks[t][b]` is
    /// zero where sequence `b` has no row at step `t`.
    pub fn sequence(&self, g: &mut Graph, steps: &[Var], masks: Option<&[Vec<f64>]>) -> Result<Var> {
        let Some(first) = steps.first() else {
            return Err(Error::EmptySequence("gru sequence"));
        };
        let batch = g.value(*first).rows();
        let p = self.vars(g);
        let mut h = g.input(Tensor::zeros(&[batch, self.hidden]));
        for (t, &x) in steps.iter().enumerate() {
            h = g.gru_step(x, h, &p, masks.map(|m| m[t].as_slice()))?;
        }
        Ok(h)
    }
}

/// Forward scan, then a reverse scan with `backward`, final states
/// concatenated `[B, 2·hidden]`.
///
/// Sequences are right-padded; the reverse scan walks each one from its own
/// last row, so padding never touches a live state.
pub fn bidirectional(
    g: &mut Graph,
    forward: &Gru,
    backward: &Gru,
    steps: &[Var],
    masks: Option<&[Vec<f64>]>,
) -> Result<Var> {
    let hf = forward.sequence(g, steps, masks)?;
    let rev_steps: Vec<Var> = steps.iter().rev().copied().collect();
    let rev_masks: Option<Vec<Vec<f64>>> = masks.map(|m| m.iter().rev().cloned().collect());
    let hb = backward.sequence(g, &rev_steps, rev_masks.as_deref())?;
    g.concat_cols(&[hf, hb])
}
