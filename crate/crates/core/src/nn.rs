//! Named parameter storage and the small layer vocabulary the model uses.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Scalar, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Truncated normal (±2σ) with σ = `gain / sqrt(fan_in)`.
    Scaled {
        fan_in: usize,
        gain: f64,
    },
    Normal(f64),
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether AdamW applies weight decay (false for norms and biases).
    pub decay: bool,
}

/// Ordered, named parameter set.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Returns the existing parameter called `name`, or creates it.
    pub fn ensure(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        decay: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        if let Some(&i) = self.index.get(name) {
            let have = self.entries[i].tensor.shape();
            if have != shape {
                return Err(Error::dim("parameter", have, shape));
            }
            return Ok(ParamId(i));
        }
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Ones => vec![T::one(); numel],
            Init::Scaled { fan_in, gain } => {
                let sd = gain / (fan_in.max(1) as f64).sqrt();
                truncated_normal(numel, sd, rng)
            }
            Init::Normal(sd) => truncated_normal(numel, sd, rng),
        };
        self.insert(name, Tensor::new(shape, data)?, decay)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, decay: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor: tensor.with_grad(),
            decay,
        });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.param(id.0, &self.entries[id.0].tensor)
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Adds the tape's gradients into every bound parameter's grad slot.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, grads: &crate::tensor::Gradients<T>) -> Result<()> {
        let mut bound: Vec<(usize, Var)> = tape.bound_params().collect();
        bound.sort();
        for (id, var) in bound {
            if let Some(g) = grads.get(var) {
                self.entries[id].tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Copy without the parameters whose names start with `prefix`.
    pub fn without_prefix(&self, prefix: &str) -> Self {
        let mut out = ParamStore::new();
        for e in self.entries.iter().filter(|e| !e.name.starts_with(prefix)) {
            out.insert(&e.name, e.tensor.clone(), e.decay)
                .expect("names are unique in the source store");
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            let mut t = e.tensor.cast::<U>();
            t.grad = None;
            out.insert(&e.name, t, e.decay).expect("unique names");
        }
        out
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.iter().any(|e| e.name.starts_with(prefix))
    }
}

fn truncated_normal<T: Scalar>(n: usize, sd: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    if sd == 0.0 {
        return vec![T::zero(); n];
    }
    let dist = Normal::new(0.0, sd).expect("finite positive sd");
    (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * sd {
                break T::from_f64(v);
            }
        })
        .collect()
}

/// Helper carrying the store and RNG while a module tree is built.
pub struct Builder<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder { store, rng }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, decay: bool) -> Result<ParamId> {
        self.store.ensure(name, shape, init, decay, self.rng)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(bld: &mut Builder<T>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let w = bld.param(
            &format!("{name}.weight"),
            &[in_dim, out_dim],
            Init::Scaled {
                fan_in: in_dim,
                gain: 1.0,
            },
            true,
        )?;
        let b = if bias {
            Some(bld.param(&format!("{name}.bias"), &[out_dim], Init::Zeros, false)?)
        } else {
            None
        };
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.bind(tape, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = store.bind(tape, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(bld: &mut Builder<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: bld.param(&format!("{name}.gain"), &[dim], Init::Ones, false)?,
            bias: bld.param(&format!("{name}.bias"), &[dim], Init::Zeros, false)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = store.bind(tape, self.gain);
        let b = store.bind(tape, self.bias);
        tape.layer_norm(x, g, b, T::from_f64(LN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeometry,
    pub out_c: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        bld: &mut Builder<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        geom: ConvGeometry,
        bias: bool,
    ) -> Result<Self> {
        let g = geom.groups;
        if g == 0 || !in_c.is_multiple_of(g) || !out_c.is_multiple_of(g) {
            return Err(Error::Config(format!(
                "conv {name}: {in_c}->{out_c} channels not divisible into {g} groups"
            )));
        }
        let patch = geom.kernel.0 * geom.kernel.1 * in_c / g;
        let w = bld.param(
            &format!("{name}.weight"),
            &[g, patch, out_c / g],
            Init::Scaled {
                fan_in: patch,
                gain: 1.0,
            },
            true,
        )?;
        let b = if bias {
            Some(bld.param(&format!("{name}.bias"), &[out_c], Init::Zeros, false)?)
        } else {
            None
        };
        Ok(Conv { w, b, geom, out_c })
    }

    /// `x`: `[B, H, W, C]` → `[B, H', W', out_c]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.bind(tape, self.w);
        let b = self.b.map(|b| store.bind(tape, b));
        tape.conv2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(bld: &mut Builder<T>, name: &str, dim: usize, ratio: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(bld, &format!("{name}.fc1"), dim, dim * ratio, true)?,
            fc2: Linear::new(bld, &format!("{name}.fc2"), dim * ratio, dim, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// Logit scale applied inside every attention step.
pub fn attention_scale(head_dim: usize) -> f64 {
    if cfg!(feature = "unscaled-attention") {
        1.0
    } else {
        1.0 / (head_dim as f64).sqrt()
    }
}

/// Scaled dot-product attention over independent sequences.
///
/// `q`: `[S, Lq, D]`, `k`/`v`: `[S, Lk, D]`. Returns the `[S, Lq, D]`
/// output and the `[S·heads, Lq, Lk]` attention probabilities.
pub fn multi_head_attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    let sq = tape.shape(q).to_vec();
    let sk = tape.shape(k).to_vec();
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] || tape.shape(v) != &sk[..] {
        return Err(Error::dim("attention", &sq, &sk));
    }
    let (s, lq, d) = (sq[0], sq[1], sq[2]);
    let lk = sk[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{d} channels not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let scale = T::from_f64(attention_scale(dh));
    let split = |tape: &mut Tape<T>, x: Var, l: usize| -> Result<Var> {
        if heads == 1 {
            return Ok(x);
        }
        let x = tape.reshape(x, &[s, l, heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[s * heads, l, dh])
    };
    let qh = split(tape, q, lq)?;
    let kh = split(tape, k, lk)?;
    let vh = split(tape, v, lk)?;
    let logits = tape.bmm(qh, kh, false, true, scale)?;
    let probs = tape.softmax(logits)?;
    let out = tape.bmm(probs, vh, false, false, T::one())?;
    let out = if heads == 1 {
        out
    } else {
        let o = tape.reshape(out, &[s, heads, lq, dh])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        tape.reshape(o, &[s, lq, d])?
    };
    Ok((out, probs))
}

/// Per-row softmax cross-entropy. `logits`: `[N, C]` → losses `[N]`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::dim("cross_entropy", &s, &[targets.len()]));
    }
    let c = s[1];
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Input(format!("target class {bad} out of range for {c} classes")));
    }
    let x = tape.data(logits);
    let mut losses = Vec::with_capacity(targets.len());
    let mut jac = vec![T::zero(); x.len()];
    for (r, &t) in targets.iter().enumerate() {
        let row = &x[r * c..(r + 1) * c];
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        losses.push(lse - row[t]);
        let g = &mut jac[r * c..(r + 1) * c];
        for (gk, &v) in g.iter_mut().zip(row) {
            *gk = (v - lse).exp();
        }
        g[t] -= T::one();
    }
    tape.rowwise_loss(logits, losses, jac)
}
