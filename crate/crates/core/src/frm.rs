//! Feature rearrangement: turns an `h × w` feature grid into a `w`-long
//! sequence aligned with reading order, plus the CTC classifier.

use std::fmt;
use std::str::FromStr;

use crate::backbone::{FeatureMap, GlobalMixing};
use crate::error::{Error, Result};
use crate::nn::{attention_scale, multi_head_attention, Builder, Init, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// How the 2-D feature grid becomes a 1-D sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SequenceHead {
    /// Horizontal then vertical rearrangement.
    Frm,
    /// Mean over the height axis.
    ColumnMean,
    /// One extra global mixing block, then the height mean.
    GlobalThenMean,
}

impl SequenceHead {
    pub fn as_str(self) -> &'static str {
        match self {
            SequenceHead::Frm => "frm",
            SequenceHead::ColumnMean => "mean",
            SequenceHead::GlobalThenMean => "tf1",
        }
    }
}

impl FromStr for SequenceHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frm" => Ok(SequenceHead::Frm),
            "mean" | "none" => Ok(SequenceHead::ColumnMean),
            "tf1" => Ok(SequenceHead::GlobalThenMean),
            other => Err(Error::Config(format!("unknown sequence head {other:?}"))),
        }
    }
}

impl fmt::Display for SequenceHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SequenceOutput {
    /// `[B, w, D]`
    pub seq: Var,
    /// Horizontal attention, `[B·h·heads, w, w]`.
    pub horizontal: Option<Var>,
    /// Vertical selection weights, `[B·w, 1, h]`.
    pub vertical: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Frm {
    hq: Linear,
    hk: Linear,
    hv: Linear,
    norm1: LayerNorm,
    mlp: Mlp,
    norm2: LayerNorm,
    heads: usize,
    select: ParamId,
    vk: Linear,
    vv: Linear,
    dim: usize,
}

impl Frm {
    pub fn new<T: Scalar>(
        bld: &mut Builder<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{dim} channels not divisible into {heads} heads"
            )));
        }
        Ok(Frm {
            hq: Linear::new(bld, &format!("{name}.h.q"), dim, dim, false)?,
            hk: Linear::new(bld, &format!("{name}.h.k"), dim, dim, false)?,
            hv: Linear::new(bld, &format!("{name}.h.v"), dim, dim, false)?,
            norm1: LayerNorm::new(bld, &format!("{name}.h.norm1"), dim)?,
            mlp: Mlp::new(bld, &format!("{name}.h.mlp"), dim, mlp_ratio)?,
            norm2: LayerNorm::new(bld, &format!("{name}.h.norm2"), dim)?,
            heads,
            select: bld.param(&format!("{name}.v.select"), &[1, dim], Init::Normal(0.02), true)?,
            vk: Linear::new(bld, &format!("{name}.v.k"), dim, dim, false)?,
            vv: Linear::new(bld, &format!("{name}.v.v"), dim, dim, false)?,
            dim,
        })
    }

    /// Row-wise attention with weights shared across rows.
    /// `f`: `[B, h, w, D]` → (`[B, h, w, D]`, `[B·h·heads, w, w]`).
    pub fn horizontal<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f: Var) -> Result<(Var, Var)> {
        let s = tape.shape(f).to_vec();
        let rows = tape.reshape(f, &[s[0] * s[1], s[2], s[3]])?;
        let q = self.hq.forward(tape, store, rows)?;
        let k = self.hk.forward(tape, store, rows)?;
        let v = self.hv.forward(tape, store, rows)?;
        let (a, probs) = multi_head_attention(tape, q, k, v, self.heads)?;
        let a = tape.reshape(a, &s)?;
        let x = tape.add(a, f)?;
        let x = self.norm1.forward(tape, store, x)?;
        let y = self.mlp.forward(tape, store, x)?;
        let y = tape.add(y, x)?;
        Ok((self.norm2.forward(tape, store, y)?, probs))
    }

    /// Column-wise selection by a learned token.
    /// `fh`: `[B, h, w, D]` → (`[B, w, D]`, `[B·w, 1, h]`).
    pub fn vertical<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, fh: Var) -> Result<(Var, Var)> {
        let s = tape.shape(fh).to_vec();
        let (b, h, w, d) = (s[0], s[1], s[2], s[3]);
        let cols = tape.permute(fh, &[0, 2, 1, 3])?;
        let cols = tape.reshape(cols, &[b * w * h, d])?;
        let k = self.vk.forward(tape, store, cols)?;
        let v = self.vv.forward(tape, store, cols)?;
        let token = store.bind(tape, self.select);
        let token = tape.reshape(token, &[d, 1])?;
        let logits = tape.matmul(k, token)?;
        let logits = tape.reshape(logits, &[b * w, 1, h])?;
        let logits = tape.scale(logits, T::from_f64(attention_scale(self.dim)));
        let weights = tape.softmax(logits)?;
        let v = tape.reshape(v, &[b * w, h, d])?;
        let out = tape.bmm(weights, v, false, false, T::one())?;
        Ok((tape.reshape(out, &[b, w, d])?, weights))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f: Var) -> Result<SequenceOutput> {
        let (fh, mh) = self.horizontal(tape, store, f)?;
        let (seq, mv) = self.vertical(tape, store, fh)?;
        Ok(SequenceOutput {
            seq,
            horizontal: Some(mh),
            vertical: Some(mv),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
}

/// Mean over the grid height: `[B, h, w, D]` → `[B, w, D]`.
pub fn column_mean<T: Scalar>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    tape.mean_axis(f, 1)
}

#[derive(Clone, Debug)]
pub enum Sequencer {
    Frm(Frm),
    ColumnMean,
    GlobalThenMean(GlobalMixing),
}

impl Sequencer {
    pub fn new<T: Scalar>(
        bld: &mut Builder<T>,
        name: &str,
        kind: SequenceHead,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(match kind {
            SequenceHead::Frm => Sequencer::Frm(Frm::new(bld, name, dim, heads, mlp_ratio)?),
            SequenceHead::ColumnMean => Sequencer::ColumnMean,
            SequenceHead::GlobalThenMean => {
                Sequencer::GlobalThenMean(GlobalMixing::new(bld, &format!("{name}.tf1"), dim, heads, mlp_ratio)?)
            }
        })
    }

    pub fn kind(&self) -> SequenceHead {
        match self {
            Sequencer::Frm(_) => SequenceHead::Frm,
            Sequencer::ColumnMean => SequenceHead::ColumnMean,
            Sequencer::GlobalThenMean(_) => SequenceHead::GlobalThenMean,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: &FeatureMap,
    ) -> Result<SequenceOutput> {
        let plain = |seq| SequenceOutput {
            seq,
            horizontal: None,
            vertical: None,
        };
        match self {
            Sequencer::Frm(frm) => frm.forward(tape, store, f.var),
            Sequencer::ColumnMean => Ok(plain(column_mean(tape, f.var)?)),
            Sequencer::GlobalThenMean(block) => {
                let x = block.forward(tape, store, f.var)?;
                Ok(plain(column_mean(tape, x)?))
            }
        }
    }
}

/// Composite rearrangement matrix for one sample, diagnostic only.
///
/// `horizontal`: `[h, w, w]` (head-averaged), `vertical`: `[w, h]`.
/// Returns `[w, h·w]` where entry `(m, i·w + j)` is the weight grid cell
/// `(i, j)` contributes to output frame `m`.
pub fn effective_rearrangement(horizontal: &Tensor<f64>, vertical: &Tensor<f64>) -> Result<Tensor<f64>> {
    let hs = horizontal.shape();
    let vs = vertical.shape();
    if hs.len() != 3 || hs[1] != hs[2] || vs.len() != 2 || vs[0] != hs[1] || vs[1] != hs[0] {
        return Err(Error::dim("effective_rearrangement", hs, vs));
    }
    let (h, w) = (hs[0], hs[1]);
    let mh = horizontal.data();
    let mv = vertical.data();
    let mut out = vec![0.0; w * h * w];
    for m in 0..w {
        for i in 0..h {
            let sel = mv[m * h + i];
            for j in 0..w {
                out[m * h * w + i * w + j] = sel * mh[(i * w + m) * w + j];
            }
        }
    }
    Tensor::new(&[w, h * w], out)
}

/// Averages `[B·h·heads, w, w]` horizontal attention over heads for sample
/// `b`, giving `[h, w, w]`.
pub fn head_mean(probs: &Tensor<f64>, batch: usize, h: usize, heads: usize, b: usize) -> Result<Tensor<f64>> {
    let s = probs.shape();
    if s.len() != 3 || s[0] != batch * h * heads || s[1] != s[2] || b >= batch {
        return Err(Error::dim("head_mean", s, &[batch, h, heads]));
    }
    let w = s[1];
    let mut out = vec![0.0; h * w * w];
    for i in 0..h {
        for k in 0..heads {
            let src = &probs.data()[((b * h + i) * heads + k) * w * w..][..w * w];
            for (o, v) in out[i * w * w..(i + 1) * w * w].iter_mut().zip(src) {
                *o += v / heads as f64;
            }
        }
    }
    Tensor::new(&[h, w, w], out)
}
