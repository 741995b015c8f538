//! Three-stage visual encoder built from local (grouped-conv) and global
//! (self-attention) mixing blocks. No positional encoding is used anywhere.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, Builder, Conv, LayerNorm, Linear, Mlp, ParamStore};
use crate::tensor::{ConvGeometry, Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Tiny,
    Small,
    Base,
    /// Desk-scale configuration for CPU training and gradient checks.
    Nano,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::Small => "small",
            Variant::Base => "base",
            Variant::Nano => "nano",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" | "t" => Ok(Variant::Tiny),
            "small" | "s" => Ok(Variant::Small),
            "base" | "b" => Ok(Variant::Base),
            "nano" => Ok(Variant::Nano),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mixer {
    Local,
    Global,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub dims: [usize; 3],
    pub depths: [usize; 3],
    pub heads: [usize; 3],
    /// One entry per block, stages concatenated.
    pub permutation: Vec<Mixer>,
    pub mlp_ratio: usize,
}

fn perm(local: usize, global: usize) -> Vec<Mixer> {
    let mut p = vec![Mixer::Local; local];
    p.extend(vec![Mixer::Global; global]);
    p
}

pub fn make_config(variant: Variant) -> BackboneConfig {
    let (dims, depths, heads, permutation) = match variant {
        Variant::Tiny => ([64, 128, 256], [3, 6, 3], [2, 4, 8], perm(6, 6)),
        Variant::Small => ([96, 192, 384], [3, 6, 3], [3, 6, 12], perm(6, 6)),
        Variant::Base => ([128, 256, 384], [6, 6, 6], [4, 8, 12], perm(8, 10)),
        Variant::Nano => ([32, 64, 128], [2, 2, 2], [1, 2, 4], perm(3, 3)),
    };
    BackboneConfig {
        variant,
        dims,
        depths,
        heads,
        permutation,
        mlp_ratio: 4,
    }
}

/// Heads (and conv groups) for a stage width: `D / 32`, at least one.
pub fn heads_for(dim: usize) -> usize {
    (dim / 32).max(1)
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.permutation.len() != self.depths.iter().sum::<usize>() {
            return Err(Error::Config(format!(
                "permutation has {} entries for {} blocks",
                self.permutation.len(),
                self.depths.iter().sum::<usize>()
            )));
        }
        for i in 0..3 {
            if self.heads[i] != heads_for(self.dims[i]) || !self.dims[i].is_multiple_of(self.heads[i]) {
                return Err(Error::Config(format!(
                    "stage {} has {} heads for width {}",
                    i + 1,
                    self.heads[i],
                    self.dims[i]
                )));
            }
        }
        if !self.dims[0].is_multiple_of(2) {
            return Err(Error::Config("stem width must be even".into()));
        }
        Ok(())
    }

    /// Mixer kinds per stage.
    pub fn stage_mixers(&self) -> [Vec<Mixer>; 3] {
        let a = self.depths[0];
        let b = a + self.depths[1];
        [
            self.permutation[..a].to_vec(),
            self.permutation[a..b].to_vec(),
            self.permutation[b..].to_vec(),
        ]
    }
}

/// Backbone output: `[B, H/8, W/4, D2]` on the tape.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub batch: usize,
    pub grid: (usize, usize),
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct Stem {
    conv1: Conv,
    norm1: LayerNorm,
    conv2: Conv,
    norm2: LayerNorm,
}

impl Stem {
    pub fn new<T: Scalar>(bld: &mut Builder<T>, name: &str, out_dim: usize) -> Result<Self> {
        let geom = ConvGeometry::strided((2, 2));
        Ok(Stem {
            conv1: Conv::new(bld, &format!("{name}.conv1"), 3, out_dim / 2, geom, true)?,
            norm1: LayerNorm::new(bld, &format!("{name}.norm1"), out_dim / 2)?,
            conv2: Conv::new(bld, &format!("{name}.conv2"), out_dim / 2, out_dim, geom, true)?,
            norm2: LayerNorm::new(bld, &format!("{name}.norm2"), out_dim)?,
        })
    }

    /// `[B, H, W, 3]` → `[B, H/4, W/4, D0]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || !s[1].is_multiple_of(4) || !s[2].is_multiple_of(4) || s[3] != 3 {
            return Err(Error::Shape(format!(
                "stem needs [B, H, W, 3] with H, W divisible by 4, got {s:?}"
            )));
        }
        let h = self.conv1.forward(tape, store, x)?;
        let h = self.norm1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.conv2.forward(tape, store, h)?;
        let h = self.norm2.forward(tape, store, h)?;
        Ok(tape.gelu(h))
    }
}

/// Pre-norm residual block with two back-to-back grouped 3×3 convolutions.
#[derive(Clone, Debug)]
pub struct LocalMixing {
    norm1: LayerNorm,
    conv1: Conv,
    conv2: Conv,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl LocalMixing {
    pub fn new<T: Scalar>(bld: &mut Builder<T>, name: &str, dim: usize, mlp_ratio: usize) -> Result<Self> {
        let geom = ConvGeometry::local(heads_for(dim));
        Ok(LocalMixing {
            norm1: LayerNorm::new(bld, &format!("{name}.norm1"), dim)?,
            conv1: Conv::new(bld, &format!("{name}.conv1"), dim, dim, geom, true)?,
            conv2: Conv::new(bld, &format!("{name}.conv2"), dim, dim, geom, true)?,
            norm2: LayerNorm::new(bld, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(bld, &format!("{name}.mlp"), dim, mlp_ratio)?,
        })
    }

    /// `x`: `[B, h, w, D]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.norm1.forward(tape, store, x)?;
        let y = self.conv1.forward(tape, store, y)?;
        let y = self.conv2.forward(tape, store, y)?;
        let x = tape.add(x, y)?;
        let y = self.norm2.forward(tape, store, x)?;
        let y = self.mlp.forward(tape, store, y)?;
        tape.add(x, y)
    }
}

/// Multi-head self-attention over a token set, with an output projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar>(bld: &mut Builder<T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(SelfAttention {
            q: Linear::new(bld, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(bld, &format!("{name}.k"), dim, dim, true)?,
            v: Linear::new(bld, &format!("{name}.v"), dim, dim, true)?,
            proj: Linear::new(bld, &format!("{name}.proj"), dim, dim, true)?,
            heads,
        })
    }

    /// `x`: `[S, L, D]` → `[S, L, D]` plus `[S·heads, L, L]` probabilities.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let (o, p) = multi_head_attention(tape, q, k, v, self.heads)?;
        Ok((self.proj.forward(tape, store, o)?, p))
    }
}

/// Pre-norm residual MHSA over all grid tokens, then a residual MLP.
#[derive(Clone, Debug)]
pub struct GlobalMixing {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl GlobalMixing {
    pub fn new<T: Scalar>(
        bld: &mut Builder<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(GlobalMixing {
            norm1: LayerNorm::new(bld, &format!("{name}.norm1"), dim)?,
            attn: SelfAttention::new(bld, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(bld, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(bld, &format!("{name}.mlp"), dim, mlp_ratio)?,
        })
    }

    /// `x`: `[B, h, w, D]` (any token layout with channels last).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let tokens = shape[1..shape.len() - 1].iter().product::<usize>();
        let y = self.norm1.forward(tape, store, x)?;
        let y = tape.reshape(y, &[shape[0], tokens, d])?;
        let (y, _) = self.attn.forward(tape, store, y)?;
        let y = tape.reshape(y, &shape)?;
        let x = tape.add(x, y)?;
        let y = self.norm2.forward(tape, store, x)?;
        let y = self.mlp.forward(tape, store, y)?;
        tape.add(x, y)
    }
}

#[derive(Clone, Debug)]
pub enum MixingBlock {
    Local(LocalMixing),
    Global(GlobalMixing),
}

impl MixingBlock {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        match self {
            MixingBlock::Local(b) => b.forward(tape, store, x),
            MixingBlock::Global(b) => b.forward(tape, store, x),
        }
    }
}

/// Stride-(2,1) 3×3 convolution halving the grid height, then LN.
#[derive(Clone, Debug)]
pub struct HeightMerge {
    conv: Conv,
    norm: LayerNorm,
}

impl HeightMerge {
    pub fn new<T: Scalar>(bld: &mut Builder<T>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(HeightMerge {
            conv: Conv::new(
                bld,
                &format!("{name}.conv"),
                in_dim,
                out_dim,
                ConvGeometry::strided((2, 1)),
                true,
            )?,
            norm: LayerNorm::new(bld, &format!("{name}.norm"), out_dim)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if !s[1].is_multiple_of(2) {
            return Err(Error::Shape(format!("cannot halve odd grid height {}", s[1])));
        }
        let y = self.conv.forward(tape, store, x)?;
        self.norm.forward(tape, store, y)
    }
}

/// 1×1 channel projection between stages 2 and 3, then LN.
#[derive(Clone, Debug)]
pub struct ChannelProjection {
    proj: Linear,
    norm: LayerNorm,
}

impl ChannelProjection {
    pub fn new<T: Scalar>(bld: &mut Builder<T>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(ChannelProjection {
            proj: Linear::new(bld, &format!("{name}.proj"), in_dim, out_dim, true)?,
            norm: LayerNorm::new(bld, &format!("{name}.norm"), out_dim)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.proj.forward(tape, store, x)?;
        self.norm.forward(tape, store, y)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Stem,
    stages: [Vec<MixingBlock>; 3],
    merge: HeightMerge,
    project: ChannelProjection,
    norm: LayerNorm,
}

impl Backbone {
    pub fn new<T: Scalar>(bld: &mut Builder<T>, name: &str, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mixers = config.stage_mixers();
        let mut stages: [Vec<MixingBlock>; 3] = Default::default();
        for (si, kinds) in mixers.iter().enumerate() {
            let dim = config.dims[si];
            for (bi, kind) in kinds.iter().enumerate() {
                let bname = format!("{name}.stage{}.block{bi}", si + 1);
                stages[si].push(match kind {
                    Mixer::Local => MixingBlock::Local(LocalMixing::new(bld, &bname, dim, config.mlp_ratio)?),
                    Mixer::Global => {
                        MixingBlock::Global(GlobalMixing::new(bld, &bname, dim, config.heads[si], config.mlp_ratio)?)
                    }
                });
            }
        }
        Ok(Backbone {
            stem: Stem::new(bld, &format!("{name}.stem"), config.dims[0])?,
            merge: HeightMerge::new(bld, &format!("{name}.merge"), config.dims[0], config.dims[1])?,
            project: ChannelProjection::new(bld, &format!("{name}.project"), config.dims[1], config.dims[2])?,
            norm: LayerNorm::new(bld, &format!("{name}.norm"), config.dims[2])?,
            stages,
            config,
        })
    }

    /// `images`: `[B, H, W, 3]` (already resized) → features on a
    /// `(H/8, W/4)` grid.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, images: Var) -> Result<FeatureMap> {
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || !s[1].is_multiple_of(8) || !s[2].is_multiple_of(4) {
            return Err(Error::Shape(format!(
                "backbone input must be [B, H, W, 3] with H % 8 == 0 and W % 4 == 0, got {s:?}"
            )));
        }
        let mut x = self.stem.forward(tape, store, images)?;
        for b in &self.stages[0] {
            x = b.forward(tape, store, x)?;
        }
        x = self.merge.forward(tape, store, x)?;
        for b in &self.stages[1] {
            x = b.forward(tape, store, x)?;
        }
        x = self.project.forward(tape, store, x)?;
        for b in &self.stages[2] {
            x = b.forward(tape, store, x)?;
        }
        x = self.norm.forward(tape, store, x)?;
        Ok(FeatureMap {
            var: x,
            batch: s[0],
            grid: (s[1] / 8, s[2] / 4),
            dim: self.config.dims[2],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_tables() {
        let b = make_config(Variant::Base);
        assert_eq!(b.dims, [128, 256, 384]);
        assert_eq!(b.depths, [6, 6, 6]);
        assert_eq!(b.heads, [4, 8, 12]);
        assert_eq!(b.permutation, perm(8, 10));
        let [s1, s2, s3] = b.stage_mixers();
        assert!(s1.iter().all(|&m| m == Mixer::Local));
        assert_eq!(&s2[..2], &[Mixer::Local, Mixer::Local]);
        assert!(s2[2..].iter().all(|&m| m == Mixer::Global));
        assert!(s3.iter().all(|&m| m == Mixer::Global));

        assert_eq!(make_config(Variant::Tiny).heads, [2, 4, 8]);
        assert_eq!(make_config(Variant::Small).heads, [3, 6, 12]);
        assert_eq!(make_config(Variant::Nano).heads, [1, 2, 4]);
        for v in [Variant::Tiny, Variant::Small, Variant::Base, Variant::Nano] {
            make_config(v).validate().unwrap();
        }
    }

    #[test]
    fn unknown_variant() {
        assert!("huge".parse::<Variant>().is_err());
        assert_eq!("base".parse::<Variant>().unwrap(), Variant::Base);
    }

    #[test]
    fn bad_permutation_rejected() {
        let mut c = make_config(Variant::Nano);
        c.permutation.pop();
        assert!(c.validate().is_err());
    }
}
