//! Training-only semantic guidance: predicts each character from its left
//! and right string context attended over the visual features.

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{attention_scale, cross_entropy, Builder, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Var};

pub const DEFAULT_WINDOW: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SgmConfig {
    pub window: usize,
    pub num_classes: usize,
}

impl SgmConfig {
    pub fn new(num_classes: usize) -> Self {
        SgmConfig {
            window: DEFAULT_WINDOW,
            num_classes,
        }
    }

    /// Embedding row used for out-of-range window slots.
    pub fn pad(&self) -> usize {
        self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!(
                "SGM needs a positive window and charset, got l_s={} N_c={}",
                self.window, self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Left and right context windows for every label position.
pub fn extract_windows(label: &[usize], window: usize, pad: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let n = label.len() as isize;
    let at = |j: isize| if j >= 0 && j < n { label[j as usize] } else { pad };
    (0..n)
        .map(|i| {
            let w = window as isize;
            let left = (i - w..i).map(at).collect();
            let right = (i + 1..=i + w).map(at).collect();
            (left, right)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SgmSide {
    token: ParamId,
    ctx_q: Linear,
    ctx_k: Linear,
    ctx_v: Linear,
    ctx_norm: LayerNorm,
    vis_q: Linear,
    vis_k: Linear,
    vis_v: Linear,
}

impl SgmSide {
    fn new<T: Scalar>(bld: &mut Builder<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(SgmSide {
            token: bld.param(&format!("{name}.token"), &[1, dim], Init::Normal(0.02), true)?,
            ctx_q: Linear::new(bld, &format!("{name}.ctx.q"), dim, dim, false)?,
            ctx_k: Linear::new(bld, &format!("{name}.ctx.k"), dim, dim, false)?,
            ctx_v: Linear::new(bld, &format!("{name}.ctx.v"), dim, dim, false)?,
            ctx_norm: LayerNorm::new(bld, &format!("{name}.ctx.norm"), dim)?,
            vis_q: Linear::new(bld, &format!("{name}.vis.q"), dim, dim, false)?,
            vis_k: Linear::new(bld, &format!("{name}.vis.k"), dim, dim, false)?,
            vis_v: Linear::new(bld, &format!("{name}.vis.v"), dim, dim, false)?,
        })
    }
}

/// Attention results for one side over a padded batch of positions.
#[derive(Clone, Copy, Debug)]
pub struct SideOutput {
    /// Context attention over window slots, `[P, 1, l_s]`.
    pub context_attn: Var,
    /// Visual attention, `[B, Lmax, h·w]`.
    pub visual_attn: Var,
    /// Attended features, `[B·Lmax, D]`.
    pub features: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SgmOutput {
    pub loss: Var,
    pub left: SideOutput,
    pub right: SideOutput,
    pub max_len: usize,
}

#[derive(Clone, Debug)]
pub struct Sgm {
    pub config: SgmConfig,
    embed: ParamId,
    left: SgmSide,
    right: SgmSide,
    classifier: Linear,
    dim: usize,
}

impl Sgm {
    pub fn new<T: Scalar>(bld: &mut Builder<T>, name: &str, config: SgmConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        Ok(Sgm {
            embed: bld.param(
                &format!("{name}.embed"),
                &[config.num_classes + 1, dim],
                Init::Normal(0.02),
                true,
            )?,
            left: SgmSide::new(bld, &format!("{name}.left"), dim)?,
            right: SgmSide::new(bld, &format!("{name}.right"), dim)?,
            classifier: Linear::new(bld, &format!("{name}.classifier"), dim, config.num_classes, false)?,
            config,
            dim,
        })
    }

    fn side(&self, side: Side) -> &SgmSide {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    /// Encodes `P` windows of `l_s` indices each into context queries.
    /// Returns `Q`: `[P, D]` and the context attention `[P, 1, l_s]`.
    pub fn encode_context<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        side: Side,
        windows: &[Vec<usize>],
    ) -> Result<(Var, Var)> {
        let ls = self.config.window;
        if windows.is_empty() || windows.iter().any(|w| w.len() != ls) {
            return Err(Error::Input(format!("context windows must all hold {ls} slots")));
        }
        let p = windows.len();
        let d = self.dim;
        let sd = self.side(side);
        let idx: Vec<usize> = windows.iter().flatten().copied().collect();
        let table = store.bind(tape, self.embed);
        let e = tape.embedding(table, &idx)?;
        let k = sd.ctx_k.forward(tape, store, e)?;
        let v = sd.ctx_v.forward(tape, store, e)?;
        let token = store.bind(tape, sd.token);
        let q = sd.ctx_q.forward(tape, store, token)?;
        let q = tape.reshape(q, &[d, 1])?;
        let logits = tape.matmul(k, q)?;
        let logits = tape.reshape(logits, &[p, 1, ls])?;
        let logits = tape.scale(logits, T::from_f64(attention_scale(d)));
        let attn = tape.softmax(logits)?;
        let v = tape.reshape(v, &[p, ls, d])?;
        let ctx = tape.bmm(attn, v, false, false, T::one())?;
        let ctx = tape.reshape(ctx, &[p, d])?;
        let t = tape.reshape(token, &[d])?;
        let ctx = tape.add_bias(ctx, t)?;
        Ok((sd.ctx_norm.forward(tape, store, ctx)?, attn))
    }

    /// Single-head attention of queries `q`: `[B, L, D]` over the grid
    /// tokens of `f`. Returns `A`: `[B, L, h·w]` and features `[B, L, D]`.
    pub fn attend_visual<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        side: Side,
        q: Var,
        f: &FeatureMap,
    ) -> Result<(Var, Var)> {
        let sd = self.side(side);
        let tokens = f.grid.0 * f.grid.1;
        let qs = tape.shape(q).to_vec();
        if qs.len() != 3 || qs[0] != f.batch || qs[2] != f.dim {
            return Err(Error::dim("attend_visual", &qs, &[f.batch, tokens, f.dim]));
        }
        let flat = tape.reshape(f.var, &[f.batch, tokens, f.dim])?;
        let qp = sd.vis_q.forward(tape, store, q)?;
        let k = sd.vis_k.forward(tape, store, flat)?;
        let v = sd.vis_v.forward(tape, store, flat)?;
        let logits = tape.bmm(qp, k, false, true, T::from_f64(attention_scale(f.dim)))?;
        let attn = tape.softmax(logits)?;
        let out = tape.bmm(attn, v, false, false, T::one())?;
        Ok((attn, out))
    }

    /// Mean cross-entropy over both sides and all positions, averaged over
    /// the batch: `Σ_b Σ_i (CE_l + CE_r) / (2·L_b·B)`.
    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: &FeatureMap,
        labels: &[Vec<usize>],
    ) -> Result<SgmOutput> {
        if labels.len() != f.batch {
            return Err(Error::Input(format!(
                "{} labels for a batch of {}",
                labels.len(),
                f.batch
            )));
        }
        let nc = self.config.num_classes;
        for l in labels {
            if l.is_empty() {
                return Err(Error::Input("SGM needs nonempty labels".into()));
            }
            if let Some(&bad) = l.iter().find(|&&c| c >= nc) {
                return Err(Error::Input(format!("label index {bad} out of range for {nc} classes")));
            }
        }
        let b = labels.len();
        let lmax = labels.iter().map(Vec::len).max().unwrap_or(1);
        let mut windows = (Vec::new(), Vec::new());
        for l in labels {
            for (lw, rw) in extract_windows(l, self.config.window, self.config.pad()) {
                windows.0.push(lw);
                windows.1.push(rw);
            }
        }
        // padded slot → row of Q (padding reuses row 0 with zero weight)
        let mut gather = Vec::with_capacity(b * lmax);
        let mut targets = Vec::with_capacity(b * lmax);
        let mut weights = Vec::with_capacity(b * lmax);
        let mut offset = 0;
        for l in labels {
            let w = 1.0 / (2.0 * l.len() as f64 * b as f64);
            for i in 0..lmax {
                if i < l.len() {
                    gather.push(offset + i);
                    targets.push(l[i]);
                    weights.push(T::from_f64(w));
                } else {
                    gather.push(0);
                    targets.push(0);
                    weights.push(T::zero());
                }
            }
            offset += l.len();
        }
        let mut sides = Vec::with_capacity(2);
        let mut total = None;
        for (side, win) in [(Side::Left, &windows.0), (Side::Right, &windows.1)] {
            let (q, context_attn) = self.encode_context(tape, store, side, win)?;
            let q = tape.embedding(q, &gather)?;
            let q = tape.reshape(q, &[b, lmax, self.dim])?;
            let (visual_attn, feats) = self.attend_visual(tape, store, side, q, f)?;
            let feats = tape.reshape(feats, &[b * lmax, self.dim])?;
            let logits = self.classifier.forward(tape, store, feats)?;
            let ce = cross_entropy(tape, logits, &targets)?;
            let part = tape.weighted_sum(ce, weights.clone())?;
            total = Some(match total {
                None => part,
                Some(acc) => tape.add(acc, part)?,
            });
            sides.push(SideOutput {
                context_attn,
                visual_attn,
                features: feats,
            });
        }
        Ok(SgmOutput {
            loss: total.expect("two sides"),
            left: sides[0],
            right: sides[1],
            max_len: lmax,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const P: usize = 99;

    #[test]
    fn windows_pad_at_boundaries() {
        // "cat" = [2, 0, 19]
        let w = extract_windows(&[2, 0, 19], 2, P);
        assert_eq!(w[0], (vec![P, P], vec![0, 19]));
        assert_eq!(w[1], (vec![P, 2], vec![19, P]));
        let w = extract_windows(&[4], 3, P);
        assert_eq!(w, vec![(vec![P; 3], vec![P; 3])]);
    }

    fn zero_all(store: &mut ParamStore<f64>) {
        for e in store.entries_mut() {
            e.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn feature_map(tape: &mut Tape<f64>, b: usize, h: usize, w: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let var = tape.constant(random_tensor(&[b, h, w, d], 1.0, rng));
        FeatureMap {
            var,
            batch: b,
            grid: (h, w),
            dim: d,
        }
    }

    #[test]
    fn zero_weights_give_uniform_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let sgm = Sgm::new(&mut Builder::new(&mut store, &mut rng), "sgm", SgmConfig::new(12), 8).unwrap();
        zero_all(&mut store);
        let mut tape = Tape::new();
        let f = feature_map(&mut tape, 2, 1, 3, 8, &mut rng);
        let out = sgm.loss(&mut tape, &store, &f, &[vec![1, 2, 3], vec![4]]).unwrap();
        let l = tape.data(out.loss)[0];
        assert!((l - 12f64.ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let sgm = Sgm::new(&mut Builder::new(&mut store, &mut rng), "sgm", SgmConfig::new(5), 8).unwrap();
        let mut tape = Tape::new();
        let f = feature_map(&mut tape, 2, 2, 3, 8, &mut rng);
        let out = sgm.loss(&mut tape, &store, &f, &[vec![1, 2, 3], vec![4, 0]]).unwrap();
        for s in [out.left, out.right] {
            for row in tape.data(s.visual_attn).chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            for row in tape.data(s.context_attn).chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_only_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let sgm = Sgm::new(&mut Builder::new(&mut store, &mut rng), "sgm", SgmConfig::new(5), 4).unwrap();
        let embed = store.id("sgm.embed").unwrap();
        store.get_mut(embed).data_mut()[5 * 4..]
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let wv = store.id("sgm.left.ctx.v.weight").unwrap();
        store.get_mut(wv).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let (q, _) = sgm
            .encode_context(&mut tape, &store, Side::Left, &[vec![5; 5]])
            .unwrap();
        let t = store.get(store.id("sgm.left.token").unwrap()).data().to_vec();
        let mean = t.iter().sum::<f64>() / 4.0;
        let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        for (a, b) in tape.data(q).iter().zip(&t) {
            let want = (b - mean) / (var + crate::nn::LN_EPS).sqrt();
            assert!((a - want).abs() < 1e-9);
        }
    }

    #[test]
    fn single_token_grid_copies_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let sgm = Sgm::new(&mut Builder::new(&mut store, &mut rng), "sgm", SgmConfig::new(5), 4).unwrap();
        let mut tape = Tape::new();
        let f = feature_map(&mut tape, 1, 1, 1, 4, &mut rng);
        let q = tape.constant(random_tensor(&[1, 1, 4], 1.0, &mut rng));
        let (a, out) = sgm.attend_visual(&mut tape, &store, Side::Right, q, &f).unwrap();
        assert_eq!(tape.data(a), &[1.0]);
        let fv = {
            let flat = tape.reshape(f.var, &[1, 4]).unwrap();
            let w = store.bind(&mut tape, store.id("sgm.right.vis.v.weight").unwrap());
            tape.matmul(flat, w).unwrap()
        };
        for (x, y) in tape.data(out).iter().zip(tape.data(fv)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_label_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let sgm = Sgm::new(&mut Builder::new(&mut store, &mut rng), "sgm", SgmConfig::new(5), 4).unwrap();
        let mut tape = Tape::new();
        let f = feature_map(&mut tape, 1, 1, 2, 4, &mut rng);
        assert!(matches!(
            sgm.loss(&mut tape, &store, &f, &[vec![5]]),
            Err(Error::Input(_))
        ));
    }
}
