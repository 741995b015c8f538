use std::collections::HashMap;

use super::kernels::{self, bgemm, gemm_strided, ConvGeometry, ConvPlan};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias {
        x: Var,
        bias: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        b_batched: bool,
        alpha: T,
        dims: (usize, usize, usize, usize),
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        x: Var,
        deriv: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        plan: ConvPlan,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
    Embedding {
        table: Var,
        idx: Vec<usize>,
    },
    RowwiseLoss {
        x: Var,
        jac: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// Every node's inputs precede it, so a single reverse sweep visits each
/// record exactly once.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
}

/// Per-node gradients produced by [`Tape::backward`].
/// Gradients of the leaves (constants, inputs and parameters) of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = T::one() - (T::one() + T::one()) / (T::one() + (u + u).exp());
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    /// Binds a trainable parameter once per tape; later calls reuse the leaf.
    pub fn param(&mut self, id: usize, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Parameter ids bound on this tape with their leaf handles.
    pub fn bound_params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params.iter().map(|(&k, &v)| (k, v))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("tape nodes hold consistent shapes")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[x.0];
        if shape.iter().product::<usize>() != n.data.len() {
            return Err(Error::dim("reshape", &n.shape, shape));
        }
        let data = n.data.clone();
        let ng = n.needs_grad;
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let n = &self.nodes[x.0];
        let mut seen = vec![false; n.shape.len()];
        if perm.len() != n.shape.len()
            || perm
                .iter()
                .any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape(format!(
                "invalid permutation {perm:?} for shape {:?}",
                n.shape
            )));
        }
        let (data, shape) = kernels::permute(&n.data, &n.shape, perm);
        let ng = n.needs_grad;
        Ok(self.push(shape, data, Op::Permute { x, perm: perm.to_vec() }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let data = self.data(x).iter().map(|&v| v * s).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, s), ng)
    }

    /// Adds `bias[D]` to every length-`D` row of `x[.., D]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias).iter().product::<usize>() != d {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(self.shape(x).to_vec(), data, Op::AddBias { x, bias }, ng))
    }

    /// `a[.., k] × b[k, n] → [.., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = sa.iter().product::<usize>() / k;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        self.bmm_raw(a, b, false, false, false, T::one(), (1, m, k, n), out_shape)
    }

    /// Batched product over `[B, ..]` operands.
    ///
    /// `a` is `[B, m, k]` (`[B, k, m]` if `trans_a`), `b` is `[B, k, n]`
    /// (`[B, n, k]` if `trans_b`); output `[B, m, n]` scaled by `alpha`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool, alpha: T) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let (m, ka) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let batch = sa[0];
        self.bmm_raw(
            a,
            b,
            trans_a,
            trans_b,
            true,
            alpha,
            (batch, m, ka, n),
            vec![batch, m, n],
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn bmm_raw(
        &mut self,
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        b_batched: bool,
        alpha: T,
        dims: (usize, usize, usize, usize),
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let (batch, m, k, n) = dims;
        let mut out = vec![T::zero(); batch * m * n];
        bgemm(
            batch,
            m,
            k,
            n,
            alpha,
            self.data(a),
            trans_a,
            self.data(b),
            trans_b,
            b_batched,
            T::zero(),
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            out_shape,
            out,
            Op::Bmm {
                a,
                b,
                trans_a,
                trans_b,
                b_batched,
                alpha,
                dims,
            },
            ng,
        ))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::Shape("softmax of rank-0".into()))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), ng))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::Shape("log_softmax of rank-0".into()))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(d) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::LogSoftmax(x), ng))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::Shape("layer_norm of rank-0".into()))?;
        if self.shape(gain).iter().product::<usize>() != d {
            return Err(Error::dim("layer_norm gain", self.shape(x), self.shape(gain)));
        }
        if self.shape(bias).iter().product::<usize>() != d {
            return Err(Error::dim("layer_norm bias", self.shape(x), self.shape(bias)));
        }
        let inv_d = T::one() / T::from_f64(d as f64);
        let g = self.data(gain);
        let b = self.data(bias);
        let src = self.data(x);
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let ng = self.ng(x);
        let n = self.data(x).len();
        let mut data = Vec::with_capacity(n);
        let mut deriv = Vec::with_capacity(if ng { n } else { 0 });
        for &v in self.data(x) {
            let (y, dy) = gelu_parts(v);
            data.push(y);
            if ng {
                deriv.push(dy);
            }
        }
        self.push(self.shape(x).to_vec(), data, Op::Gelu { x, deriv }, ng)
    }

    /// Grouped 2-D convolution on channels-last input.
    ///
    /// `x`: `[B, H, W, C]`; `w`: `[groups, kh·kw·C/groups, O/groups]`
    /// (tap-major, channel-minor patches); `bias`: `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 {
            return Err(Error::Shape(format!("conv2d expects [B,H,W,C], got {sx:?}")));
        }
        let g = geom.groups;
        if g == 0 || !sx[3].is_multiple_of(g) {
            return Err(Error::Config(format!(
                "{} channels are not divisible into {g} groups",
                sx[3]
            )));
        }
        let cg = sx[3] / g;
        let patch = geom.kernel.0 * geom.kernel.1 * cg;
        if sw.len() != 3 || sw[0] != g || sw[1] != patch {
            return Err(Error::dim("conv2d weight", &sx, &sw));
        }
        let out_c = sw[2] * g;
        if let Some(bv) = bias {
            if self.shape(bv).iter().product::<usize>() != out_c {
                return Err(Error::dim("conv2d bias", &sw, self.shape(bv)));
            }
        }
        let out_h = kernels::conv_output_extent(sx[1], geom.kernel.0, geom.stride.0, geom.padding.0);
        let out_w = kernels::conv_output_extent(sx[2], geom.kernel.1, geom.stride.1, geom.padding.1);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::Shape(format!("conv2d input {sx:?} smaller than kernel")));
        };
        let plan = ConvPlan {
            batch: sx[0],
            in_h: sx[1],
            in_w: sx[2],
            in_c: sx[3],
            out_h,
            out_w,
            out_c,
            geom,
        };
        let rows = plan.rows();
        let og = plan.group_out();
        let mut out = vec![T::zero(); rows * out_c];
        let mut cols = vec![T::zero(); rows * patch];
        let wd = self.data(w);
        for grp in 0..g {
            plan.im2col(self.data(x), grp, &mut cols);
            gemm_strided(
                rows,
                patch,
                og,
                &cols,
                patch,
                false,
                &wd[grp * patch * og..],
                og,
                false,
                T::zero(),
                &mut out[grp * og..],
                out_c,
            );
        }
        if let Some(bv) = bias {
            let b = self.data(bv);
            for row in out.chunks_mut(out_c) {
                row.iter_mut().zip(b).for_each(|(o, &c)| *o += c);
            }
        }
        let ng = self.ng(x) || self.ng(w) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(
            vec![sx[0], out_h, out_w, out_c],
            out,
            Op::Conv2d { x, w, bias, plan },
            ng,
        ))
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Shape(format!("mean axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let n = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        let inv = T::one() / T::from_f64(n as f64);
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                for j in 0..inner {
                    out[o * inner + j] += src[base + j] * inv;
                }
            }
        }
        let mut shape: Vec<usize> = s.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::MeanAxis { x, outer, n, inner }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    /// `Σ weights[i]·x[i]` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.data(x).len() {
            return Err(Error::dim("weighted_sum", self.shape(x), &[weights.len()]));
        }
        let s = self.data(x).iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        let ng = self.ng(x);
        Ok(self.push(vec![1], vec![s], Op::WeightedSum { x, weights }, ng))
    }

    /// Gathers rows of `table[V, D]`; output `[idx.len(), D]`.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("embedding table must be 2-D, got {s:?}")));
        }
        let d = s[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Input(format!(
                "embedding index {bad} out of range for {} rows",
                s[0]
            )));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            vec![idx.len().max(1), d],
            out,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Records per-row losses whose Jacobians were computed alongside them.
    ///
    /// `x` is `[R, ..]`; `losses[r]` depends only on row block `r` and
    /// `jac` holds `∂losses[r]/∂x[r, ..]` laid out like `x`.
    pub fn rowwise_loss(&mut self, x: Var, losses: Vec<T>, jac: Vec<T>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if jac.len() != self.data(x).len() || losses.len() != s[0] {
            return Err(Error::dim("rowwise_loss", &s, &[losses.len(), jac.len()]));
        }
        let ng = self.ng(x);
        let n = losses.len();
        Ok(self.push(vec![n], losses, Op::RowwiseLoss { x, jac }, ng))
    }

    /// Reverse sweep from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Leaf => grads[id] = Some(g),
                Op::Reshape(x) => match &mut grads[x.0] {
                    Some(dst) => dst.iter_mut().zip(&g).for_each(|(d, &s)| *d += s),
                    slot => *slot = Some(g),
                },
                _ => self.backprop(node, &g, &mut grads),
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }
        let nodes = &self.nodes;
        let len = |v: Var| nodes[v.0].data.len();
        let ng = |v: Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => {
                if ng(*x) {
                    let dst = acc(grads, *x, len(*x));
                    dst.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Permute { x, perm } => {
                if ng(*x) {
                    let inv = kernels::inverse_permutation(perm);
                    let (back, _) = kernels::permute(g, &node.shape, &inv);
                    let dst = acc(grads, *x, len(*x));
                    dst.iter_mut().zip(&back).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if ng(v) {
                        let dst = acc(grads, v, len(v));
                        dst.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                if ng(*a) {
                    let dst = acc(grads, *a, ad.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * bd[i];
                    }
                }
                if ng(*b) {
                    let dst = acc(grads, *b, bd.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                if ng(*x) {
                    let dst = acc(grads, *x, len(*x));
                    dst.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
                }
            }
            Op::AddBias { x, bias } => {
                if ng(*x) {
                    let dst = acc(grads, *x, len(*x));
                    dst.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if ng(*bias) {
                    let d = len(*bias);
                    let dst = acc(grads, *bias, d);
                    for row in g.chunks(d) {
                        dst.iter_mut().zip(row).for_each(|(a, &s)| *a += s);
                    }
                }
            }
            Op::Bmm {
                a,
                b,
                trans_a,
                trans_b,
                b_batched,
                alpha,
                dims,
            } => {
                let (batch, m, k, n) = *dims;
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                if ng(*a) {
                    let dst = acc(grads, *a, ad.len());
                    if !*trans_a {
                        // dA[m,k] = α dC · op(B)ᵀ
                        bgemm(
                            batch,
                            m,
                            n,
                            k,
                            *alpha,
                            g,
                            false,
                            bd,
                            !*trans_b,
                            *b_batched,
                            T::one(),
                            dst,
                        );
                    } else {
                        // dA[k,m] = α op(B) · dCᵀ
                        bgemm_lhs_shared(batch, k, n, m, *alpha, bd, *trans_b, *b_batched, g, true, dst);
                    }
                }
                if ng(*b) {
                    let dst = acc(grads, *b, bd.len());
                    if *b_batched {
                        if !*trans_b {
                            // dB[k,n] = α op(A)ᵀ dC
                            bgemm(batch, k, m, n, *alpha, ad, !*trans_a, g, false, true, T::one(), dst);
                        } else {
                            // dB[n,k] = α dCᵀ op(A)
                            bgemm(batch, n, m, k, *alpha, g, true, ad, *trans_a, true, T::one(), dst);
                        }
                    } else {
                        // Shared right operand: reduce over the flattened batch.
                        let rows = batch * m;
                        if !*trans_b {
                            let mut tmp = vec![T::zero(); k * n];
                            gemm_t_acc(rows, k, n, ad, *trans_a, m, g, &mut tmp);
                            dst.iter_mut().zip(&tmp).for_each(|(d, &s)| *d += *alpha * s);
                        } else {
                            let mut tmp = vec![T::zero(); n * k];
                            gemm_t_acc(rows, n, k, g, false, m, ad, &mut tmp);
                            dst.iter_mut().zip(&tmp).for_each(|(d, &s)| *d += *alpha * s);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if ng(*x) {
                    let d = *node.shape.last().unwrap();
                    let y = &node.data;
                    let dst = acc(grads, *x, y.len());
                    for r in 0..y.len() / d {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dst[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if ng(*x) {
                    let d = *node.shape.last().unwrap();
                    let y = &node.data;
                    let dst = acc(grads, *x, y.len());
                    for r in 0..y.len() / d {
                        let gr = &g[r * d..(r + 1) * d];
                        let gs: T = gr.iter().copied().sum();
                        for j in 0..d {
                            dst[r * d + j] += gr[j] - y[r * d + j].exp() * gs;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let rows = xhat.len() / d;
                let gd = &nodes[gain.0].data;
                if ng(*gain) {
                    let dst = acc(grads, *gain, d);
                    for r in 0..rows {
                        for j in 0..d {
                            dst[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if ng(*bias) {
                    let dst = acc(grads, *bias, d);
                    for r in 0..rows {
                        for j in 0..d {
                            dst[j] += g[r * d + j];
                        }
                    }
                }
                if ng(*x) {
                    let inv_d = T::one() / T::from_f64(d as f64);
                    let dst = acc(grads, *x, xhat.len());
                    let mut dxh = vec![T::zero(); d];
                    for r in 0..rows {
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            dxh[j] = g[r * d + j] * gd[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xr[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            dst[r * d + j] += rstd[r] * (dxh[j] - m1 - xr[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu { x, deriv } => {
                if ng(*x) {
                    let dst = acc(grads, *x, deriv.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * deriv[i];
                    }
                }
            }
            Op::Conv2d { x, w, bias, plan } => {
                let rows = plan.rows();
                let patch = plan.patch();
                let og = plan.group_out();
                let oc = plan.out_c;
                let xd = &nodes[x.0].data;
                let wd = &nodes[w.0].data;
                if let Some(bv) = bias {
                    if ng(*bv) {
                        let dst = acc(grads, *bv, oc);
                        for row in g.chunks(oc) {
                            dst.iter_mut().zip(row).for_each(|(a, &s)| *a += s);
                        }
                    }
                }
                let need_w = ng(*w);
                let need_x = ng(*x);
                if need_w || need_x {
                    let mut cols = vec![T::zero(); rows * patch];
                    for grp in 0..plan.geom.groups {
                        if need_w {
                            plan.im2col(xd, grp, &mut cols);
                            let dst = acc(grads, *w, wd.len());
                            // dW_g[patch, og] += colsᵀ · dOut_g
                            gemm_strided(
                                patch,
                                rows,
                                og,
                                &cols,
                                patch,
                                true,
                                &g[grp * og..],
                                oc,
                                false,
                                T::one(),
                                &mut dst[grp * patch * og..(grp + 1) * patch * og],
                                og,
                            );
                        }
                        if need_x {
                            // dCols[rows, patch] = dOut_g · W_gᵀ
                            gemm_strided(
                                rows,
                                og,
                                patch,
                                &g[grp * og..],
                                oc,
                                false,
                                &wd[grp * patch * og..(grp + 1) * patch * og],
                                og,
                                true,
                                T::zero(),
                                &mut cols,
                                patch,
                            );
                            let dst = acc(grads, *x, xd.len());
                            plan.col2im(&cols, grp, dst);
                        }
                    }
                }
            }
            Op::MeanAxis { x, outer, n, inner } => {
                if ng(*x) {
                    let inv = T::one() / T::from_f64(*n as f64);
                    let dst = acc(grads, *x, len(*x));
                    for o in 0..*outer {
                        for i in 0..*n {
                            let base = (o * n + i) * inner;
                            for j in 0..*inner {
                                dst[base + j] += g[o * inner + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if ng(*x) {
                    let dst = acc(grads, *x, len(*x));
                    dst.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::WeightedSum { x, weights } => {
                if ng(*x) {
                    let dst = acc(grads, *x, len(*x));
                    dst.iter_mut().zip(weights).for_each(|(d, &w)| *d += g[0] * w);
                }
            }
            Op::Embedding { table, idx } => {
                if ng(*table) {
                    let d = nodes[table.0].shape[1];
                    let dst = acc(grads, *table, len(*table));
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            dst[i * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::RowwiseLoss { x, jac } => {
                if ng(*x) {
                    let block = jac.len() / g.len();
                    let dst = acc(grads, *x, jac.len());
                    for (r, &gr) in g.iter().enumerate() {
                        for j in r * block..(r + 1) * block {
                            dst[j] += gr * jac[j];
                        }
                    }
                }
            }
        }
    }
}

/// `dst[batch][k, m] += alpha * op(B)[k, n] · dC[m, n]ᵀ` where `op(B)` may
/// be shared across the batch.
#[allow(clippy::too_many_arguments)]
fn bgemm_lhs_shared<T: Scalar>(
    batch: usize,
    k: usize,
    n: usize,
    m: usize,
    alpha: T,
    b: &[T],
    trans_b: bool,
    b_batched: bool,
    dc: &[T],
    dc_trans: bool,
    dst: &mut [T],
) {
    // op(B) is [k, n]; stored [k, n] unless trans_b ([n, k]).
    let (rsb, csb) = if trans_b {
        (1isize, k as isize)
    } else {
        (n as isize, 1isize)
    };
    let b_step = if b_batched { k * n } else { 0 };
    debug_assert!(dc_trans);
    for i in 0..batch {
        // SAFETY: offsets stay within the operand extents for each batch item.
        unsafe {
            T::gemm(
                k,
                n,
                m,
                alpha,
                b.as_ptr().add(i * b_step),
                rsb,
                csb,
                dc.as_ptr().add(i * m * n),
                1,
                n as isize,
                T::one(),
                dst.as_mut_ptr().add(i * k * m),
                m as isize,
                1,
            );
        }
    }
}

/// `out[p, q] += Σ_r lhs[r, p] · rhs[r, q]` over flattened rows, where
/// `lhs` rows may come from batch items stored transposed (`[k, m]` blocks).
#[allow(clippy::too_many_arguments)]
fn gemm_t_acc<T: Scalar>(
    rows: usize,
    p: usize,
    q: usize,
    lhs: &[T],
    lhs_trans_blocks: bool,
    block_rows: usize,
    rhs: &[T],
    out: &mut [T],
) {
    if !lhs_trans_blocks {
        gemm_strided(p, rows, q, lhs, p, true, rhs, q, false, T::one(), out, q);
    } else {
        // Each block is stored [p, block_rows]; accumulate block by block.
        let blocks = rows / block_rows;
        for bi in 0..blocks {
            gemm_strided(
                p,
                block_rows,
                q,
                &lhs[bi * p * block_rows..(bi + 1) * p * block_rows],
                block_rows,
                false,
                &rhs[bi * block_rows * q..(bi + 1) * block_rows * q],
                q,
                false,
                T::one(),
                out,
                q,
            );
        }
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    if mx == T::neg_infinity() {
        return mx;
    }
    mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln()
}
