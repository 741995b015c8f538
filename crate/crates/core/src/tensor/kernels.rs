use super::Scalar;

/// Batched GEMM over contiguous row-major operands.
///
/// `a` holds `batch` matrices stored as `[m, k]` (or `[k, m]` when
/// `trans_a`); `b` holds `[k, n]` (or `[n, k]` when `trans_b`). Writes
/// `c = alpha * op(a) op(b) + beta * c` for each batch item. A batch
/// stride of zero on `b` broadcasts a single right operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bgemm<T: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    b_batched: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), batch * m * k, "bgemm: lhs extent");
    assert_eq!(
        b.len(),
        if b_batched { batch * k * n } else { k * n },
        "bgemm: rhs extent"
    );
    assert_eq!(c.len(), batch * m * n, "bgemm: out extent");
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let b_step = if b_batched { k * n } else { 0 };
    for i in 0..batch {
        let a_off = i * m * k;
        let b_off = i * b_step;
        let c_off = i * m * n;
        // SAFETY: the asserts above bound every offset + extent by the slice lengths.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr().add(a_off),
                rsa,
                csa,
                b.as_ptr().add(b_off),
                rsb,
                csb,
                beta,
                c.as_mut_ptr().add(c_off),
                n as isize,
                1,
            );
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permutes axes: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        return (data.to_vec(), out_shape);
    }
    // Copy whole rows when the innermost axis stays innermost.
    let (run, outer_rank) = if perm[rank - 1] == rank - 1 {
        (shape[rank - 1], rank - 1)
    } else {
        (1, rank)
    };
    let mut idx = vec![0usize; outer_rank];
    let total_outer: usize = out_shape[..outer_rank].iter().product();
    let mut offset = 0usize;
    for _ in 0..total_outer {
        if run == 1 {
            out.push(data[offset]);
        } else {
            out.extend_from_slice(&data[offset..offset + run]);
        }
        for ax in (0..outer_rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Kernel footprint of a (grouped) 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvGeometry {
    /// 3×3 kernel, stride 1, padding 1.
    pub fn local(groups: usize) -> Self {
        ConvGeometry {
            kernel: (3, 3),
            stride: (1, 1),
            padding: (1, 1),
            groups,
        }
    }

    pub fn pointwise() -> Self {
        ConvGeometry {
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }

    pub fn strided(stride: (usize, usize)) -> Self {
        ConvGeometry {
            kernel: (3, 3),
            stride,
            padding: (1, 1),
            groups: 1,
        }
    }
}

pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry resolved against a concrete NHWC input.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvPlan {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub geom: ConvGeometry,
}

impl ConvPlan {
    pub fn group_in(&self) -> usize {
        self.in_c / self.geom.groups
    }

    pub fn group_out(&self) -> usize {
        self.out_c / self.geom.groups
    }

    pub fn patch(&self) -> usize {
        self.geom.kernel.0 * self.geom.kernel.1 * self.group_in()
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.geom.stride.0 + ky) as isize - self.geom.padding.0 as isize;
        let ix = (ox * self.geom.stride.1 + kx) as isize - self.geom.padding.1 as isize;
        if iy < 0 || ix < 0 || iy >= self.in_h as isize || ix >= self.in_w as isize {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }

    /// Gathers the patches of one channel group into `[rows, patch]`.
    pub fn im2col<T: Scalar>(&self, x: &[T], group: usize, cols: &mut [T]) {
        let cg = self.group_in();
        let c0 = group * cg;
        let (kh, kw) = self.geom.kernel;
        let patch = self.patch();
        let mut row = 0;
        for b in 0..self.batch {
            let img = b * self.in_h * self.in_w * self.in_c;
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let dst = &mut cols[row * patch..(row + 1) * patch];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let tap = (ky * kw + kx) * cg;
                            let seg = &mut dst[tap..tap + cg];
                            match self.source(oy, ox, ky, kx) {
                                Some((iy, ix)) => {
                                    let src = img + (iy * self.in_w + ix) * self.in_c + c0;
                                    seg.copy_from_slice(&x[src..src + cg]);
                                }
                                None => seg.fill(T::zero()),
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds patch gradients back onto the NHWC input gradient.
    pub fn col2im<T: Scalar>(&self, cols: &[T], group: usize, dx: &mut [T]) {
        let cg = self.group_in();
        let c0 = group * cg;
        let (kh, kw) = self.geom.kernel;
        let patch = self.patch();
        let mut row = 0;
        for b in 0..self.batch {
            let img = b * self.in_h * self.in_w * self.in_c;
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let src = &cols[row * patch..(row + 1) * patch];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            if let Some((iy, ix)) = self.source(oy, ox, ky, kx) {
                                let tap = (ky * kw + kx) * cg;
                                let dst = img + (iy * self.in_w + ix) * self.in_c + c0;
                                for (d, &s) in dx[dst..dst + cg].iter_mut().zip(&src[tap..tap + cg]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Strided GEMM writing into a column block of a wider row-major matrix.
///
/// `a`: `[m, k]` with row stride `lda`; `b`: `[k, n]` with row stride
/// `ldb`; `c`: `[m, n]` with row stride `ldc`. Transposition flags swap
/// the stored layout as in [`bgemm`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    lda: usize,
    trans_a: bool,
    b: &[T],
    ldb: usize,
    trans_b: bool,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    let (rsa, csa) = if trans_a { (1, lda as isize) } else { (lda as isize, 1) };
    let (rsb, csb) = if trans_b { (1, ldb as isize) } else { (ldb as isize, 1) };
    let a_need = if trans_a { (k - 1) * lda + m } else { (m - 1) * lda + k };
    let b_need = if trans_b { (n - 1) * ldb + k } else { (k - 1) * ldb + n };
    assert!(a.len() >= a_need && b.len() >= b_need && c.len() >= (m - 1) * ldc + n);
    // SAFETY: extents checked above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_round_trip() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let (p, s) = permute(&data, &shape, &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        // out[k, i, j] == in[i, j, k]
        assert_eq!(p[(2 + 1) * 3 + 2], data[(3 + 2) * 4 + 1]);
        let (back, s2) = permute(&p, &s, &inverse_permutation(&[2, 0, 1]));
        assert_eq!(s2, shape.to_vec());
        assert_eq!(back, data);
    }

    #[test]
    fn permute_keeping_last_axis() {
        let shape = [2, 3, 2];
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let (p, _) = permute(&data, &shape, &[1, 0, 2]);
        assert_eq!(&p[..4], &[0.0, 1.0, 6.0, 7.0]);
    }

    #[test]
    fn bgemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        bgemm(1, 2, 2, 2, 1.0, &a, false, &b, false, true, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        bgemm(1, 2, 2, 2, 1.0, &a, true, &b, true, true, 0.0, &mut c);
        // aᵀ bᵀ = (b a)ᵀ; b a = [[23,34],[31,46]]
        assert_eq!(c, [23.0, 31.0, 34.0, 46.0]);
    }

    #[test]
    fn conv_extent_formula() {
        assert_eq!(conv_output_extent(64, 3, 2, 1), Some(32));
        assert_eq!(conv_output_extent(16, 3, 1, 1), Some(16));
        assert_eq!(conv_output_extent(7, 3, 2, 1), Some(4));
        assert_eq!(conv_output_extent(1, 3, 1, 0), None);
    }
}
