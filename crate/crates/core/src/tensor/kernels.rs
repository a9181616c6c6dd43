//! Plain-slice numeric kernels. No allocation policy, no shape checks.

use crate::scalar::Scalar;

use super::shape::strides;

/// Marks an im2col slot that reads zero padding.
pub(crate) const PAD: usize = usize::MAX;

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            c[i * k + p] += s;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// Source index for every output element of an axis permutation.
pub(crate) fn permute_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    (out_shape.clone(), walk(&out_shape, &eff, 0))
}

/// Source index for every element of a slice `start..start+len` along `axis`.
pub(crate) fn narrow_map(shape: &[usize], axis: usize, start: usize, len: usize) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    (out_shape.clone(), walk(&out_shape, &in_strides, start * in_strides[axis]))
}

fn walk(out_shape: &[usize], eff: &[usize], base: usize) -> Vec<usize> {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut cur = base;
    for _ in 0..total {
        map.push(cur);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            cur += eff[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            cur -= eff[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    map
}

/// Row gather over axis 1 of a `[b, n, d]` tensor.
pub(crate) fn rows_map(b: usize, n: usize, d: usize, index: &[usize]) -> Vec<usize> {
    let mut map = Vec::with_capacity(b * n * d);
    for bi in 0..b {
        for &src in index {
            let base = (bi * n + src) * d;
            map.extend(base..base + d);
        }
    }
    map
}

/// Geometry of a square-kernel grouped convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Columns per patch inside one group: `(cin/g)·k²`.
    pub fn patch_len(&self) -> usize {
        self.in_channels / self.groups * self.kernel * self.kernel
    }

    /// Patch-unfolding map into `[b, g, oh·ow, (cin/g)·k·k]`; padded taps hold [`PAD`].
    pub(crate) fn im2col_map(&self) -> Vec<usize> {
        let (oh, ow) = (self.out_height(), self.out_width());
        let cg = self.in_channels / self.groups;
        let k = self.kernel;
        let mut map = Vec::with_capacity(self.batch * self.groups * oh * ow * self.patch_len());
        for b in 0..self.batch {
            for g in 0..self.groups {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ci in 0..cg {
                            let c = g * cg + ci;
                            let plane = (b * self.in_channels + c) * self.height * self.width;
                            for ky in 0..k {
                                let y = (oy * self.stride + ky) as isize - self.padding as isize;
                                for kx in 0..k {
                                    let x = (ox * self.stride + kx) as isize - self.padding as isize;
                                    if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
                                        map.push(PAD);
                                    } else {
                                        map.push(plane + y as usize * self.width + x as usize);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        map
    }
}

/// Normalizes each length-`len` run of `x` (stride-1 rows) to zero mean and
/// unit variance. Returns `(xhat, rstd per row, mean per row, biased var per row)`.
pub(crate) fn normalize_rows<T: Scalar>(x: &[T], len: usize, eps: T) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / len;
    let n = T::from_usize(len).expect("row length");
    let mut out = vec![T::zero(); x.len()];
    let mut rstds = Vec::with_capacity(rows);
    let mut means = Vec::with_capacity(rows);
    let mut vars = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * len..(r + 1) * len];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = (var + eps).sqrt().recip();
        for (o, &v) in out[r * len..(r + 1) * len].iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
        rstds.push(rstd);
        means.push(mean);
        vars.push(var);
    }
    (out, rstds, means, vars)
}

/// Backward of [`normalize_rows`]: `dx = rstd·(dy − mean(dy) − xhat·mean(dy·xhat))`.
pub(crate) fn normalize_rows_backward<T: Scalar>(dy: &[T], xhat: &[T], rstd: &[T], len: usize) -> Vec<T> {
    let n = T::from_usize(len).expect("row length");
    let mut dx = vec![T::zero(); dy.len()];
    for (r, &rs) in rstd.iter().enumerate() {
        let s = r * len..(r + 1) * len;
        let (g, h) = (&dy[s.clone()], &xhat[s.clone()]);
        let mean_g = g.iter().copied().sum::<T>() / n;
        let mean_gh = g.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((o, &gv), &hv) in dx[s].iter_mut().zip(g).zip(h) {
            *o = rs * (gv - mean_g - hv * mean_gh);
        }
    }
    dx
}

/// Moves axis 1 of a `[b, c, s]` layout to the front: `[c, b, s]`, and back.
pub(crate) fn channel_major<T: Copy>(x: &[T], b: usize, c: usize, s: usize, inverse: bool) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    if !inverse {
        for ci in 0..c {
            for bi in 0..b {
                let base = (bi * c + ci) * s;
                out.extend_from_slice(&x[base..base + s]);
            }
        }
    } else {
        for bi in 0..b {
            for ci in 0..c {
                let base = (ci * b + bi) * s;
                out.extend_from_slice(&x[base..base + s]);
            }
        }
    }
    out
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks(len).zip(out.chunks_mut(len)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - max).exp();
            sum += *ov;
        }
        for ov in o.iter_mut() {
            *ov /= sum;
        }
    }
    out
}

pub(crate) fn log_softmax_rows<T: Scalar>(x: &[T], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks(len).zip(out.chunks_mut(len)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = v - lse;
        }
    }
    out
}

/// Standard normal CDF via erf.
pub(crate) fn normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn normal_pdf<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    c * (-(x * x) * T::from_f64_lossy(0.5)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        gemm_nn(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // a·bᵀ with b stored 2x3 (rows of bᵀ)
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0f64; 4];
        gemm_nt(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c2, c);
        // aᵀ stored as 3x2 times b
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [0.0f64; 4];
        gemm_tn(&at, &b, &mut c3, 3, 2, 2);
        assert_eq!(c3, c);
    }

    #[test]
    fn permute_map_transposes() {
        let (shape, map) = permute_map(&[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(map, vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn narrow_map_middle_axis() {
        let (shape, map) = narrow_map(&[2, 3, 2], 1, 1, 2);
        assert_eq!(shape, vec![2, 2, 2]);
        assert_eq!(map, vec![2, 3, 4, 5, 8, 9, 10, 11]);
    }

    #[test]
    fn conv_output_extent() {
        let g = ConvGeometry {
            batch: 1,
            in_channels: 64,
            height: 28,
            width: 28,
            kernel: 3,
            stride: 2,
            padding: 1,
            groups: 64,
        };
        assert_eq!((g.out_height(), g.out_width()), (14, 14));
        assert_eq!(g.patch_len(), 9);
    }

    #[test]
    fn channel_major_round_trip() {
        let x: Vec<u32> = (0..24).collect();
        let y = channel_major(&x, 2, 3, 4, false);
        assert_eq!(&y[..4], &[0, 1, 2, 3]);
        assert_eq!(&y[4..8], &[12, 13, 14, 15]);
        assert_eq!(channel_major(&y, 2, 3, 4, true), x);
    }
}
