//! Differentiable primitives.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, ConvGeometry, PAD};
use super::shape::{broadcast_index, broadcast_shapes};
use super::tape::{Op, Tape, Var};
use super::{Permutation, Tensor};

/// Numeric tolerance added to the variance in layer and batch normalization.
pub const NORM_EPS: f64 = 1e-6;

enum Binary {
    Add,
    Sub,
    Mul,
}

impl<'t, T: Scalar> Var<'t, T> {
    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, rhs: Var<'t, T>, kind: Binary) -> Result<Var<'t, T>> {
        self.same_tape(&rhs)?;
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (value, ia, ib, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            let out_shape = broadcast_shapes(name, a.value.shape(), b.value.shape())?;
            let ia = broadcast_index(a.value.shape(), &out_shape);
            let ib = broadcast_index(b.value.shape(), &out_shape);
            let (ad, bd) = (a.value.data(), b.value.data());
            let total: usize = out_shape.iter().product();
            let f = |x: T, y: T| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            };
            let data: Vec<T> = (0..total)
                .map(|o| {
                    let x = ad[ia.as_ref().map_or(o, |m| m[o])];
                    let y = bd[ib.as_ref().map_or(o, |m| m[o])];
                    f(x, y)
                })
                .collect();
            (
                Tensor::from_parts(out_shape, data),
                ia,
                ib,
                a.requires_grad || b.requires_grad,
            )
        };
        let (a, b) = (self.id, rhs.id);
        let op = match kind {
            Binary::Add => Op::Add { a, b, ia, ib },
            Binary::Sub => Op::Sub { a, b, ia, ib },
            Binary::Mul => Op::Mul { a, b, ia, ib },
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Broadcasting elementwise sum.
    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Binary::Sub)
    }

    /// Broadcasting elementwise product.
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Binary::Mul)
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * factor);
        self.unary(v, Op::Scale { a: self.id, factor })
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs)?;
        let (value, m, k, n, ia, ib, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            let (sa, sb) = (a.value.shape(), b.value.shape());
            if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
                return Err(Error::dim("matmul", sa, sb));
            }
            let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
            let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
            let batch = broadcast_shapes("matmul", ba, bb).map_err(|_| Error::dim("matmul", sa, sb))?;
            let nbatch: usize = batch.iter().product();
            let ia = broadcast_index(ba, &batch).unwrap_or_else(|| (0..nbatch).collect());
            let ib = broadcast_index(bb, &batch).unwrap_or_else(|| (0..nbatch).collect());
            let mut out = vec![T::zero(); nbatch * m * n];
            for (bi, (&oa, &ob)) in ia.iter().zip(&ib).enumerate() {
                kernels::gemm_nn(
                    &a.value.data()[oa * m * k..(oa + 1) * m * k],
                    &b.value.data()[ob * k * n..(ob + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let mut shape = batch;
            shape.extend([m, n]);
            (
                Tensor::from_parts(shape, out),
                m,
                k,
                n,
                ia,
                ib,
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                m,
                k,
                n,
                ia,
                ib,
            },
            rg,
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape { a: self.id }))
    }

    fn gather(self, shape: Vec<usize>, map: Vec<usize>) -> Var<'t, T> {
        let data = {
            let v = self.value();
            let src = v.data();
            map.iter()
                .map(|&i| if i == PAD { T::zero() } else { src[i] })
                .collect()
        };
        self.unary(Tensor::from_parts(shape, data), Op::Gather { a: self.id, map })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", &shape, axes));
        }
        let (out_shape, map) = kernels::permute_map(&shape, axes);
        Ok(self.gather(out_shape, map))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Result<Var<'t, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::dim("transpose", &self.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim("narrow", &shape, &[axis, start, len]));
        }
        let (out_shape, map) = kernels::narrow_map(&shape, axis, start, len);
        Ok(self.gather(out_shape, map))
    }

    /// Reorders the rows (axis 1) of a `[b, n, d]` tensor: row `i` of the
    /// output is row `index[i]` of the input.
    pub fn gather_rows(self, index: &Permutation) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() != 3 || shape[1] != index.len() {
            return Err(Error::dim("gather_rows", &shape, &[index.len()]));
        }
        let map = kernels::rows_map(shape[0], shape[1], shape[2], index.as_slice());
        Ok(self.gather(shape, map))
    }

    /// Unfolds `[b, c, h, w]` into patch rows `[b, g, oh·ow, (c/g)·k²]`.
    pub fn im2col(self, geom: &ConvGeometry) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let expect = [geom.batch, geom.in_channels, geom.height, geom.width];
        if shape != expect || !geom.in_channels.is_multiple_of(geom.groups) || geom.height + 2 * geom.padding < geom.kernel {
            return Err(Error::dim("im2col", &shape, &expect));
        }
        let out_shape = vec![
            geom.batch,
            geom.groups,
            geom.out_height() * geom.out_width(),
            geom.patch_len(),
        ];
        Ok(self.gather(out_shape, geom.im2col_map()))
    }

    pub fn softmax(self) -> Result<Var<'t, T>> {
        let v = self.value();
        if !v.is_finite() {
            return Err(Error::Numeric("softmax of non-finite input".into()));
        }
        let len = *v.shape().last().unwrap_or(&1);
        let out = Tensor::from_parts(v.shape().to_vec(), kernels::softmax_rows(v.data(), len));
        drop(v);
        Ok(self.unary(out, Op::Softmax { a: self.id, len }))
    }

    pub fn log_softmax(self) -> Result<Var<'t, T>> {
        let v = self.value();
        if !v.is_finite() {
            return Err(Error::Numeric("log_softmax of non-finite input".into()));
        }
        let len = *v.shape().last().unwrap_or(&1);
        let out = Tensor::from_parts(v.shape().to_vec(), kernels::log_softmax_rows(v.data(), len));
        drop(v);
        Ok(self.unary(out, Op::LogSoftmax { a: self.id, len }))
    }

    /// `x·Φ(x)` with the exact Gaussian CDF.
    pub fn gelu(self) -> Var<'t, T> {
        let v = self.value().map(|x| x * kernels::normal_cdf(x));
        self.unary(v, Op::Gelu { a: self.id })
    }

    pub fn relu(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.max(T::zero()));
        self.unary(v, Op::Relu { a: self.id })
    }

    /// Zero-mean unit-variance over the last axis (no affine).
    pub fn normalize_last(self, eps: T) -> Var<'t, T> {
        let (out, rstd, len) = {
            let v = self.value();
            let len = *v.shape().last().unwrap_or(&1);
            let (xhat, rstd, _, _) = kernels::normalize_rows(v.data(), len, eps);
            (Tensor::from_parts(v.shape().to_vec(), xhat), rstd, len)
        };
        self.unary(
            out,
            Op::Normalize {
                a: self.id,
                len,
                rstd,
                channels: None,
            },
        )
    }

    /// Per-channel normalization of `[b, c, h, w]` with batch statistics.
    /// Also returns the per-channel batch mean and biased variance.
    pub fn normalize_channels(self, eps: T) -> Result<(Var<'t, T>, Vec<T>, Vec<T>)> {
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(Error::dim("batch_norm", &shape, &[0, 0, 0, 0]));
        }
        let (b, c, s) = (shape[0], shape[1], shape[2] * shape[3]);
        let (out, rstd, mean, var) = {
            let v = self.value();
            let cm = kernels::channel_major(v.data(), b, c, s, false);
            let (xhat, rstd, mean, var) = kernels::normalize_rows(&cm, b * s, eps);
            (kernels::channel_major(&xhat, b, c, s, true), rstd, mean, var)
        };
        let node = self.unary(
            Tensor::from_parts(shape, out),
            Op::Normalize {
                a: self.id,
                len: b * s,
                rstd,
                channels: Some((b, c, s)),
            },
        );
        Ok((node, mean, var))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::dim("mean_axis", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = {
            let v = self.value();
            let src = v.data();
            let scale = T::from_usize(len).expect("axis length").recip();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += src[(o * len + l) * inner + i];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v *= scale);
            out
        };
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.unary(
            Tensor::from_parts(out_shape, data),
            Op::MeanAxis {
                a: self.id,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Sum of every element as a rank-0 tensor.
    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().sum_all();
        self.unary(Tensor::scalar(s), Op::SumAll { a: self.id })
    }

    /// Mean of every element as a rank-0 tensor.
    pub fn mean(self) -> Var<'t, T> {
        let n = T::from_usize(self.value().len()).expect("element count");
        self.sum().scale(n.recip())
    }
}

/// Batched matrix product, `[.., m, k] · [.., k, n]`.
pub fn matmul<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    a.matmul(b)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_lastdim<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.softmax()
}

/// `gain ⊙ normalize(x) + bias` over the last axis.
pub fn layer_norm<'t, T: Scalar>(x: Var<'t, T>, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
    let d = *x.shape().last().unwrap_or(&0);
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::dim("layer_norm", &x.shape(), &gain.shape()));
    }
    if eps <= T::zero() {
        return Err(Error::config("layer_norm eps must be positive"));
    }
    x.normalize_last(eps).mul(gain)?.add(bias)
}

pub fn gelu<T: Scalar>(x: Var<'_, T>) -> Var<'_, T> {
    x.gelu()
}

/// Grouped square-kernel 2-D convolution via patch unfolding and one batched
/// matmul. `weight` is `[cout, cin/groups, k, k]`.
pub fn conv2d_grouped<'t, T: Scalar>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: usize,
    groups: usize,
    padding: usize,
) -> Result<Var<'t, T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::dim("conv2d", &xs, &ws));
    }
    let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (ws[0], ws[2]);
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::config(format!(
            "conv channels {cin}->{cout} not divisible by groups {groups}"
        )));
    }
    if ws[1] != cin / groups {
        return Err(Error::dim("conv2d", &xs, &ws));
    }
    if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::config(format!("conv input {h}x{w} too small for kernel {k}")));
    }
    let geom = ConvGeometry {
        batch: b,
        in_channels: cin,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
        groups,
    };
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let co_g = cout / groups;
    // [b, g, P, K] · [g, K, co_g] -> [b, g, P, co_g]
    let cols = x.im2col(&geom)?;
    let wmat = weight
        .reshape(&[groups, co_g, geom.patch_len()])?
        .transpose_last()?;
    let y = cols
        .matmul(wmat)?
        .permute(&[0, 1, 3, 2])?
        .reshape(&[b, cout, oh, ow])?;
    match bias {
        Some(bias) => y.add(bias.reshape(&[cout, 1, 1])?),
        None => Ok(y),
    }
}

/// Spatial mean: `[b, c, h, w] -> [b, c]`.
pub fn global_avg_pool<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::dim("global_avg_pool", &s, &[0, 0, 0, 0]));
    }
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.mean_axis(2)
}

pub fn gather_rows<'t, T: Scalar>(x: Var<'t, T>, index: &Permutation) -> Result<Var<'t, T>> {
    x.gather_rows(index)
}

/// Reverse sweep from a scalar loss; see [`Tape::backward`].
pub fn backward<'t, T: Scalar>(loss: Var<'t, T>, tape: &'t Tape<T>) -> Result<super::Gradients<T>> {
    tape.backward(loss)
}
