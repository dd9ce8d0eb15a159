//! Elementwise, reduction, shape and matrix operations.

use std::rc::Rc;

use super::{gemm, numel, Tensor};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let r = a.len().max(b.len());
    (0..r)
        .map(|i| {
            let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
            let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
            assert!(da == db || da == 1 || db == 1, "cannot broadcast {:?} with {:?}", a, b);
            da.max(db)
        })
        .collect()
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on broadcast axes).
pub(crate) fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let off = r - shape.len();
    let mut strides = vec![0; r];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Visits every index of `out` in row-major order with the matching offsets
/// into two strided operands.
pub(crate) fn for_each_strided(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let r = out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[r - 1];
    let (la, lb) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    loop {
        for j in 0..last {
            f(o + j, oa + j * la, ob + j * lb);
        }
        o += last;
        if o >= total {
            return;
        }
        let mut d = r - 1;
        loop {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary(a: &Tensor, b: &Tensor, op: BinOp) -> Tensor {
    let f = match op {
        BinOp::Add => |x: f32, y: f32| x + y,
        BinOp::Sub => |x: f32, y: f32| x - y,
        BinOp::Mul => |x: f32, y: f32| x * y,
        BinOp::Div => |x: f32, y: f32| x / y,
    };
    let (ad, bd) = (a.data(), b.data());
    let (out_shape, data) = if a.shape() == b.shape() {
        (a.shape().to_vec(), ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
    } else {
        let out = broadcast_shape(a.shape(), b.shape());
        let sa = bcast_strides(a.shape(), &out);
        let sb = bcast_strides(b.shape(), &out);
        let mut data = vec![0.0; numel(&out)];
        for_each_strided(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
        (out, data)
    };
    let shape_for_bw = out_shape.clone();
    Tensor::from_op(
        Rc::new(data),
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents, needs| {
            let (a, b) = (&parents[0], &parents[1]);
            let (ad, bd) = (a.data(), b.data());
            let mut ga = if needs[0] { Some(vec![0.0f32; a.numel()]) } else { None };
            let mut gb = if needs[1] { Some(vec![0.0f32; b.numel()]) } else { None };
            let sa = bcast_strides(a.shape(), &shape_for_bw);
            let sb = bcast_strides(b.shape(), &shape_for_bw);
            for_each_strided(&shape_for_bw, &sa, &sb, |o, ia, ib| {
                let go = g[o];
                let (da, db) = match op {
                    BinOp::Add => (go, go),
                    BinOp::Sub => (go, -go),
                    BinOp::Mul => (go * bd[ib], go * ad[ia]),
                    BinOp::Div => (go / bd[ib], -go * ad[ia] / (bd[ib] * bd[ib])),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += db;
                }
            });
            vec![ga, gb]
        }),
    )
}

fn unary(
    x: &Tensor,
    f: impl Fn(f32) -> f32,
    df: impl Fn(f32, f32) -> f32 + 'static,
) -> Tensor {
    let out = Rc::new(x.data().iter().map(|&v| f(v)).collect::<Vec<_>>());
    let saved = out.clone();
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g, parents, _| {
            let xd = parents[0].data();
            vec![Some(g.iter().zip(xd).zip(saved.iter()).map(|((&g, &x), &y)| g * df(x, y)).collect())]
        }),
    )
}

fn sigmoid_f(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_f(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary(self, other, BinOp::Div)
    }

    /// `self * scale + shift`, elementwise.
    pub fn affine(&self, scale: f32, shift: f32) -> Tensor {
        unary(self, move |x| x * scale + shift, move |_, _| scale)
    }

    pub fn mul_scalar(&self, s: f32) -> Tensor {
        self.affine(s, 0.0)
    }

    pub fn add_scalar(&self, s: f32) -> Tensor {
        self.affine(1.0, s)
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    pub fn sqr(&self) -> Tensor {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, |x| x.sqrt(), |_, y| 0.5 / y)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, |x| x.exp(), |_, y| y)
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, |x| x.tanh(), |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, sigmoid_f, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Tensor {
        unary(self, softplus_f, |x, _| sigmoid_f(x))
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn silu(&self) -> Tensor {
        unary(
            self,
            |x| x * sigmoid_f(x),
            |x, _| {
                let s = sigmoid_f(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        unary(self, move |x| x.clamp(lo, hi), move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 })
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let n = self.numel();
        Tensor::from_op(
            Rc::new(vec![s as f32]),
            vec![],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum_all().mul_scalar(1.0 / n as f32)
    }

    /// Sums over one axis.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let shape = self.shape();
        assert!(axis < shape.len());
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut out_shape = shape.to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        Tensor::from_op(
            Rc::new(out),
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0f32; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let n = self.shape()[axis];
        self.sum_axis(axis, keepdim).mul_scalar(1.0 / n as f32)
    }

    /// Same data, new shape. One dimension may be `usize::MAX` to infer it.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let mut shape = shape.to_vec();
        if let Some(pos) = shape.iter().position(|&d| d == usize::MAX) {
            let known: usize = shape.iter().filter(|&&d| d != usize::MAX).product();
            shape[pos] = self.numel() / known.max(1);
        }
        assert_eq!(numel(&shape), self.numel(), "cannot reshape {:?} into {:?}", self.shape(), shape);
        Tensor::from_op(
            self.data_rc(),
            shape,
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        )
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let shape = self.shape();
        assert_eq!(perm.len(), shape.len());
        let in_strides = row_major_strides(shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let sa: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let zeros = vec![0; perm.len()];
        let x = self.data();
        let mut out = vec![0.0f32; x.len()];
        for_each_strided(&out_shape, &sa, &zeros, |o, ia, _| out[o] = x[ia]);
        let bw_shape = out_shape.clone();
        Tensor::from_op(
            Rc::new(out),
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0f32; g.len()];
                for_each_strided(&bw_shape, &sa, &zeros, |o, ia, _| gx[ia] = g[o]);
                vec![Some(gx)]
            }),
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Tensor::from_op(
            Rc::new(out),
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0f32; outer * full * inner];
                for o in 0..outer {
                    gx[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn cat(tensors: &[&Tensor], axis: usize) -> Tensor {
        assert!(!tensors.is_empty());
        let base = tensors[0].shape().to_vec();
        for t in tensors {
            assert_eq!(t.rank(), base.len());
            for (d, (&a, &b)) in t.shape().iter().zip(&base).enumerate() {
                assert!(d == axis || a == b, "cat shape mismatch {:?} vs {:?}", t.shape(), base);
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &l) in tensors.iter().zip(&lens) {
                out.extend_from_slice(&t.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        Tensor::from_op(
            Rc::new(out),
            out_shape,
            tensors.iter().map(|t| (*t).clone()).collect(),
            Box::new(move |g, _, needs| {
                let mut grads: Vec<Option<Vec<f32>>> = lens
                    .iter()
                    .zip(needs)
                    .map(|(&l, &n)| if n { Some(Vec::with_capacity(outer * l * inner)) } else { None })
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gi, &l) in grads.iter_mut().zip(&lens) {
                        if let Some(gi) = gi {
                            gi.extend_from_slice(&g[off..off + l * inner]);
                        }
                        off += l * inner;
                    }
                }
                grads
            }),
        )
    }

    /// Broadcasts to `shape` by materializing copies.
    pub fn expand(&self, shape: &[usize]) -> Tensor {
        let out_shape = broadcast_shape(self.shape(), shape);
        assert_eq!(out_shape, shape, "cannot expand {:?} to {:?}", self.shape(), shape);
        let st = bcast_strides(self.shape(), &out_shape);
        let zeros = vec![0; out_shape.len()];
        let x = self.data();
        let mut out = vec![0.0f32; numel(&out_shape)];
        for_each_strided(&out_shape, &st, &zeros, |o, ia, _| out[o] = x[ia]);
        let n_in = self.numel();
        let bw_shape = out_shape.clone();
        Tensor::from_op(
            Rc::new(out),
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0f32; n_in];
                for_each_strided(&bw_shape, &st, &zeros, |o, ia, _| gx[ia] += g[o]);
                vec![Some(gx)]
            }),
        )
    }

    /// Batched matrix product. `self` is `[..., m, k]`; `other` is either
    /// `[k, n]` (shared) or `[..., k, n]` with identical batch dimensions.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (ash, bsh) = (self.shape(), other.shape());
        assert!(ash.len() >= 2 && bsh.len() >= 2, "matmul needs rank >= 2");
        let m = ash[ash.len() - 2];
        let k = ash[ash.len() - 1];
        let n = bsh[bsh.len() - 1];
        assert_eq!(bsh[bsh.len() - 2], k, "matmul inner dims {:?} x {:?}", ash, bsh);
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let shared = bsh.len() == 2;
        if !shared {
            assert_eq!(&ash[..ash.len() - 2], &bsh[..bsh.len() - 2], "matmul batch dims differ");
        }
        let (a, b) = (self.data(), other.data());
        let mut out = vec![0.0f32; batch * m * n];
        if shared {
            // One large product over the flattened batch.
            gemm(batch * m, k, n, a, false, b, false, &mut out, 0.0);
        } else {
            for i in 0..batch {
                gemm(m, k, n, &a[i * m * k..], false, &b[i * k * n..], false, &mut out[i * m * n..], 0.0);
            }
        }
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.extend([m, n]);
        Tensor::from_op(
            Rc::new(out),
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents, needs| {
                let (a, b) = (parents[0].data(), parents[1].data());
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0f32; batch * m * k];
                    if shared {
                        gemm(batch * m, n, k, g, false, b, true, &mut ga, 0.0);
                    } else {
                        for i in 0..batch {
                            gemm(m, n, k, &g[i * m * n..], false, &b[i * k * n..], true, &mut ga[i * m * k..], 0.0);
                        }
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    if shared {
                        let mut gb = vec![0.0f32; k * n];
                        gemm(k, batch * m, n, a, true, g, false, &mut gb, 0.0);
                        gb
                    } else {
                        let mut gb = vec![0.0f32; batch * k * n];
                        for i in 0..batch {
                            gemm(k, m, n, &a[i * m * k..], true, &g[i * m * n..], false, &mut gb[i * k * n..], 0.0);
                        }
                        gb
                    }
                });
                vec![ga, gb]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let n = *self.shape().last().expect("softmax on scalar");
        let x = self.data();
        let mut out = vec![0.0f32; x.len()];
        for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                s += *o;
            }
            orow.iter_mut().for_each(|o| *o /= s);
        }
        let out = Rc::new(out);
        let saved = out.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0f32; g.len()];
                for ((grow, yrow), xrow) in g.chunks(n).zip(saved.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((gx, &gy), &y) in xrow.iter_mut().zip(grow).zip(yrow) {
                        *gx = y * (gy - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::check_grad;
    use super::*;

    fn seq(n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|i| (i as f32 * 1.7 + 0.3).sin() * scale).collect()
    }

    #[test]
    fn broadcast_add_matches_manual() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = Tensor::new(vec![10.0, 20.0, 30.0], &[3]);
        assert_eq!(a.add(&b).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let c = Tensor::new(vec![100.0, 200.0], &[2, 1]);
        assert_eq!(a.add(&c).data(), &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]);
    }

    #[test]
    fn binary_grads_with_broadcast() {
        let b = Tensor::new(seq(3, 1.0).iter().map(|v| v + 2.0).collect(), &[1, 3, 1]);
        for op in 0..4 {
            let err = check_grad(seq(24, 1.0), &[2, 3, 4], |x| {
                let y = match op {
                    0 => x.add(&b),
                    1 => x.sub(&b),
                    2 => x.mul(&b),
                    _ => x.div(&b),
                };
                y.sqr().sum_all()
            });
            assert!(err < 1e-2, "op {op} err {err}");
        }
        // gradient into the broadcast operand
        let x = Tensor::new(seq(24, 1.0), &[2, 3, 4]);
        let err = check_grad(vec![1.5, 2.5, 3.5], &[1, 3, 1], |b| x.div(b).sqr().sum_all());
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn unary_grads() {
        let fs: Vec<(&str, fn(&Tensor) -> Tensor)> = vec![
            ("tanh", |t| t.tanh()),
            ("sigmoid", |t| t.sigmoid()),
            ("softplus", |t| t.softplus()),
            ("silu", |t| t.silu()),
            ("exp", |t| t.exp()),
            ("sqr", |t| t.sqr()),
            ("affine", |t| t.affine(2.5, -1.0)),
        ];
        for (name, f) in fs {
            let err = check_grad(seq(10, 1.5), &[10], |x| f(x).mul(x).sum_all());
            assert!(err < 1e-2, "{name}: {err}");
        }
        let err = check_grad(seq(10, 1.0).iter().map(|v| v + 2.0).collect(), &[10], |x| x.sqrt().sum_all());
        assert!(err < 1e-2);
    }

    #[test]
    fn shape_op_grads() {
        let w = Tensor::new(seq(24, 1.0), &[24]);
        let err = check_grad(seq(24, 1.0), &[2, 3, 4], |x| {
            x.permute(&[2, 0, 1]).reshape(&[24]).mul(&w).sum_all()
        });
        assert!(err < 1e-2);
        let err = check_grad(seq(24, 1.0), &[2, 3, 4], |x| {
            let a = x.narrow(1, 1, 2);
            let b = x.narrow(1, 0, 1);
            Tensor::cat(&[&a, &b, &a], 1).sqr().sum_all()
        });
        assert!(err < 1e-2);
        let err = check_grad(seq(6, 1.0), &[2, 1, 3], |x| x.expand(&[2, 4, 3]).sqr().mean_all());
        assert!(err < 1e-2);
        let err = check_grad(seq(24, 1.0), &[2, 3, 4], |x| x.sum_axis(1, false).sqr().sum_all());
        assert!(err < 1e-2);
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::new(seq(60, 1.0), &[3, 4, 5]);
        let y = x.permute(&[1, 2, 0]).permute(&[2, 0, 1]);
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn matmul_grads() {
        let b = Tensor::new(seq(12, 1.0), &[4, 3]);
        let err = check_grad(seq(16, 1.0), &[2, 2, 4], |a| a.matmul(&b).sqr().sum_all());
        assert!(err < 1e-2);
        let a = Tensor::new(seq(16, 1.0), &[2, 2, 4]);
        let err = check_grad(seq(12, 1.0), &[4, 3], |b| a.matmul(b).sqr().sum_all());
        assert!(err < 1e-2);
        let err = check_grad(seq(24, 1.0), &[2, 4, 3], |b| a.matmul(b).sqr().sum_all());
        assert!(err < 1e-2);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad() {
        let x = Tensor::new(seq(12, 3.0), &[3, 4]);
        let y = x.softmax_last();
        for row in y.data().chunks(4) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let w = Tensor::new(seq(12, 1.0), &[3, 4]);
        let err = check_grad(seq(12, 2.0), &[3, 4], |x| x.softmax_last().mul(&w).sum_all());
        assert!(err < 1e-2);
    }
}
