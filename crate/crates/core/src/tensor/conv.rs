//! Image operations on `[N, C, H, W]` tensors.

use std::rc::Rc;

use super::{gemm, Tensor};

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f32], g: ConvGeom, cols: &mut [f32]) {
    let p = g.p();
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: ConvGeom, dx: &mut [f32]) {
    let p = g.p();
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D convolution. `self` is `[N, Ci, H, W]`, `weight` is `[Co, Ci, kh, kw]`,
    /// `bias` is `[Co]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {:?}", xs);
        assert_eq!(ws.len(), 4, "conv2d weight must be OIHW");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {:?} vs {:?}", xs, ws);
        let (n, co) = (xs[0], ws[0]);
        let g = ConvGeom {
            ci: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: conv_output_size(xs[2], ws[2], stride, pad),
            wo: conv_output_size(xs[3], ws[3], stride, pad),
        };
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[co]);
        }
        let (k, p) = (g.k(), g.p());
        let x = self.data();
        let wd = weight.data();
        let mut out = vec![0.0f32; n * co * p];
        let cols: Rc<Vec<f32>> = if g.is_pointwise() {
            Rc::new(Vec::new())
        } else {
            let mut cols = vec![0.0f32; n * k * p];
            for i in 0..n {
                im2col(&x[i * g.ci * g.h * g.w..], g, &mut cols[i * k * p..(i + 1) * k * p]);
            }
            Rc::new(cols)
        };
        for i in 0..n {
            let src: &[f32] = if g.is_pointwise() { &x[i * k * p..(i + 1) * k * p] } else { &cols[i * k * p..(i + 1) * k * p] };
            let dst = &mut out[i * co * p..(i + 1) * co * p];
            if let Some(b) = bias {
                for (o, &bv) in b.data().iter().enumerate() {
                    dst[o * p..(o + 1) * p].fill(bv);
                }
                gemm(co, k, p, wd, false, src, false, dst, 1.0);
            } else {
                gemm(co, k, p, wd, false, src, false, dst, 0.0);
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(
            Rc::new(out),
            vec![n, co, g.ho, g.wo],
            parents,
            Box::new(move |gout, parents, needs| {
                let x = parents[0].data();
                let wd = parents[1].data();
                let mut dx = needs[0].then(|| vec![0.0f32; n * g.ci * g.h * g.w]);
                let mut dw = needs[1].then(|| vec![0.0f32; co * k]);
                let mut db = (parents.len() > 2 && needs[2]).then(|| vec![0.0f32; co]);
                let mut dcols = if dx.is_some() && !g.is_pointwise() { vec![0.0f32; k * p] } else { Vec::new() };
                for i in 0..n {
                    let go = &gout[i * co * p..(i + 1) * co * p];
                    let src: &[f32] = if g.is_pointwise() { &x[i * k * p..(i + 1) * k * p] } else { &cols[i * k * p..(i + 1) * k * p] };
                    if let Some(dw) = dw.as_mut() {
                        gemm(co, p, k, go, false, src, true, dw, 1.0);
                    }
                    if let Some(db) = db.as_mut() {
                        for (o, d) in db.iter_mut().enumerate() {
                            *d += go[o * p..(o + 1) * p].iter().sum::<f32>();
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxi = &mut dx[i * g.ci * g.h * g.w..(i + 1) * g.ci * g.h * g.w];
                        if g.is_pointwise() {
                            gemm(k, co, p, wd, true, go, false, dxi, 0.0);
                        } else {
                            gemm(k, co, p, wd, true, go, false, &mut dcols, 0.0);
                            col2im(&dcols, g, dxi);
                        }
                    }
                }
                let mut res = vec![dx, dw];
                if parents.len() > 2 {
                    res.push(db);
                }
                res
            }),
        )
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&self) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 4);
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data();
        let mut out = vec![0.0f32; nc * ho * wo];
        for c in 0..nc {
            let xp = &x[c * h * w..];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = (2 * y) * w + 2 * xx;
                    out[(c * ho + y) * wo + xx] = 0.25 * (xp[i] + xp[i + 1] + xp[i + w] + xp[i + w + 1]);
                }
            }
        }
        Tensor::from_op(
            Rc::new(out),
            vec![s[0], s[1], ho, wo],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = vec![0.0f32; nc * h * w];
                for c in 0..nc {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = 0.25 * g[(c * ho + y) * wo + xx];
                            let i = c * h * w + (2 * y) * w + 2 * xx;
                            dx[i] = v;
                            dx[i + 1] = v;
                            dx[i + w] = v;
                            dx[i + w + 1] = v;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&self) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 4);
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let x = self.data();
        let mut out = vec![0.0f32; nc * ho * wo];
        for c in 0..nc {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(c * ho + y) * wo + xx] = x[(c * h + y / 2) * w + xx / 2];
                }
            }
        }
        Tensor::from_op(
            Rc::new(out),
            vec![s[0], s[1], ho, wo],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = vec![0.0f32; nc * h * w];
                for c in 0..nc {
                    for y in 0..ho {
                        for xx in 0..wo {
                            dx[(c * h + y / 2) * w + xx / 2] += g[(c * ho + y) * wo + xx];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Rearranges `[N, C, H, W]` into `[N, C·f², H/f, W/f]`.
    pub fn space_to_depth(&self, f: usize) -> Tensor {
        let s = self.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(h % f == 0 && w % f == 0);
        self.reshape(&[n, c, h / f, f, w / f, f])
            .permute(&[0, 1, 3, 5, 2, 4])
            .reshape(&[n, c * f * f, h / f, w / f])
    }

    /// Inverse of [`Tensor::space_to_depth`].
    pub fn depth_to_space(&self, f: usize) -> Tensor {
        let s = self.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(c % (f * f) == 0);
        self.reshape(&[n, c / (f * f), f, f, h, w])
            .permute(&[0, 1, 4, 2, 5, 3])
            .reshape(&[n, c / (f * f), h * f, w * f])
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine parameters.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f32) -> Tensor {
        let s = self.shape();
        assert!(s.len() >= 2);
        let (n, c) = (s[0], s[1]);
        assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
        assert_eq!(gamma.shape(), &[c]);
        assert_eq!(beta.shape(), &[c]);
        let hw: usize = s[2..].iter().product();
        let cg = c / groups;
        let m = (cg * hw) as f64;
        let x = self.data();
        let (gd, bd) = (gamma.data(), beta.data());
        let mut out = vec![0.0f32; x.len()];
        let mut xhat = vec![0.0f32; x.len()];
        let mut inv_std = vec![0.0f32; n * groups];
        for i in 0..n {
            for gi in 0..groups {
                let base = (i * c + gi * cg) * hw;
                let seg = &x[base..base + cg * hw];
                let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / m;
                let var = seg.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m;
                let is = 1.0 / (var + eps as f64).sqrt();
                inv_std[i * groups + gi] = is as f32;
                for cc in 0..cg {
                    let ch = gi * cg + cc;
                    for j in 0..hw {
                        let idx = base + cc * hw + j;
                        let xh = ((x[idx] as f64 - mean) * is) as f32;
                        xhat[idx] = xh;
                        out[idx] = xh * gd[ch] + bd[ch];
                    }
                }
            }
        }
        Tensor::from_op(
            Rc::new(out),
            s.to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, parents, needs| {
                let gd = parents[1].data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                let mut dx = needs[0].then(|| vec![0.0f32; g.len()]);
                for i in 0..n {
                    for gi in 0..groups {
                        let base = (i * c + gi * cg) * hw;
                        let mut sum_d = 0.0f64;
                        let mut sum_dx = 0.0f64;
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            for j in 0..hw {
                                let idx = base + cc * hw + j;
                                dgamma[ch] += g[idx] * xhat[idx];
                                dbeta[ch] += g[idx];
                                let d = (g[idx] * gd[ch]) as f64;
                                sum_d += d;
                                sum_dx += d * xhat[idx] as f64;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let is = inv_std[i * groups + gi] as f64;
                            let (md, mdx) = (sum_d / m, sum_dx / m);
                            for cc in 0..cg {
                                let ch = gi * cg + cc;
                                for j in 0..hw {
                                    let idx = base + cc * hw + j;
                                    let d = (g[idx] * gd[ch]) as f64;
                                    dx[idx] = (is * (d - md - xhat[idx] as f64 * mdx)) as f32;
                                }
                            }
                        }
                    }
                }
                vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
            }),
        )
    }
}
