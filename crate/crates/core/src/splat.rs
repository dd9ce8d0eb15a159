//! 3D Gaussians, splatter images, and a differentiable alpha-compositing rasterizer.
//!
//! Gaussians travel through the autodiff graph packed as `[N, 14]` rows in
//! the order position (3), scale (3), quaternion `w x y z` (4), opacity (1),
//! color (3). The rasterizer is a [`CustomOp`] over that tensor producing a
//! `[4, H, W]` output: RGB in `[-1, 1]` followed by accumulated alpha.

use std::cell::Cell;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::camera::{quat_to_matrix, CameraPose, Vec3};
use crate::error::{Error, Result};
use crate::scene::BACKGROUND;
use crate::tensor::{custom_op, CustomOp, Tensor};

pub const FIELDS: usize = 14;
pub const SPLAT_CHANNELS: usize = 12;
pub const SCALE_MIN: f32 = 1e-5;
pub const SCALE_MAX: f32 = 10.0;
pub const OPACITY_MIN: f64 = 1e-4;
pub const OPACITY_MAX: f64 = 1.0 - 1e-4;
pub const NEAR: f64 = 0.01;

const BG01: f64 = 127.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub position: [f32; 3],
    pub scale: [f32; 3],
    pub rotation: [f32; 4],
    pub opacity: f32,
    pub color: [f32; 3],
}

impl Gaussian {
    pub fn to_row(&self) -> [f32; FIELDS] {
        let mut r = [0.0; FIELDS];
        r[0..3].copy_from_slice(&self.position);
        r[3..6].copy_from_slice(&self.scale);
        r[6..10].copy_from_slice(&self.rotation);
        r[10] = self.opacity;
        r[11..14].copy_from_slice(&self.color);
        r
    }

    pub fn from_row(r: &[f32]) -> Self {
        Gaussian {
            position: [r[0], r[1], r[2]],
            scale: [r[3], r[4], r[5]],
            rotation: [r[6], r[7], r[8], r[9]],
            opacity: r[10],
            color: [r[11], r[12], r[13]],
        }
    }

    pub fn is_valid(&self) -> bool {
        let qn = self.rotation.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        (qn - 1.0).abs() <= 1e-6
            && self.scale.iter().all(|s| (SCALE_MIN..=SCALE_MAX).contains(s))
            && (0.0..=1.0).contains(&self.opacity)
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
            && self.position.iter().all(|p| p.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetSource {
    Fused,
    Loaded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian>,
    pub source: SetSource,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn packed(&self) -> Tensor {
        let data = self.gaussians.iter().flat_map(|g| g.to_row()).collect();
        Tensor::new(data, &[self.len(), FIELDS])
    }

    pub fn from_packed(t: &Tensor, source: SetSource) -> Self {
        let gaussians = t.data().chunks_exact(FIELDS).map(Gaussian::from_row).collect();
        GaussianSet { gaussians, source }
    }
}

/// Raw per-pixel parameters `[12, H, W]` tied to a camera: depth offset (1),
/// scale logits (3), rotation (4), opacity logit (1), color logits (3).
#[derive(Clone, Debug)]
pub struct SplatterImage {
    pub raw: Tensor,
    pub camera: CameraPose,
}

/// Constants of the splatter activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplatterParams {
    /// Base depth is the camera distance to the origin minus this margin.
    pub depth_margin: f64,
}

impl Default for SplatterParams {
    fn default() -> Self {
        SplatterParams { depth_margin: 1.0 }
    }
}

/// Unit world-space ray directions `[3, H*W]` for every pixel center.
pub fn ray_directions(pose: &CameraPose) -> Tensor {
    let (h, w) = pose.resolution;
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let d = pose.ray_dir(x, y);
            for c in 0..3 {
                out[c * h * w + y * w + x] = d[c] as f32;
            }
        }
    }
    Tensor::new(out, &[3, h * w])
}

/// Differentiable activation of a splatter image into packed Gaussians `[H*W, 14]`.
pub fn activate_splatter_tensor(s: &SplatterImage, params: &SplatterParams) -> Result<Tensor> {
    let (h, w) = s.camera.resolution;
    if s.raw.shape() != [SPLAT_CHANNELS, h, w] {
        return Err(Error::Shape(format!("splatter grid {:?} does not match camera {h}x{w}", s.raw.shape())));
    }
    if !s.raw.data().iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite splatter parameters".into()));
    }
    let n = h * w;
    let raw = s.raw.reshape(&[SPLAT_CHANNELS, n]);
    let d0 = (s.camera.distance_to_origin() - params.depth_margin) as f32;
    let depth = raw.narrow(0, 0, 1).softplus().add_scalar(d0);
    let origin = Tensor::new(s.camera.position.iter().map(|v| *v as f32).collect(), &[3, 1]);
    let pos = ray_directions(&s.camera).mul(&depth).add(&origin);
    let scale = raw.narrow(0, 1, 3).clamp(SCALE_MIN.ln(), SCALE_MAX.ln()).exp();
    // Offset so that a zero grid maps to the identity rotation.
    let q = raw.narrow(0, 4, 4).add(&Tensor::new(vec![1.0, 0.0, 0.0, 0.0], &[4, 1]));
    let qn = q.sqr().sum_axis(0, true).add_scalar(1e-12).sqrt();
    let rot = q.div(&qn);
    let opacity = raw.narrow(0, 8, 1).sigmoid();
    let color = raw.narrow(0, 9, 3).sigmoid();
    Ok(Tensor::cat(&[&pos, &scale, &rot, &opacity, &color], 0).permute(&[1, 0]))
}

pub fn activate_splatter(s: &SplatterImage, params: &SplatterParams) -> Result<Vec<Gaussian>> {
    let t = activate_splatter_tensor(s, params)?;
    Ok(t.data().chunks_exact(FIELDS).map(Gaussian::from_row).collect())
}

/// Concatenated packed Gaussians of all splatter images, differentiable.
pub fn fuse_tensor(splats: &[SplatterImage], params: &SplatterParams) -> Result<Tensor> {
    if splats.is_empty() {
        return Err(Error::Param("cannot fuse an empty list of splatter images".into()));
    }
    let parts = splats.iter().map(|s| activate_splatter_tensor(s, params)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Tensor::cat(&refs, 0))
}

pub fn fuse_splatter_images(splats: &[SplatterImage], params: &SplatterParams) -> Result<GaussianSet> {
    Ok(GaussianSet::from_packed(&fuse_tensor(splats, params)?, SetSource::Fused))
}

/// Screen-space footprint of a Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub mean2d: [f64; 2],
    /// Symmetric `[[a, b], [b, c]]` stored as `(a, b, c)`.
    pub cov2d: [f64; 3],
    pub depth: f64,
}

fn cov3d(scale: [f64; 3], q: [f64; 4]) -> ([f64; 9], [f64; 9]) {
    let r = quat_to_matrix(q);
    let mut m = [0.0; 9];
    for i in 0..3 {
        for k in 0..3 {
            m[3 * i + k] = r[3 * i + k] * scale[k];
        }
    }
    let mut sig = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            sig[3 * i + j] = (0..3).map(|k| m[3 * i + k] * m[3 * j + k]).sum();
        }
    }
    (sig, m)
}

fn norm_quat(q: [f64; 4]) -> ([f64; 4], f64) {
    let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt().max(1e-12);
    ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
}

/// `T = J W` for camera-space point `t`.
fn jw(pose: &CameraPose, t: Vec3) -> [f64; 6] {
    let f = pose.focal();
    let j = [f / t[2], 0.0, -f * t[0] / (t[2] * t[2]), 0.0, f / t[2], -f * t[1] / (t[2] * t[2])];
    let w = &pose.rotation;
    let mut out = [0.0; 6];
    for r in 0..2 {
        for c in 0..3 {
            out[3 * r + c] = (0..3).map(|k| j[3 * r + k] * w[3 * k + c]).sum();
        }
    }
    out
}

fn project_cov(tm: &[f64; 6], sig: &[f64; 9]) -> [f64; 3] {
    let mut ts = [0.0; 6];
    for r in 0..2 {
        for c in 0..3 {
            ts[3 * r + c] = (0..3).map(|k| tm[3 * r + k] * sig[3 * k + c]).sum();
        }
    }
    let e = |r: usize, c: usize| (0..3).map(|k| ts[3 * r + k] * tm[3 * c + k]).sum::<f64>();
    [e(0, 0), e(0, 1), e(1, 1)]
}

/// EWA projection with `1e-6 I` regularization; `None` when behind the near plane.
pub fn project_gaussian(g: &Gaussian, pose: &CameraPose) -> Option<Projection> {
    let pos = g.position.map(|v| v as f64);
    let t = pose.world_to_camera(pos);
    if t[2] <= NEAR {
        return None;
    }
    let (q, _) = norm_quat(g.rotation.map(|v| v as f64));
    let (sig, _) = cov3d(g.scale.map(|v| v as f64), q);
    let c = project_cov(&jw(pose, t), &sig);
    let f = pose.focal();
    let (cx, cy) = pose.principal();
    Some(Projection {
        mean2d: [f * t[0] / t[2] + cx, f * t[1] / t[2] + cy],
        cov2d: [c[0] + 1e-6, c[1], c[2] + 1e-6],
        depth: t[2],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    /// Footprint cut in standard deviations; contributions beyond it are zero.
    pub cutoff_sigma: f64,
    /// Screen-space variance (px^2) added to every projected covariance.
    pub blur: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig { cutoff_sigma: 3.0, blur: 0.3 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RasterStats {
    pub culled: usize,
    pub singular: usize,
}

#[derive(Clone, Copy)]
struct Splat {
    t: Vec3,
    mean: [f64; 2],
    conic: [f64; 3],
    depth: f64,
    opacity: f64,
    opacity_active: bool,
    color: [f64; 3],
    bbox: [usize; 4],
}

fn prepare(g: &[f32], pose: &CameraPose, cfg: &RasterConfig) -> (Vec<Option<Splat>>, RasterStats) {
    let (h, w) = pose.resolution;
    let f = pose.focal();
    let (cx, cy) = pose.principal();
    let mut stats = RasterStats::default();
    let splats = g
        .chunks_exact(FIELDS)
        .map(|r| {
            let pos = [r[0] as f64, r[1] as f64, r[2] as f64];
            let t = pose.world_to_camera(pos);
            if t[2] <= NEAR {
                stats.culled += 1;
                return None;
            }
            let (q, _) = norm_quat([r[6] as f64, r[7] as f64, r[8] as f64, r[9] as f64]);
            let (sig, _) = cov3d([r[3] as f64, r[4] as f64, r[5] as f64], q);
            let c = project_cov(&jw(pose, t), &sig);
            let cov = [c[0] + cfg.blur + 1e-6, c[1], c[2] + cfg.blur + 1e-6];
            let det = cov[0] * cov[2] - cov[1] * cov[1];
            if !(det > 1e-12) || !det.is_finite() {
                stats.singular += 1;
                return None;
            }
            let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
            let mean = [f * t[0] / t[2] + cx, f * t[1] / t[2] + cy];
            let mid = 0.5 * (cov[0] + cov[2]);
            let lmax = mid + (mid * mid - det).max(0.0).sqrt();
            let rad = cfg.cutoff_sigma * lmax.sqrt();
            let clip = |v: f64, hi: usize| v.clamp(0.0, hi as f64) as usize;
            let bbox = if rad.is_finite() {
                [clip((mean[0] - rad).floor(), w), clip((mean[0] + rad).ceil() + 1.0, w), clip((mean[1] - rad).floor(), h), clip((mean[1] + rad).ceil() + 1.0, h)]
            } else {
                [0, w, 0, h]
            };
            let op_raw = r[10] as f64;
            Some(Splat {
                t,
                mean,
                conic,
                depth: t[2],
                opacity: op_raw.clamp(OPACITY_MIN, OPACITY_MAX),
                opacity_active: (OPACITY_MIN..=OPACITY_MAX).contains(&op_raw),
                color: [r[11] as f64, r[12] as f64, r[13] as f64],
                bbox,
            })
        })
        .collect();
    if stats.singular > 0 {
        log::warn!("rasterizer skipped {} Gaussians with singular footprints", stats.singular);
    }
    (splats, stats)
}

/// Per-pixel front-to-back lists of candidate Gaussians.
fn pixel_lists(splats: &[Option<Splat>], h: usize, w: usize) -> Vec<Vec<u32>> {
    let mut order: Vec<usize> = (0..splats.len()).filter(|&i| splats[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (splats[a].unwrap().depth, splats[b].unwrap().depth);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let mut lists = vec![Vec::new(); h * w];
    for i in order {
        let s = splats[i].as_ref().unwrap();
        for y in s.bbox[2]..s.bbox[3] {
            for x in s.bbox[0]..s.bbox[1] {
                lists[y * w + x].push(i as u32);
            }
        }
    }
    lists
}

/// Gaussian falloff exponent and whether the pixel lies inside the cutoff.
fn falloff(s: &Splat, px: f64, py: f64, cut2: f64) -> Option<(f64, f64, f64)> {
    let (dx, dy) = (px - s.mean[0], py - s.mean[1]);
    let m = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
    if m > cut2 {
        return None;
    }
    Some((-0.5 * m, dx, dy))
}

/// Forward rasterization of packed Gaussians into `[4, H, W]`.
pub fn rasterize_forward(g: &[f32], pose: &CameraPose, cfg: &RasterConfig) -> (Vec<f32>, RasterStats) {
    let (h, w) = pose.resolution;
    let (splats, stats) = prepare(g, pose, cfg);
    let lists = pixel_lists(&splats, h, w);
    let cut2 = cfg.cutoff_sigma * cfg.cutoff_sigma;
    let hw = h * w;
    let mut out = vec![0.0f32; 4 * hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut trans = 1.0f64;
            let mut acc = [0.0f64; 3];
            for &i in &lists[p] {
                let s = splats[i as usize].as_ref().unwrap();
                let Some((power, _, _)) = falloff(s, px, py, cut2) else { continue };
                let a = s.opacity * power.exp();
                for c in 0..3 {
                    acc[c] += s.color[c] * a * trans;
                }
                trans *= 1.0 - a;
            }
            for c in 0..3 {
                // 2 (acc + trans * bg) - 1, arranged so that trans = 1 yields BACKGROUND exactly.
                out[c * hw + p] = (2.0 * acc[c] - (1.0 - trans) + trans * BACKGROUND as f64) as f32;
            }
            out[3 * hw + p] = (1.0 - trans) as f32;
        }
    }
    (out, stats)
}

fn quat_grad(q: [f64; 4], gr: &[f64; 9]) -> [f64; 4] {
    let [w, x, y, z] = q;
    let g = |r: usize, c: usize| gr[3 * r + c];
    [
        2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1)),
        2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1) - 2.0 * x * g(2, 2)),
        2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1) - 2.0 * y * g(2, 2)),
        2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1)),
    ]
}

/// Vector-Jacobian product of [`rasterize_forward`] with respect to the packed Gaussians.
pub fn rasterize_backward(g: &[f32], pose: &CameraPose, cfg: &RasterConfig, grad_out: &[f32]) -> Vec<f32> {
    let (h, w) = pose.resolution;
    let hw = h * w;
    let (splats, _) = prepare(g, pose, cfg);
    let lists = pixel_lists(&splats, h, w);
    let cut2 = cfg.cutoff_sigma * cfg.cutoff_sigma;
    let n = splats.len();
    // Per Gaussian: d/d mean (2), d/d conic (a, b, c), d/d opacity, d/d color (3).
    let mut g_mean = vec![[0.0f64; 2]; n];
    let mut g_conic = vec![[0.0f64; 3]; n];
    let mut g_op = vec![0.0f64; n];
    let mut g_col = vec![[0.0f64; 3]; n];
    let mut hits: Vec<(usize, f64, f64, f64, f64, f64)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let gc = [grad_out[p] as f64, grad_out[hw + p] as f64, grad_out[2 * hw + p] as f64];
            let ga = grad_out[3 * hw + p] as f64;
            if gc.iter().all(|v| *v == 0.0) && ga == 0.0 {
                continue;
            }
            hits.clear();
            let mut trans = 1.0f64;
            for &i in &lists[p] {
                let s = splats[i as usize].as_ref().unwrap();
                let Some((power, dx, dy)) = falloff(s, px, py, cut2) else { continue };
                let a = s.opacity * power.exp();
                hits.push((i as usize, a, trans, power, dx, dy));
                trans *= 1.0 - a;
            }
            // Suffix composite of everything behind each hit, per channel and for alpha.
            let mut b = [BG01; 3];
            let mut b_alpha = 0.0f64;
            for &(i, a, t, power, dx, dy) in hits.iter().rev() {
                let s = splats[i].as_ref().unwrap();
                let mut dl_da = ga * t * (1.0 - b_alpha);
                for c in 0..3 {
                    dl_da += 2.0 * gc[c] * t * (s.color[c] - b[c]);
                    g_col[i][c] += 2.0 * gc[c] * a * t;
                    b[c] = s.color[c] * a + (1.0 - a) * b[c];
                }
                b_alpha = a + (1.0 - a) * b_alpha;
                if s.opacity_active {
                    g_op[i] += dl_da * power.exp();
                }
                let dl_dpow = dl_da * a;
                g_conic[i][0] += dl_dpow * (-0.5 * dx * dx);
                g_conic[i][1] += dl_dpow * (-dx * dy);
                g_conic[i][2] += dl_dpow * (-0.5 * dy * dy);
                let (k0, k1, k2) = (s.conic[0], s.conic[1], s.conic[2]);
                g_mean[i][0] += dl_dpow * (k0 * dx + k1 * dy);
                g_mean[i][1] += dl_dpow * (k1 * dx + k2 * dy);
            }
        }
    }

    let f = pose.focal();
    let wr = &pose.rotation;
    let mut out = vec![0.0f32; g.len()];
    for (i, s) in splats.iter().enumerate() {
        let Some(s) = s else { continue };
        let r = &g[i * FIELDS..(i + 1) * FIELDS];
        let o = &mut out[i * FIELDS..(i + 1) * FIELDS];
        o[10] = g_op[i] as f32;
        for c in 0..3 {
            o[11 + c] = g_col[i][c] as f32;
        }
        // Conic = inverse covariance: dCov = -K dK K with symmetric matrix gradients.
        let k = [[s.conic[0], s.conic[1]], [s.conic[1], s.conic[2]]];
        let gk = [[g_conic[i][0], 0.5 * g_conic[i][1]], [0.5 * g_conic[i][1], g_conic[i][2]]];
        let mut gcov = [[0.0f64; 2]; 2];
        for a in 0..2 {
            for bb in 0..2 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for d in 0..2 {
                        acc -= k[a][c] * gk[c][d] * k[d][bb];
                    }
                }
                gcov[a][bb] = acc;
            }
        }
        let t = s.t;
        let tm = jw(pose, t);
        let (q, qn) = norm_quat([r[6] as f64, r[7] as f64, r[8] as f64, r[9] as f64]);
        let sc = [r[3] as f64, r[4] as f64, r[5] as f64];
        let (sig, m) = cov3d(sc, q);
        // dSigma = T^T G T ; dT = 2 G T Sigma.
        let mut g_sig = [0.0f64; 9];
        for a in 0..3 {
            for bb in 0..3 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for d in 0..2 {
                        acc += tm[3 * c + a] * gcov[c][d] * tm[3 * d + bb];
                    }
                }
                g_sig[3 * a + bb] = acc;
            }
        }
        let mut gts = [0.0f64; 6];
        for a in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for d in 0..2 {
                    let ts: f64 = (0..3).map(|kk| tm[3 * d + kk] * sig[3 * kk + c]).sum();
                    acc += gcov[a][d] * ts;
                }
                gts[3 * a + c] = 2.0 * acc;
            }
        }
        // T = J W: dJ = dT W^T.
        let mut gj = [0.0f64; 6];
        for a in 0..2 {
            for c in 0..3 {
                gj[3 * a + c] = (0..3).map(|kk| gts[3 * a + kk] * wr[3 * c + kk]).sum();
            }
        }
        let (tx, ty, tz) = (t[0], t[1], t[2]);
        let mut gt = [0.0f64; 3];
        gt[0] += g_mean[i][0] * f / tz;
        gt[1] += g_mean[i][1] * f / tz;
        gt[2] += -g_mean[i][0] * f * tx / (tz * tz) - g_mean[i][1] * f * ty / (tz * tz);
        gt[2] += -gj[0] * f / (tz * tz) - gj[4] * f / (tz * tz);
        gt[0] += -gj[2] * f / (tz * tz);
        gt[1] += -gj[5] * f / (tz * tz);
        gt[2] += gj[2] * 2.0 * f * tx / (tz * tz * tz) + gj[5] * 2.0 * f * ty / (tz * tz * tz);
        for c in 0..3 {
            o[c] = (0..3).map(|kk| wr[3 * kk + c] * gt[kk]).sum::<f64>() as f32;
        }
        // Sigma = M M^T, M = R S.
        let mut gm = [0.0f64; 9];
        for a in 0..3 {
            for c in 0..3 {
                gm[3 * a + c] = 2.0 * (0..3).map(|kk| g_sig[3 * a + kk] * m[3 * kk + c]).sum::<f64>();
            }
        }
        let rot = quat_to_matrix(q);
        let mut gr = [0.0f64; 9];
        for a in 0..3 {
            for c in 0..3 {
                gr[3 * a + c] = gm[3 * a + c] * sc[c];
            }
        }
        for c in 0..3 {
            o[3 + c] = (0..3).map(|a| gm[3 * a + c] * rot[3 * a + c]).sum::<f64>() as f32;
        }
        let gq = quat_grad(q, &gr);
        let dot: f64 = (0..4).map(|kk| gq[kk] * q[kk]).sum();
        for kk in 0..4 {
            o[6 + kk] = ((gq[kk] - q[kk] * dot) / qn) as f32;
        }
    }
    out
}

/// The rasterizer as an autodiff node.
pub struct RasterOp {
    pub pose: CameraPose,
    pub cfg: RasterConfig,
    stats: Cell<RasterStats>,
}

impl RasterOp {
    pub fn new(pose: CameraPose, cfg: RasterConfig) -> Self {
        RasterOp { pose, cfg, stats: Cell::new(RasterStats::default()) }
    }

    pub fn stats(&self) -> RasterStats {
        self.stats.get()
    }
}

impl CustomOp for RasterOp {
    fn name(&self) -> &'static str {
        "rasterize"
    }

    fn forward(&self, inputs: &[&[f32]]) -> (Vec<f32>, Vec<usize>) {
        let (out, stats) = rasterize_forward(inputs[0], &self.pose, &self.cfg);
        self.stats.set(stats);
        (out, vec![4, self.pose.resolution.0, self.pose.resolution.1])
    }

    fn backward(&self, inputs: &[&[f32]], _output: &[f32], grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(rasterize_backward(inputs[0], &self.pose, &self.cfg, grad_out))]
    }
}

/// Differentiable render of packed Gaussians `[N, 14]` into `[4, H, W]`.
pub fn rasterize(gaussians: &Tensor, pose: &CameraPose, cfg: &RasterConfig) -> Result<Tensor> {
    if gaussians.rank() != 2 || gaussians.dim(1) != FIELDS {
        return Err(Error::Shape(format!("expected [N, {FIELDS}] Gaussians, got {:?}", gaussians.shape())));
    }
    if gaussians.dim(0) == 0 {
        return Err(Error::Param("cannot rasterize an empty Gaussian set".into()));
    }
    Ok(custom_op(Rc::new(RasterOp::new(pose.clone(), *cfg)), &[gaussians]))
}

/// Renders a set into an RGB image `[3, H, W]` and alpha `[H*W]`.
pub fn render_set(set: &GaussianSet, pose: &CameraPose, cfg: &RasterConfig) -> Result<(Tensor, Vec<f32>)> {
    let out = rasterize(&set.packed(), pose, cfg)?;
    let (h, w) = pose.resolution;
    Ok((out.narrow(0, 0, 3), out.data()[3 * h * w..].to_vec()))
}

/// Splits a `[4, H, W]` render into RGB and alpha.
pub fn split_render(out: &Tensor) -> (Tensor, Tensor) {
    (out.narrow(0, 0, 3), out.narrow(0, 3, 1))
}

const MAGIC: &[u8; 4] = b"GSPL";
const VERSION: u32 = 1;

pub fn export_gaussians(set: &GaussianSet, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 56 * set.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for g in &set.gaussians {
        for v in g.to_row() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn import_gaussians(path: &Path) -> Result<GaussianSet> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 || &buf[0..4] != MAGIC {
        return Err(Error::format(path, "missing GSPL header"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported GSPL version {version}")));
    }
    let count = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    if buf.len() != 16 + 56 * count {
        return Err(Error::format(path, format!("expected {} bytes for {count} Gaussians, found {}", 16 + 56 * count, buf.len())));
    }
    let gaussians = buf[16..]
        .chunks_exact(56)
        .map(|rec| {
            let vals: Vec<f32> = rec.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            Gaussian::from_row(&vals)
        })
        .collect();
    Ok(GaussianSet { gaussians, source: SetSource::Loaded })
}

/// One Gaussian per line, fields in GSPL order.
pub fn dump_ascii(set: &GaussianSet, out: &mut impl Write) -> std::io::Result<()> {
    for g in &set.gaussians {
        let row = g.to_row();
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}
