//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use geco_core::camera::{CameraPose, RigParams};
use geco_core::rng;
use geco_core::splat::{rasterize_backward, rasterize_forward, Gaussian, RasterConfig, FIELDS};
use rand::Rng;

pub mod lab;
pub mod suites;

pub fn small_pose(res: usize) -> CameraPose {
    RigParams { resolution: res, radius: 2.5, fov_y_deg: 50.0 }.pose(25.0, 10.0).unwrap()
}

/// A handful of well-conditioned Gaussians near the origin.
pub fn random_gaussians(seed: u64, n: usize) -> Vec<Gaussian> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|_| {
            let q: Vec<f32> = rng::randn(&mut r, 4);
            let qn = q.iter().map(|v| v * v).sum::<f32>().sqrt();
            Gaussian {
                position: [r.random_range(-0.3..0.3), r.random_range(-0.3..0.3), r.random_range(-0.3..0.3)],
                scale: [r.random_range(0.12..0.3), r.random_range(0.12..0.3), r.random_range(0.12..0.3)],
                rotation: [q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn],
                opacity: r.random_range(0.3..0.8),
                color: [r.random_range(0.1..0.9), r.random_range(0.1..0.9), r.random_range(0.1..0.9)],
            }
        })
        .collect()
}

pub fn pack(gs: &[Gaussian]) -> Vec<f32> {
    gs.iter().flat_map(|g| g.to_row()).collect()
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                o[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    o
}

fn transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = a[j][i];
        }
    }
    o
}

/// Scalar-loop renderer: projects every Gaussian with explicit matrices, then
/// composites every pixel over a depth-sorted copy of the whole list.
pub fn brute_force_render(gs: &[Gaussian], pose: &CameraPose, cfg: &RasterConfig) -> Vec<f64> {
    let (h, w) = pose.resolution;
    let f = 0.5 * h as f64 / (0.5 * pose.fov_y).tan();
    let (cx, cy) = (0.5 * w as f64, 0.5 * h as f64);
    let rw = [
        [pose.rotation[0], pose.rotation[1], pose.rotation[2]],
        [pose.rotation[3], pose.rotation[4], pose.rotation[5]],
        [pose.rotation[6], pose.rotation[7], pose.rotation[8]],
    ];
    struct P {
        z: f64,
        mean: [f64; 2],
        inv: [[f64; 2]; 2],
        op: f64,
        col: [f64; 3],
    }
    let mut ps: Vec<(usize, P)> = Vec::new();
    for (idx, g) in gs.iter().enumerate() {
        let d: Vec<f64> = (0..3).map(|i| g.position[i] as f64 - pose.position[i]).collect();
        let t: Vec<f64> = (0..3).map(|i| (0..3).map(|k| rw[i][k] * d[k]).sum()).collect();
        if t[2] <= 0.01 {
            continue;
        }
        let qn = g.rotation.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let [qw, qx, qy, qz] = g.rotation.map(|v| v as f64 / qn);
        let r = [
            [1.0 - 2.0 * (qy * qy + qz * qz), 2.0 * (qx * qy - qw * qz), 2.0 * (qx * qz + qw * qy)],
            [2.0 * (qx * qy + qw * qz), 1.0 - 2.0 * (qx * qx + qz * qz), 2.0 * (qy * qz - qw * qx)],
            [2.0 * (qx * qz - qw * qy), 2.0 * (qy * qz + qw * qx), 1.0 - 2.0 * (qx * qx + qy * qy)],
        ];
        let s2 = [[(g.scale[0] as f64).powi(2), 0.0, 0.0], [0.0, (g.scale[1] as f64).powi(2), 0.0], [0.0, 0.0, (g.scale[2] as f64).powi(2)]];
        let sigma = mat3_mul(&mat3_mul(&r, &s2), &transpose(&r));
        let cam_sigma = mat3_mul(&mat3_mul(&rw, &sigma), &transpose(&rw));
        let j = [[f / t[2], 0.0, -f * t[0] / (t[2] * t[2])], [0.0, f / t[2], -f * t[1] / (t[2] * t[2])]];
        let mut c2 = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                for k in 0..3 {
                    for l in 0..3 {
                        c2[a][b] += j[a][k] * cam_sigma[k][l] * j[b][l];
                    }
                }
            }
        }
        c2[0][0] += cfg.blur + 1e-6;
        c2[1][1] += cfg.blur + 1e-6;
        let det = c2[0][0] * c2[1][1] - c2[0][1] * c2[1][0];
        let inv = [[c2[1][1] / det, -c2[0][1] / det], [-c2[1][0] / det, c2[0][0] / det]];
        ps.push((
            idx,
            P {
                z: t[2],
                mean: [f * t[0] / t[2] + cx, f * t[1] / t[2] + cy],
                inv,
                op: (g.opacity as f64).clamp(1e-4, 1.0 - 1e-4),
                col: g.color.map(|v| v as f64),
            },
        ));
    }
    ps.sort_by(|a, b| a.1.z.partial_cmp(&b.1.z).unwrap().then(a.0.cmp(&b.0)));
    let bg = 127.0 / 255.0;
    let mut out = vec![0.0; 4 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut trans = 1.0;
            let mut col = [0.0; 3];
            for (_, p) in &ps {
                let d = [px - p.mean[0], py - p.mean[1]];
                let m = d[0] * (p.inv[0][0] * d[0] + p.inv[0][1] * d[1]) + d[1] * (p.inv[1][0] * d[0] + p.inv[1][1] * d[1]);
                if m > cfg.cutoff_sigma * cfg.cutoff_sigma {
                    continue;
                }
                let a = p.op * (-0.5 * m).exp();
                for c in 0..3 {
                    col[c] += p.col[c] * a * trans;
                }
                trans *= 1.0 - a;
            }
            for c in 0..3 {
                out[c * h * w + y * w + x] = 2.0 * (col[c] + trans * bg) - 1.0;
            }
            out[3 * h * w + y * w + x] = 1.0 - trans;
        }
    }
    out
}

pub fn image_l2(g: &[f32], pose: &CameraPose, cfg: &RasterConfig) -> f64 {
    rasterize_forward(g, pose, cfg).0.iter().map(|v| (*v as f64).powi(2)).sum()
}

pub const CLASSES: [(&str, std::ops::Range<usize>); 5] =
    [("position", 0..3), ("scale", 3..6), ("rotation", 6..10), ("opacity", 10..11), ("color", 11..14)];

/// Worst relative error, per parameter class, between the analytic gradient
/// of the image's squared L2 norm and central differences with step `h`.
pub fn raster_grad_errors(gs: &[Gaussian], pose: &CameraPose, cfg: &RasterConfig, h: f32) -> Vec<(&'static str, f64)> {
    let packed = pack(gs);
    let (out, _) = rasterize_forward(&packed, pose, cfg);
    let seed: Vec<f32> = out.iter().map(|v| 2.0 * v).collect();
    let analytic = rasterize_backward(&packed, pose, cfg, &seed);
    CLASSES
        .iter()
        .map(|(name, range)| {
            let mut num = Vec::new();
            let mut ana = Vec::new();
            for gi in 0..gs.len() {
                for k in range.clone() {
                    let i = gi * FIELDS + k;
                    let mut a = packed.clone();
                    a[i] += h;
                    let mut b = packed.clone();
                    b[i] -= h;
                    let step = (a[i] - b[i]) as f64;
                    num.push((image_l2(&a, pose, cfg) - image_l2(&b, pose, cfg)) / step);
                    ana.push(analytic[i] as f64);
                }
            }
            let diff: f64 = num.iter().zip(&ana).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale = num.iter().map(|x| x * x).sum::<f64>().sqrt().max(ana.iter().map(|x| x * x).sum::<f64>().sqrt());
            (*name, diff / scale.max(1e-12))
        })
        .collect()
}

/// Scalar-loop PSNR on the [0, 1] rescaling.
pub fn psnr_oracle(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = (a[i] as f64 + 1.0) / 2.0 - (b[i] as f64 + 1.0) / 2.0;
        s += d * d;
    }
    10.0 * (1.0 / (s / a.len() as f64)).log10()
}

/// Direct per-window SSIM: an explicit 11x11 double loop at every valid position.
pub fn ssim_oracle(a: &[f32], b: &[f32], c: usize, h: usize, w: usize) -> f64 {
    let mut g = [[0.0f64; 11]; 11];
    let mut gs = 0.0;
    for i in 0..11 {
        for j in 0..11 {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            g[i][j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            gs += g[i][j];
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for ch in 0..c {
        let px = |t: &[f32], y: usize, x: usize| (t[ch * h * w + y * w + x] as f64 + 1.0) / 2.0;
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i][j] / gs;
                        let (p, q) = (px(a, y0 + i, x0 + j), px(b, y0 + i, x0 + j));
                        mx += wt * p;
                        my += wt * q;
                        sxx += wt * p * p;
                        syy += wt * q * q;
                        sxy += wt * p * q;
                    }
                }
                let (vx, vy, cv) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / c as f64
}
