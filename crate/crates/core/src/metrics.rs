//! Image metrics on `[3, H, W]` images in `[-1, 1]`, evaluated on the
//! `[0, 1]` rescaling.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{no_grad, Tensor};

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("metric inputs differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.numel() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| ((*x as f64 - *y as f64) * 0.5).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = (0..n).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = (0..n).map(|i| k[i] * rows[(yo + i) * wo + xo]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// valid positions only, averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    if a.rank() != 3 {
        return Err(Error::Shape(format!("ssim expects [C, H, W], got {:?}", a.shape())));
    }
    let (c, h, w) = (a.dim(0), a.dim(1), a.dim(2));
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Param(format!("image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |t: &Tensor| -> Vec<f64> { t.data()[ch * h * w..(ch + 1) * h * w].iter().map(|v| (*v as f64 + 1.0) * 0.5).collect() };
        let (x, y) = (plane(a), plane(b));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter_valid(&x, h, w, &k), filter_valid(&y, h, w, &k));
        let (sxx, syy, sxy) = (filter_valid(&xx, h, w, &k), filter_valid(&yy, h, w, &k), filter_valid(&xy, h, w, &k));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (vx, vy, cxy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
            let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
            acc += num / den;
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Frozen random convolutional feature pyramid used as a perceptual distance.
///
/// Each layer is a seeded 3x3 convolution followed by ReLU; features are
/// normalized to unit length across channels at every position and the
/// distance is the mean over layers of the spatially averaged squared
/// difference of normalized features.
#[derive(Clone, Debug)]
pub struct Perceptual {
    layers: Vec<(Tensor, Tensor, usize)>,
}

pub const PERCEPTUAL_SEED: u64 = 0x5EED_F00D;

impl Perceptual {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let spec = [(3usize, 16usize, 1usize), (16, 32, 2), (32, 64, 2)];
        let layers = spec
            .iter()
            .map(|&(ci, co, stride)| {
                let std = (2.0 / (ci * 9) as f32).sqrt();
                let w = rng::randn(&mut r, co * ci * 9).into_iter().map(|v| v * std).collect();
                let b = rng::randn(&mut r, co).into_iter().map(|v| v * 0.1).collect();
                (Tensor::new(w, &[co, ci, 3, 3]), Tensor::new(b, &[co]), stride)
            })
            .collect();
        Perceptual { layers }
    }

    /// Differentiable distance between batches `[N, 3, H, W]`, averaged over `N`.
    pub fn distance_tensor(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "perceptual inputs differ");
        let (mut fa, mut fb) = (a.clone(), b.clone());
        let mut total: Option<Tensor> = None;
        for (w, bias, stride) in &self.layers {
            fa = fa.conv2d(w, Some(bias), *stride, 1).relu();
            fb = fb.conv2d(w, Some(bias), *stride, 1).relu();
            let unit = |f: &Tensor| f.div(&f.sqr().sum_axis(1, true).add_scalar(1e-6).sqrt());
            let d = unit(&fa).sub(&unit(&fb)).sqr().sum_axis(1, false).mean_all();
            total = Some(match total {
                Some(t) => t.add(&d),
                None => d,
            });
        }
        total.unwrap().mul_scalar(1.0 / self.layers.len() as f32)
    }

    /// Distance between two `[3, H, W]` images.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        check_pair(a, b)?;
        if a.data() == b.data() {
            return Ok(0.0);
        }
        let _g = no_grad();
        let mut shape = vec![1];
        shape.extend_from_slice(a.shape());
        let ab = self.distance_tensor(&a.reshape(&shape), &b.reshape(&shape)).item() as f64;
        let ba = self.distance_tensor(&b.reshape(&shape), &a.reshape(&shape)).item() as f64;
        // Summation order differs between the two directions; average for exact symmetry.
        Ok(0.5 * (ab + ba))
    }
}

impl Default for Perceptual {
    fn default() -> Self {
        Perceptual::new(PERCEPTUAL_SEED)
    }
}

/// Root-mean-square difference between two equally shaped arrays.
pub fn rms_diff(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    (s / a.len().max(1) as f64).sqrt()
}
