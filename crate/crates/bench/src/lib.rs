//! Fixtures shared by the benchmarks.

use geco_core::camera::{CameraPose, RigParams};
use geco_core::rng;
use geco_core::splat::Gaussian;
use geco_core::tensor::Tensor;

/// `n` random Gaussians around the origin, packed `[n, 14]`.
pub fn random_gaussians(n: usize, seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let mut data = Vec::with_capacity(n * 14);
    for _ in 0..n {
        let u = |r: &mut _, lo: f64, hi: f64| rng::uniform(r, lo, hi) as f32;
        let g = Gaussian {
            position: [u(&mut r, -0.6, 0.6), u(&mut r, -0.6, 0.6), u(&mut r, -0.6, 0.6)],
            scale: [u(&mut r, 0.01, 0.05), u(&mut r, 0.01, 0.05), u(&mut r, 0.01, 0.05)],
            rotation: [1.0, u(&mut r, -0.3, 0.3), u(&mut r, -0.3, 0.3), u(&mut r, -0.3, 0.3)],
            opacity: u(&mut r, 0.2, 0.9),
            color: [u(&mut r, 0.0, 1.0), u(&mut r, 0.0, 1.0), u(&mut r, 0.0, 1.0)],
        };
        data.extend_from_slice(&g.to_row());
    }
    Tensor::new(data, &[n, 14])
}

pub fn front_pose(resolution: usize) -> CameraPose {
    RigParams { resolution, ..RigParams::default() }.pose(30.0, 20.0).expect("valid pose")
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::new(rng::randn(&mut rng::seeded(seed), shape.iter().product()), shape)
}
