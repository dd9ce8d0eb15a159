//! Supervised training of the teacher denoiser and the reconstructor.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DenoiserModel, Reconstructor};
use crate::camera::{CameraPose, CameraRig};
use crate::diffusion::{self, batch_column};
use crate::error::{Error, Result};
use crate::metrics::{psnr, Perceptual};
use crate::nn::{Adam, Ema};
use crate::rng;
use crate::scene::SceneRecord;
use crate::splat::{self, RasterConfig};
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("record serializes");
            out.push(b'\n');
        }
        std::fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(|e| Error::io(path, e))
    }

    /// Mean loss over the first and last `n` records.
    pub fn head_tail_loss(&self, n: usize) -> (f64, f64) {
        let n = n.min(self.records.len()).max(1);
        let mean = |rs: &[TrainRecord]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len().max(1) as f64;
        (mean(&self.records[..n.min(self.records.len())]), mean(&self.records[self.records.len().saturating_sub(n)..]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f32,
    /// Probability of replacing the condition with the null condition.
    pub cond_dropout: f64,
    pub max_grad_norm: Option<f32>,
    /// Decay of the weight average kept as the final teacher; `None` keeps the raw weights.
    pub ema_decay: Option<f32>,
    pub seed: u64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig { steps: 2000, batch_size: 4, lr: 1e-3, cond_dropout: 0.1, max_grad_norm: Some(1.0), ema_decay: Some(0.999), seed: 0 }
    }
}

pub fn stack(items: &[&Tensor]) -> Tensor {
    let parts: Vec<Tensor> = items
        .iter()
        .map(|t| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.reshape(&shape)
        })
        .collect();
    Tensor::cat(&parts.iter().collect::<Vec<_>>(), 0)
}

/// Mean squared error of the v-prediction on `x_t = alpha x0 + sigma eps`,
/// with conditions of dropped items zeroed.
pub fn teacher_loss(model: &DenoiserModel, x0: &Tensor, cond: &Tensor, keep: &[bool], ts: &[f64], eps: &Tensor) -> Result<Tensor> {
    let s = &model.config.schedule;
    let x_t = diffusion::add_noise_batch(x0, eps, ts, s)?;
    let a: Vec<f64> = ts.iter().map(|&t| s.alpha(t)).collect();
    let sg: Vec<f64> = ts.iter().map(|&t| -s.sigma(t)).collect();
    let target = eps.mul(&batch_column(&a, 5)).add(&x0.mul(&batch_column(&sg, 5)));
    let mask: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    let cond = cond.mul(&batch_column(&mask, 4));
    let pred = model.forward_v(&x_t, ts, Some(&cond))?;
    Ok(pred.sub(&target).sqr().mean_all())
}

fn finite_or_abort(loss: f64, step: u64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, msg: format!("{what} loss is {loss}") })
    }
}

pub fn draw_batch(r: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    if batch <= n {
        sample(r, n, batch).into_vec()
    } else {
        (0..batch).map(|_| r.random_range(0..n)).collect()
    }
}

/// Trains the teacher in place on rig views of `scenes`.
pub fn train_teacher(model: &mut DenoiserModel, scenes: &[SceneRecord], cfg: &TeacherTrainConfig) -> Result<TrainLog> {
    if scenes.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Param("teacher training needs scenes and a positive batch size".into()));
    }
    let s = model.config.schedule;
    let mut r = rng::seeded(cfg.seed);
    let mut opt = Adam::new(&model.params, cfg.lr, (0.9, 0.999));
    opt.max_grad_norm = cfg.max_grad_norm;
    let mut ema = cfg.ema_decay.map(|d| Ema::new(&model.params, d));
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let start = Instant::now();
        let idx = draw_batch(&mut r, scenes.len(), cfg.batch_size);
        let x0 = stack(&idx.iter().map(|&i| &scenes[i].views.images).collect::<Vec<_>>());
        let cond = stack(&idx.iter().map(|&i| &scenes[i].condition).collect::<Vec<_>>());
        let ts: Vec<f64> = idx.iter().map(|_| rng::uniform(&mut r, s.t_min, s.t_max)).collect();
        let keep: Vec<bool> = idx.iter().map(|_| r.random::<f64>() >= cfg.cond_dropout).collect();
        let eps = Tensor::new(rng::randn(&mut r, x0.numel()), x0.shape());
        let loss = teacher_loss(model, &x0, &cond, &keep, &ts, &eps)?;
        let value = loss.item() as f64;
        finite_or_abort(value, step, "teacher")?;
        let grads = loss.backward();
        let norm = opt.step(&mut model.params, &grads);
        if let Some(e) = ema.as_mut() {
            e.update(&model.params);
        }
        log.records.push(TrainRecord { step, loss: value, grad_norm: norm as f64, wall_ms: start.elapsed().as_secs_f64() * 1e3 });
        if step % 100 == 0 {
            log::info!("teacher step {step}: loss {value:.5} grad {norm:.3}");
        }
    }
    if let Some(e) = ema {
        model.params = e.averaged(&model.params);
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f32,
    pub lambda_perceptual: f64,
    /// Held-out views per scene supervised in addition to the input views.
    pub novel_views: usize,
    pub max_grad_norm: Option<f32>,
    pub seed: u64,
}

impl Default for ReconTrainConfig {
    fn default() -> Self {
        ReconTrainConfig { steps: 1000, batch_size: 2, lr: 1e-3, lambda_perceptual: 1.0, novel_views: 2, max_grad_norm: Some(1.0), seed: 0 }
    }
}

/// Mean over `targets` of `MSE + lambda * perceptual` between renders of the
/// Gaussians reconstructed from `views` and the target images.
pub fn reconstruction_loss(
    rec: &Reconstructor,
    views: &Tensor,
    rig: &CameraRig,
    targets: &[(&CameraPose, &Tensor)],
    lambda: f64,
    perceptual: &Perceptual,
    raster: &RasterConfig,
) -> Result<Tensor> {
    if targets.is_empty() {
        return Err(Error::Param("reconstruction loss needs at least one target view".into()));
    }
    let gaussians = rec.reconstruct(views, rig)?;
    render_loss(&gaussians, targets, lambda, perceptual, raster)
}

pub fn render_loss(
    gaussians: &Tensor,
    targets: &[(&CameraPose, &Tensor)],
    lambda: f64,
    perceptual: &Perceptual,
    raster: &RasterConfig,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (pose, image) in targets {
        let rgb = splat::rasterize(gaussians, pose, raster)?.narrow(0, 0, 3);
        if rgb.shape() != image.shape() {
            return Err(Error::Shape(format!("render {:?} vs target {:?}", rgb.shape(), image.shape())));
        }
        let mut term = rgb.sub(image).sqr().mean_all();
        if lambda != 0.0 {
            let (h, w) = (image.dim(1), image.dim(2));
            let p = perceptual.distance_tensor(&rgb.reshape(&[1, 3, h, w]), &image.reshape(&[1, 3, h, w]));
            term = term.add(&p.mul_scalar(lambda as f32));
        }
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    Ok(total.expect("targets nonempty").mul_scalar(1.0 / targets.len() as f32))
}

/// Trains the reconstructor in place from ground-truth rig views.
pub fn pretrain_reconstructor(rec: &mut Reconstructor, scenes: &[SceneRecord], rig: &CameraRig, cfg: &ReconTrainConfig) -> Result<TrainLog> {
    if scenes.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Param("reconstructor training needs scenes and a positive batch size".into()));
    }
    let perceptual = Perceptual::default();
    let raster = RasterConfig::default();
    let mut r = rng::seeded(cfg.seed);
    let mut opt = Adam::new(&rec.params, cfg.lr, (0.9, 0.999));
    opt.max_grad_norm = cfg.max_grad_norm;
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let start = Instant::now();
        let idx = draw_batch(&mut r, scenes.len(), cfg.batch_size);
        let mut total: Option<Tensor> = None;
        for &i in &idx {
            let sc = &scenes[i];
            let mut targets: Vec<(&CameraPose, Tensor)> = rig.poses.iter().enumerate().map(|(k, p)| (p, sc.views.view(k))).collect();
            let n_extra = cfg.novel_views.min(sc.extra.len());
            for k in draw_batch(&mut r, sc.extra.len().max(1), n_extra) {
                targets.push((&sc.extra[k].0, sc.extra[k].1.clone()));
            }
            let refs: Vec<(&CameraPose, &Tensor)> = targets.iter().map(|(p, t)| (*p, t)).collect();
            let l = reconstruction_loss(rec, &sc.views.images, rig, &refs, cfg.lambda_perceptual, &perceptual, &raster)?;
            total = Some(match total {
                Some(t) => t.add(&l),
                None => l,
            });
        }
        let loss = total.expect("batch nonempty").mul_scalar(1.0 / idx.len() as f32);
        let value = loss.item() as f64;
        finite_or_abort(value, step, "reconstructor")?;
        let grads = loss.backward();
        let norm = opt.step(&mut rec.params, &grads);
        log.records.push(TrainRecord { step, loss: value, grad_norm: norm as f64, wall_ms: start.elapsed().as_secs_f64() * 1e3 });
        if step % 50 == 0 {
            log::info!("reconstructor step {step}: loss {value:.5} grad {norm:.3}");
        }
    }
    Ok(log)
}

/// Mean PSNR of input-view and held-out-view re-renderings over `scenes`.
pub fn reconstruction_psnr(rec: &Reconstructor, scenes: &[SceneRecord], rig: &CameraRig) -> Result<(f64, f64)> {
    let _g = no_grad();
    let raster = RasterConfig::default();
    let (mut input, mut novel, mut n_in, mut n_nov) = (0.0, 0.0, 0usize, 0usize);
    for sc in scenes {
        let g = rec.reconstruct(&sc.views.images, rig)?;
        for (k, p) in rig.poses.iter().enumerate() {
            input += psnr(&splat::rasterize(&g, p, &raster)?.narrow(0, 0, 3), &sc.views.view(k))?;
            n_in += 1;
        }
        for (p, img) in &sc.extra {
            novel += psnr(&splat::rasterize(&g, p, &raster)?.narrow(0, 0, 3), img)?;
            n_nov += 1;
        }
    }
    Ok((input / n_in.max(1) as f64, novel / n_nov.max(1) as f64))
}
