//! Networks of the pipeline: the multi-view teacher and student denoisers,
//! the one-step generator and the splatter-image reconstructor.

mod checkpoint;
mod train;
mod unet;

pub use checkpoint::{
    config_digest, digest_bytes, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CheckpointManifest, Stage, CHECKPOINT_MAGIC,
};
pub use train::{
    draw_batch, pretrain_reconstructor, reconstruction_loss, reconstruction_psnr, render_loss, stack, teacher_loss, train_teacher, ReconTrainConfig, TeacherTrainConfig,
    TrainLog, TrainRecord,
};
pub use unet::{sinusoidal_embedding, MultiViewUNet, UNetConfig};

use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, CameraRig};
use crate::diffusion::{self, Denoiser, DiffusionSchedule, PredictionKind};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::splat::{self, SplatterImage, SplatterParams, SPLAT_CHANNELS};
use crate::tensor::Tensor;

/// Denoiser over batches `[B, V, 3, H, W]` with one time per item.
pub trait BatchDenoiser {
    fn kind(&self) -> PredictionKind;
    fn schedule(&self) -> &DiffusionSchedule;
    /// `cond` is `[B, 3, H, W]`; `None` selects the unconditional branch.
    fn predict_batch(&self, x_t: &Tensor, ts: &[f64], cond: Option<&Tensor>) -> Result<Tensor>;
    fn params(&self) -> &ParamStore;
}

/// One-step map from noise and a condition image to multi-view images.
pub trait MultiViewGenerator {
    /// `z`: `[B, V, 3, H, W]`, `cond`: `[B, 3, H, W]`.
    fn generate(&self, z: &Tensor, cond: &Tensor) -> Result<Tensor>;
    fn params(&self) -> &ParamStore;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub net: UNetConfig,
    pub schedule: DiffusionSchedule,
}

/// Network predicting `v`, exposed as `output` kind.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub net: MultiViewUNet,
    pub params: ParamStore,
    pub output: PredictionKind,
}

/// Multi-view teacher: v-prediction, condition concatenated to every view.
pub fn make_teacher(config: &DenoiserConfig) -> Result<DenoiserModel> {
    let c = &config.net;
    if c.in_channels != 3 || c.out_channels != 3 || c.cond_channels != 3 || !c.time_embedding {
        return Err(Error::Config("teacher needs 3 input, output and condition channels and a time embedding".into()));
    }
    let mut params = ParamStore::new();
    let net = MultiViewUNet::new(c, &mut params)?;
    Ok(DenoiserModel { config: config.clone(), net, params, output: PredictionKind::V })
}

impl DenoiserModel {
    /// Student initialized as an exact copy, reporting eps-predictions.
    pub fn student_copy(&self) -> DenoiserModel {
        let mut s = self.fresh_copy();
        s.output = PredictionKind::Eps;
        s
    }

    /// Copy with independent parameter leaves and a reset evaluation counter.
    pub fn fresh_copy(&self) -> DenoiserModel {
        let mut params = ParamStore::new();
        let net = MultiViewUNet::new(&self.config.net, &mut params).expect("config was valid");
        DenoiserModel { config: self.config.clone(), net, params: self.params.deep_clone(), output: self.output }
    }

    /// Raw network output (`v`) for a batch.
    pub fn forward_v(&self, x_t: &Tensor, ts: &[f64], cond: Option<&Tensor>) -> Result<Tensor> {
        self.net.forward(&self.params, x_t, ts, cond)
    }
}

impl BatchDenoiser for DenoiserModel {
    fn kind(&self) -> PredictionKind {
        self.output
    }

    fn schedule(&self) -> &DiffusionSchedule {
        &self.config.schedule
    }

    fn predict_batch(&self, x_t: &Tensor, ts: &[f64], cond: Option<&Tensor>) -> Result<Tensor> {
        let v = self.forward_v(x_t, ts, cond)?;
        diffusion::convert_batch(&v, PredictionKind::V, self.output, x_t, ts, &self.config.schedule)
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }
}

fn with_batch(t: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.reshape(&shape)
}

fn without_batch(t: &Tensor) -> Tensor {
    t.reshape(&t.shape()[1..])
}

impl Denoiser for DenoiserModel {
    fn kind(&self) -> PredictionKind {
        self.output
    }

    fn predict(&self, x_t: &Tensor, t: f64, condition: Option<&Tensor>) -> Result<Tensor> {
        let cond = condition.map(with_batch);
        Ok(without_batch(&self.predict_batch(&with_batch(x_t), &[t], cond.as_ref())?))
    }
}

/// Teacher copy evaluated once at `t_gen` on pure noise, read out as `x0`
/// and clamped to `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Generator {
    pub model: DenoiserModel,
    pub t_gen: f64,
}

pub fn init_generator_from_teacher(teacher: &DenoiserModel, t_gen: Option<f64>) -> Result<Generator> {
    let s = teacher.config.schedule;
    let t_gen = t_gen.unwrap_or(s.t_max);
    if !(t_gen > 0.0 && t_gen <= 1.0) {
        return Err(Error::Param(format!("t_gen must lie in (0, 1], got {t_gen}")));
    }
    let mut model = teacher.fresh_copy();
    model.output = PredictionKind::X0;
    Ok(Generator { model, t_gen })
}

impl Generator {
    /// Builds a generator around existing parameters, e.g. from a checkpoint.
    pub fn from_parts(config: &DenoiserConfig, params: ParamStore, t_gen: f64) -> Result<Generator> {
        let mut fresh = ParamStore::new();
        let net = MultiViewUNet::new(&config.net, &mut fresh)?;
        check_layout(&fresh, &params)?;
        Ok(Generator { model: DenoiserModel { config: config.clone(), net, params, output: PredictionKind::X0 }, t_gen })
    }

    pub fn evaluations(&self) -> u64 {
        self.model.net.evaluations()
    }
}

impl MultiViewGenerator for Generator {
    fn generate(&self, z: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let ts = vec![self.t_gen; z.dim(0)];
        let v = self.model.forward_v(z, &ts, Some(cond))?;
        let x0 = diffusion::convert_batch(&v, PredictionKind::V, PredictionKind::X0, z, &ts, &self.model.config.schedule)?;
        Ok(x0.clamp(-1.0, 1.0))
    }

    fn params(&self) -> &ParamStore {
        &self.model.params
    }
}

/// Verifies that `params` has the names and shapes a freshly built network expects.
pub fn check_layout(expected: &ParamStore, params: &ParamStore) -> Result<()> {
    if expected.len() != params.len() {
        return Err(Error::Checkpoint(format!("architecture mismatch: {} parameters, expected {}", params.len(), expected.len())));
    }
    for ((_, n1, t1), (_, n2, t2)) in expected.iter().zip(params.iter()) {
        if n1 != n2 || t1.shape() != t2.shape() {
            return Err(Error::Checkpoint(format!("architecture mismatch at {n2} {:?}, expected {n1} {:?}", t2.shape(), t1.shape())));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructorConfig {
    pub net: UNetConfig,
    pub splat: SplatterParams,
    /// Initial Gaussian scale in world units.
    pub init_scale: f64,
}

/// Per-view splatter-image predictor conditioned on per-pixel rays.
#[derive(Clone, Debug)]
pub struct Reconstructor {
    pub config: ReconstructorConfig,
    pub net: MultiViewUNet,
    pub params: ParamStore,
}

/// World size of one pixel at the distance of the origin.
pub fn pixel_footprint(pose: &CameraPose) -> f64 {
    pose.distance_to_origin() / pose.focal()
}

pub fn make_reconstructor(config: &ReconstructorConfig) -> Result<Reconstructor> {
    let c = &config.net;
    if c.in_channels != 9 || c.out_channels != SPLAT_CHANNELS || c.cond_channels != 0 {
        return Err(Error::Config(format!("reconstructor needs 9 input, {SPLAT_CHANNELS} output and no condition channels")));
    }
    if !(config.init_scale > 0.0) {
        return Err(Error::Config("init_scale must be positive".into()));
    }
    let mut params = ParamStore::new();
    let net = MultiViewUNet::new(c, &mut params)?;
    let f2 = c.patch * c.patch;
    let mut bias = vec![0.0f32; SPLAT_CHANNELS * f2];
    for ch in 1..4 {
        bias[ch * f2..(ch + 1) * f2].fill(config.init_scale.ln() as f32);
    }
    params.set(net.output_bias_id(), bias);
    Ok(Reconstructor { config: config.clone(), net, params })
}

/// Per-pixel ray origin and unit direction `[V, 6, H, W]` for every pose.
pub fn ray_embedding(rig: &CameraRig) -> Tensor {
    let parts: Vec<Tensor> = rig
        .poses
        .iter()
        .map(|p| {
            let (h, w) = p.resolution;
            let origin = Tensor::new(p.position.iter().map(|v| *v as f32).collect(), &[3, 1]).expand(&[3, h * w]);
            Tensor::cat(&[&origin, &splat::ray_directions(p)], 0).reshape(&[1, 6, h, w])
        })
        .collect();
    Tensor::cat(&parts.iter().collect::<Vec<_>>(), 0)
}

impl Reconstructor {
    pub fn from_parts(config: &ReconstructorConfig, params: ParamStore) -> Result<Reconstructor> {
        let mut fresh = ParamStore::new();
        let net = MultiViewUNet::new(&config.net, &mut fresh)?;
        check_layout(&fresh, &params)?;
        Ok(Reconstructor { config: config.clone(), net, params })
    }

    pub fn evaluations(&self) -> u64 {
        self.net.evaluations()
    }

    fn check_rig(&self, rig: &CameraRig) -> Result<()> {
        let c = &self.config.net;
        if rig.len() != c.views || rig.poses.iter().any(|p| p.resolution != (c.resolution, c.resolution)) {
            return Err(Error::Shape(format!("rig of {} views does not match the reconstructor ({} views at {}px)", rig.len(), c.views, c.resolution)));
        }
        Ok(())
    }

    /// Raw splatter parameters `[B, V, 12, H, W]` for views `[B, V, 3, H, W]`.
    pub fn forward_raw(&self, views: &Tensor, rig: &CameraRig) -> Result<Tensor> {
        self.check_rig(rig)?;
        if views.rank() != 5 {
            return Err(Error::Shape(format!("views {:?}, expected [B, V, 3, H, W]", views.shape())));
        }
        let b = views.dim(0);
        let rays = ray_embedding(rig);
        let mut shape = vec![b];
        shape.extend_from_slice(rays.shape());
        let rays = with_batch(&rays).expand(&shape);
        if views.shape()[..2] != shape[..2] || views.shape()[3..] != shape[3..] || views.dim(2) != 3 {
            return Err(Error::Shape(format!("views {:?} do not match rig rays {:?}", views.shape(), shape)));
        }
        self.net.forward(&self.params, &Tensor::cat(&[views, &rays], 2), &[], None)
    }

    /// One splatter image per view of a single sample `[V, 3, H, W]`.
    pub fn forward(&self, views: &Tensor, rig: &CameraRig) -> Result<Vec<SplatterImage>> {
        let raw = without_batch(&self.forward_raw(&with_batch(views), rig)?);
        Ok(split_raw(&raw, rig))
    }

    /// Fused packed Gaussians `[V*H*W, 14]` of a single sample, differentiable.
    pub fn reconstruct(&self, views: &Tensor, rig: &CameraRig) -> Result<Tensor> {
        splat::fuse_tensor(&self.forward(views, rig)?, &self.config.splat)
    }
}

/// Splits raw parameters `[V, 12, H, W]` into splatter images of the rig's cameras.
pub fn split_raw(raw: &Tensor, rig: &CameraRig) -> Vec<SplatterImage> {
    rig.poses
        .iter()
        .enumerate()
        .map(|(k, p)| SplatterImage { raw: without_batch(&raw.narrow(0, k, 1)), camera: p.clone() })
        .collect()
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use crate::camera;
    use crate::rng;
    use crate::tensor::{no_grad, numel};

    fn randn(seed: u64, shape: &[usize]) -> Tensor {
        Tensor::new(rng::randn(&mut rng::seeded(seed), numel(shape)), shape)
    }

    #[test]
    fn generator_starts_as_converted_teacher() {
        let teacher = tiny_teacher(6, 8);
        let gen = init_generator_from_teacher(&teacher, None).unwrap();
        assert!(gen.params().bit_eq(&teacher.params));
        let z = randn(1, &[1, 6, 3, 8, 8]);
        let c = randn(2, &[1, 3, 8, 8]);
        let _g = no_grad();
        let out = gen.generate(&z, &c).unwrap();
        let t = gen.t_gen;
        let v = teacher.forward_v(&z, &[t], Some(&c)).unwrap();
        let x0 = diffusion::convert_prediction(&v, PredictionKind::V, PredictionKind::X0, &z, t, teacher.schedule()).unwrap();
        let expected = x0.clamp(-1.0, 1.0);
        let diff = out.data().iter().zip(expected.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-6);
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let other = gen.generate(&randn(3, &[1, 6, 3, 8, 8]), &c).unwrap();
        assert!(other.data() != out.data());
        assert_eq!(gen.evaluations(), 2);
    }

    #[test]
    fn copies_do_not_share_gradients() {
        let teacher = tiny_teacher(2, 8);
        let student = teacher.student_copy();
        let x = randn(4, &[1, 2, 3, 8, 8]);
        let g = student.predict_batch(&x, &[0.5], None).unwrap().sqr().mean_all().backward();
        assert!(student.params.grad_norm(&g) > 0.0);
        assert_eq!(teacher.params.grad_norm(&g), 0.0);
    }

    #[test]
    fn single_sample_denoiser_matches_batch() {
        let teacher = tiny_teacher(2, 8);
        let x = randn(5, &[2, 2, 3, 8, 8]);
        let c = randn(6, &[2, 3, 8, 8]);
        let _g = no_grad();
        let batch = teacher.predict_batch(&x, &[0.3, 0.6], Some(&c)).unwrap();
        let one = Denoiser::predict(&teacher, &without_batch(&x.narrow(0, 1, 1)), 0.6, Some(&without_batch(&c.narrow(0, 1, 1)))).unwrap();
        let diff = one.data().iter().zip(&batch.data()[one.numel()..]).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn center_ray_is_optical_axis() {
        let rig = tiny_rig(8);
        let rays = ray_embedding(&rig);
        assert_eq!(rays.shape(), [6, 6, 8, 8]);
        for (k, pose) in rig.poses.iter().enumerate() {
            // Average the four pixels around the principal point.
            let px = |c: usize, y: usize, x: usize| rays.data()[((k * 6 + c) * 8 + y) * 8 + x] as f64;
            let d: [f64; 3] = std::array::from_fn(|c| (px(3 + c, 3, 3) + px(3 + c, 3, 4) + px(3 + c, 4, 3) + px(3 + c, 4, 4)) / 4.0);
            let cos = camera::dot(camera::normalize(d), pose.forward());
            assert!(cos > 0.999, "{cos}");
            assert!((px(0, 0, 0) - pose.position[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn reconstructor_outputs_one_splatter_per_view() {
        let rec = tiny_reconstructor(8);
        let rig = tiny_rig(8);
        let _g = no_grad();
        for value in [-1.0f32, 1.0] {
            let splats = rec.forward(&Tensor::full(value, &[6, 3, 8, 8]), &rig).unwrap();
            assert_eq!(splats.len(), 6);
            for (s, p) in splats.iter().zip(&rig.poses) {
                assert_eq!(&s.camera, p);
                assert_eq!(s.raw.shape(), [SPLAT_CHANNELS, 8, 8]);
                assert!(s.raw.data().iter().all(|v| v.is_finite()));
            }
            let set = splat::fuse_splatter_images(&splats, &rec.config.splat).unwrap();
            assert_eq!(set.len(), 6 * 64);
            assert!(set.gaussians.iter().all(|g| g.is_valid()));
        }
        assert!(rec.forward(&Tensor::zeros(&[5, 3, 8, 8]), &rig).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let schedule = diffusion::make_schedule(diffusion::ScheduleKind::Cosine, 0.02, 0.98).unwrap();
        let mut net = tiny_net(6, 8, 1);
        net.cond_channels = 0;
        assert!(matches!(make_teacher(&DenoiserConfig { net, schedule }), Err(Error::Config(_))));
        let rec = tiny_reconstructor(8);
        let mut cfg = rec.config.clone();
        cfg.init_scale = 0.0;
        assert!(make_reconstructor(&cfg).is_err());
        let gen = init_generator_from_teacher(&tiny_teacher(6, 8), None).unwrap();
        assert!(Generator::from_parts(&gen.model.config, rec.params.clone(), 0.98).is_err());
    }
}
