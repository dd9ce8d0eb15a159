//! Stage I: variational score distillation of the one-step generator.
//!
//! The generator update follows `w(t) (eps_teacher - eps_student) dx0/dtheta`,
//! implemented as the inner product of a stop-gradient residual with the
//! generator output. The student is trained online to denoise the
//! generator's own samples.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, batch_column, PredictionKind};
use crate::error::{Error, Result};
use crate::models::{BatchDenoiser, Checkpoint, DenoiserModel, Generator, MultiViewGenerator, Stage};
use crate::nn::{check_finite, Adam, ParamStore};
use crate::rng;
use crate::scene::{image_grid, save_png};
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightFn {
    Constant,
    Sigma2,
}

impl WeightFn {
    pub fn weight(self, sigma: f64) -> f64 {
        match self {
            WeightFn::Constant => 1.0,
            WeightFn::Sigma2 => sigma * sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VSDConfig {
    pub guidance_teacher: f64,
    pub guidance_student: f64,
    pub t_range_student: (f64, f64),
    pub t_range_vsd: (f64, f64),
    pub weight_fn: WeightFn,
    pub lr_gen: f64,
    pub lr_stu: f64,
    pub adam_betas: (f64, f64),
    pub steps: u64,
    pub batch_size: usize,
    pub max_grad_norm: Option<f64>,
    /// Steps between sample grids; 0 disables them.
    pub sample_every: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for VSDConfig {
    fn default() -> Self {
        VSDConfig {
            guidance_teacher: 4.0,
            guidance_student: 1.0,
            t_range_student: (0.02, 0.98),
            t_range_vsd: (0.02, 0.98),
            weight_fn: WeightFn::Constant,
            lr_gen: 1e-6,
            lr_stu: 1e-6,
            adam_betas: (0.9, 0.999),
            steps: 5000,
            batch_size: 1,
            max_grad_norm: None,
            sample_every: 500,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl VSDConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.guidance_teacher >= 0.0 && self.guidance_student >= 0.0) {
            return bad("guidance scales must be >= 0");
        }
        for (lo, hi) in [self.t_range_student, self.t_range_vsd] {
            if !(lo > 0.0 && lo <= hi && hi < 1.0) {
                return bad("time ranges must satisfy 0 < lo <= hi < 1");
            }
        }
        if !(self.lr_gen > 0.0 && self.lr_stu > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        Ok(())
    }

    /// True when the student/generator learning-rate ratio leaves [0.1, 10].
    pub fn lr_imbalanced(&self) -> bool {
        let r = self.lr_stu / self.lr_gen;
        !(0.1..=10.0).contains(&r)
    }
}

/// Classifier-free guided eps-prediction for a batch.
pub fn guided_eps_batch(den: &dyn BatchDenoiser, x_t: &Tensor, ts: &[f64], cond: &Tensor, guidance: f64) -> Result<Tensor> {
    let s = *den.schedule();
    let as_eps = |p: Tensor| diffusion::convert_batch(&p, den.kind(), PredictionKind::Eps, x_t, ts, &s);
    let c = as_eps(den.predict_batch(x_t, ts, Some(cond))?)?;
    if guidance == 1.0 {
        return Ok(c);
    }
    let u = as_eps(den.predict_batch(x_t, ts, None)?)?;
    diffusion::cfg_combine(&c, &u, guidance)
}

pub struct VsdTerms {
    /// Surrogate whose parameter gradient is the VSD estimator.
    pub loss: Tensor,
    /// Generator output, still attached to the generator parameters.
    pub x0: Tensor,
    /// Stop-gradient residual `w(t) (eps_teacher - eps_student)`.
    pub residual: Tensor,
}

/// `<sg[w(t) (eps_teacher - eps_student)], G(z)>`, averaged over the batch.
#[allow(clippy::too_many_arguments)]
pub fn vsd_generator_loss(
    gen: &dyn MultiViewGenerator,
    teacher: &dyn BatchDenoiser,
    student: &dyn BatchDenoiser,
    cond: &Tensor,
    z: &Tensor,
    ts: &[f64],
    eps: &Tensor,
    cfg: &VSDConfig,
) -> Result<VsdTerms> {
    let x0 = gen.generate(z, cond)?;
    let s = *teacher.schedule();
    let residual = {
        let _g = no_grad();
        let x_t = diffusion::add_noise_batch(&x0.detach(), eps, ts, &s)?;
        let e_pre = guided_eps_batch(teacher, &x_t, ts, cond, cfg.guidance_teacher)?;
        let e_stu = guided_eps_batch(student, &x_t, ts, cond, cfg.guidance_student)?;
        let w: Vec<f64> = ts.iter().map(|&t| cfg.weight_fn.weight(s.sigma(t))).collect();
        let r = e_pre.sub(&e_stu).mul(&batch_column(&w, x0.rank()));
        if let Err(e) = check_finite(&r, "VSD residual") {
            return Err(Error::Numeric(format!("{e} at t = {ts:?}")));
        }
        r
    };
    let loss = residual.mul(&x0).sum_all().mul_scalar(1.0 / x0.dim(0) as f32);
    Ok(VsdTerms { loss, x0, residual })
}

/// `mean((eps_student(x_t; cond, t) - eps)^2)` on a detached generator sample.
pub fn student_loss(student: &dyn BatchDenoiser, x0: &Tensor, cond: Option<&Tensor>, ts: &[f64], eps: &Tensor) -> Result<Tensor> {
    let x0 = x0.detach();
    let s = *student.schedule();
    let x_t = diffusion::add_noise_batch(&x0, eps, ts, &s)?;
    let pred = student.predict_batch(&x_t, ts, cond)?;
    let pred = diffusion::convert_batch(&pred, student.kind(), PredictionKind::Eps, &x_t, ts, &s)?;
    Ok(pred.sub(eps).sqr().mean_all())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub step: u64,
    pub loss_gen: f64,
    pub loss_stu: f64,
    pub grad_norm_gen: f64,
    pub grad_norm_stu: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Stage1Log {
    pub records: Vec<Stage1Record>,
    pub generator_updates: u64,
    pub student_updates: u64,
}

/// Where Stage I writes its log, sample grids and checkpoints.
pub struct Stage1Output<'a> {
    pub dir: &'a Path,
    /// Content digests of the teacher (and any other parents).
    pub parents: Vec<String>,
}

pub fn stage1_checkpoint(gen: &Generator, student: &DenoiserModel, cfg: &VSDConfig, parents: Vec<String>) -> Result<Checkpoint> {
    #[derive(Serialize)]
    struct Cfg<'a> {
        generator: &'a crate::models::DenoiserConfig,
        t_gen: f64,
        vsd: &'a VSDConfig,
    }
    Checkpoint::new(
        Stage::Stage1,
        &Cfg { generator: &gen.model.config, t_gen: gen.t_gen, vsd: cfg },
        Some(gen.model.config.schedule),
        Some(PredictionKind::X0),
        vec![("generator".into(), gen.model.params.clone()), ("student".into(), student.params.clone())],
        parents,
    )
}

fn adam(ps: &ParamStore, lr: f64, cfg: &VSDConfig) -> Adam {
    let mut a = Adam::new(ps, lr as f32, (cfg.adam_betas.0 as f32, cfg.adam_betas.1 as f32));
    a.max_grad_norm = cfg.max_grad_norm.map(|v| v as f32);
    a
}

/// Alternating generator/student optimization over `conditions` (`[3, H, W]` each).
pub fn train_stage1(
    gen: &mut Generator,
    teacher: &DenoiserModel,
    student: &mut DenoiserModel,
    conditions: &[Tensor],
    cfg: &VSDConfig,
    out: Option<&Stage1Output>,
) -> Result<Stage1Log> {
    cfg.validate()?;
    if conditions.is_empty() {
        return Err(Error::Param("stage I needs at least one condition image".into()));
    }
    if cfg.lr_imbalanced() {
        log::warn!("student/generator learning-rate ratio {} is outside [0.1, 10]", cfg.lr_stu / cfg.lr_gen);
    }
    let net = &gen.model.config.net;
    let shape = [cfg.batch_size, net.views, 3, net.resolution, net.resolution];
    let mut r = rng::seeded(cfg.seed);
    let mut opt_gen = adam(&gen.model.params, cfg.lr_gen, cfg);
    let mut opt_stu = adam(&student.params, cfg.lr_stu, cfg);
    let mut log = Stage1Log::default();
    let mut jsonl = match out {
        Some(o) => {
            std::fs::create_dir_all(o.dir).map_err(|e| Error::io(o.dir, e))?;
            let p = o.dir.join("stage1_log.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let draw_ts = |r: &mut rand_chacha::ChaCha8Rng, range: (f64, f64)| -> Vec<f64> { (0..cfg.batch_size).map(|_| rng::uniform(r, range.0, range.1)).collect() };
    for step in 0..cfg.steps {
        let start = Instant::now();
        let idx = crate::models::draw_batch(&mut r, conditions.len(), cfg.batch_size);
        let cond = crate::models::stack(&idx.iter().map(|&i| &conditions[i]).collect::<Vec<_>>());
        let z = Tensor::new(rng::randn(&mut r, shape.iter().product()), &shape);
        let ts = draw_ts(&mut r, cfg.t_range_vsd);
        let eps = Tensor::new(rng::randn(&mut r, z.numel()), &shape);
        let terms = vsd_generator_loss(gen, teacher, student, &cond, &z, &ts, &eps, cfg).map_err(|e| Error::Divergence { step, msg: e.to_string() })?;
        let loss_gen = terms.loss.item() as f64;
        let grads = terms.loss.backward();
        let norm_gen = opt_gen.step(&mut gen.model.params, &grads) as f64;

        let ts = draw_ts(&mut r, cfg.t_range_student);
        let eps = Tensor::new(rng::randn(&mut r, z.numel()), &shape);
        let stu_cond = if cfg.guidance_student != 1.0 && r.random::<f64>() < 0.1 { None } else { Some(&cond) };
        let ls = student_loss(student, &terms.x0, stu_cond, &ts, &eps)?;
        let loss_stu = ls.item() as f64;
        let grads = ls.backward();
        let norm_stu = opt_stu.step(&mut student.params, &grads) as f64;
        log.generator_updates += 1;
        log.student_updates += 1;
        if !(loss_gen.is_finite() && loss_stu.is_finite() && norm_gen.is_finite() && norm_stu.is_finite()) {
            return Err(Error::Divergence { step, msg: format!("losses {loss_gen} / {loss_stu}, gradient norms {norm_gen} / {norm_stu}") });
        }
        let rec = Stage1Record { step, loss_gen, loss_stu, grad_norm_gen: norm_gen, grad_norm_stu: norm_stu, wall_ms: start.elapsed().as_secs_f64() * 1e3 };
        if let Some((f, p)) = jsonl.as_mut() {
            let mut line = serde_json::to_vec(&rec).expect("record serializes");
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io(p.as_path(), e))?;
        }
        if step % 100 == 0 {
            log::info!("stage1 step {step}: gen {loss_gen:.4e} ({norm_gen:.3}) stu {loss_stu:.5} ({norm_stu:.3})");
        }
        log.records.push(rec);
        if let Some(o) = out {
            let done = step + 1;
            if cfg.sample_every > 0 && (done % cfg.sample_every == 0 || done == cfg.steps) {
                let x0 = terms.x0.detach();
                let views: Vec<Tensor> = (0..net.views).map(|k| x0.narrow(0, 0, 1).narrow(1, k, 1).reshape(&[3, net.resolution, net.resolution])).collect();
                let mut row = vec![cond.narrow(0, 0, 1).reshape(&[3, net.resolution, net.resolution])];
                row.extend(views);
                save_png(&image_grid(&row, row.len()), &o.dir.join(format!("samples_{done:06}.png")))?;
            }
            if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.steps {
                let ck = stage1_checkpoint(gen, student, cfg, o.parents.clone())?;
                crate::models::save_checkpoint(&ck, &o.dir.join("stage1.ckpt"))?;
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, DiffusionSchedule, ScheduleKind};
    use crate::models::testing::tiny_teacher;
    use crate::models::{init_generator_from_teacher, MultiViewGenerator};
    use crate::tensor::numel;

    fn randn(seed: u64, shape: &[usize]) -> Tensor {
        Tensor::new(rng::randn(&mut rng::seeded(seed), numel(shape)), shape)
    }

    #[test]
    fn fixed_point_gives_zero_gradient() {
        let teacher = tiny_teacher(6, 8);
        let gen = init_generator_from_teacher(&teacher, None).unwrap();
        let student = teacher.fresh_copy();
        for g in [1.0, 4.0] {
            let cfg = VSDConfig { guidance_teacher: g, guidance_student: g, ..VSDConfig::default() };
            let terms = vsd_generator_loss(&gen, &teacher, &student, &randn(1, &[1, 3, 8, 8]), &randn(2, &[1, 6, 3, 8, 8]), &[0.4], &randn(3, &[1, 6, 3, 8, 8]), &cfg).unwrap();
            let grads = terms.loss.backward();
            assert!(gen.model.params.grad_norm(&grads) < 1e-6);
        }
    }

    #[test]
    fn cross_gradients_are_detached() {
        let teacher = tiny_teacher(6, 8);
        let gen = init_generator_from_teacher(&teacher, None).unwrap();
        let mut student = teacher.student_copy();
        student.params.set(student.params.id_of("conv_out.b").unwrap(), vec![0.1; 12]);
        let cond = randn(4, &[1, 3, 8, 8]);
        let terms = vsd_generator_loss(&gen, &teacher, &student, &cond, &randn(5, &[1, 6, 3, 8, 8]), &[0.5], &randn(6, &[1, 6, 3, 8, 8]), &VSDConfig::default()).unwrap();
        let g = terms.loss.backward();
        assert!(gen.model.params.grad_norm(&g) > 0.0);
        assert_eq!(student.params.grad_norm(&g), 0.0);
        assert_eq!(teacher.params.grad_norm(&g), 0.0);
        let ls = student_loss(&student, &terms.x0, Some(&cond), &[0.3], &randn(7, &[1, 6, 3, 8, 8])).unwrap();
        let g = ls.backward();
        assert_eq!(gen.model.params.grad_norm(&g), 0.0);
        assert!(student.params.grad_norm(&g) > 0.0);
    }

    #[test]
    fn weight_function_scales_gradient_by_sigma_squared() {
        let teacher = tiny_teacher(6, 8);
        let gen = init_generator_from_teacher(&teacher, None).unwrap();
        let student = teacher.student_copy();
        let (cond, z, eps) = (randn(8, &[1, 3, 8, 8]), randn(9, &[1, 6, 3, 8, 8]), randn(10, &[1, 6, 3, 8, 8]));
        let t = 0.35;
        let grad = |w: WeightFn| {
            let cfg = VSDConfig { weight_fn: w, ..VSDConfig::default() };
            let terms = vsd_generator_loss(&gen, &teacher, &student, &cond, &z, &[t], &eps, &cfg).unwrap();
            let g = terms.loss.backward();
            gen.model.params.iter().flat_map(|(_, _, p)| g.get(p).map(|v| v.to_vec()).unwrap_or_default()).collect::<Vec<f32>>()
        };
        let (c, s2) = (grad(WeightFn::Constant), grad(WeightFn::Sigma2));
        let sigma2 = teacher.config.schedule.sigma(t).powi(2) as f32;
        let num: f32 = c.iter().zip(&s2).map(|(a, b)| (a * sigma2 - b).powi(2)).sum::<f32>().sqrt();
        let den: f32 = s2.iter().map(|b| b * b).sum::<f32>().sqrt();
        assert!(den > 0.0 && num / den < 1e-5, "{}", num / den);
    }

    /// Exact eps-predictor for data drawn from `N(mu, s^2 I)`.
    struct GaussianDenoiser {
        mu: f64,
        s: f64,
        schedule: DiffusionSchedule,
        params: ParamStore,
    }

    impl GaussianDenoiser {
        fn coefs(&self, t: f64) -> (f64, f64) {
            let (a, sg) = (self.schedule.alpha(t), self.schedule.sigma(t));
            let d = a * a * self.s * self.s + sg * sg;
            (sg / d, -sg * a * self.mu / d)
        }
    }

    impl BatchDenoiser for GaussianDenoiser {
        fn kind(&self) -> PredictionKind {
            PredictionKind::Eps
        }
        fn schedule(&self) -> &DiffusionSchedule {
            &self.schedule
        }
        fn predict_batch(&self, x_t: &Tensor, ts: &[f64], _cond: Option<&Tensor>) -> Result<Tensor> {
            let (k, b) = self.coefs(ts[0]);
            Ok(x_t.affine(k as f32, b as f32))
        }
        fn params(&self) -> &ParamStore {
            &self.params
        }
    }

    /// `x0 = tanh(W z + beta)` with a 3x3 `W` and a scalar `beta`: 10 parameters.
    struct ToyGenerator {
        params: ParamStore,
    }

    impl ToyGenerator {
        fn output(w: &[f64], beta: f64, z: &[f64]) -> Vec<f64> {
            (0..3).map(|i| ((0..3).map(|j| w[i * 3 + j] * z[j]).sum::<f64>() + beta).tanh()).collect()
        }
    }

    impl MultiViewGenerator for ToyGenerator {
        fn generate(&self, z: &Tensor, _cond: &Tensor) -> Result<Tensor> {
            let w = self.params.by_name("w").unwrap();
            let beta = self.params.by_name("beta").unwrap();
            let zv = z.reshape(&[1, 3]);
            Ok(zv.matmul(&w.permute(&[1, 0])).add(beta).tanh().reshape(&[1, 1, 3, 1, 1]))
        }
        fn params(&self) -> &ParamStore {
            &self.params
        }
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences_of_integrated_objective() {
        let schedule = make_schedule(ScheduleKind::Cosine, 0.02, 0.98).unwrap();
        let teacher = GaussianDenoiser { mu: 0.3, s: 0.5, schedule, params: ParamStore::new() };
        let student = GaussianDenoiser { mu: -0.2, s: 0.8, schedule, params: ParamStore::new() };
        let mut params = ParamStore::new();
        let w0 = rng::randn(&mut rng::seeded(11), 9).into_iter().map(|v| v * 0.5).collect::<Vec<_>>();
        params.add("w", w0.clone(), &[3, 3]);
        params.add("beta", vec![0.1], &[1]);
        let gen = ToyGenerator { params };
        let z = [0.7, -1.1, 0.4];
        let eps = [0.3, 0.9, -0.5];
        let t = 0.45;
        let cfg = VSDConfig { guidance_teacher: 1.0, guidance_student: 1.0, ..VSDConfig::default() };
        let terms = vsd_generator_loss(
            &gen,
            &teacher,
            &student,
            &Tensor::zeros(&[1, 3, 1, 1]),
            &Tensor::new(z.iter().map(|v| *v as f32).collect(), &[1, 1, 3, 1, 1]),
            &[t],
            &Tensor::new(eps.iter().map(|v| *v as f32).collect(), &[1, 1, 3, 1, 1]),
            &cfg,
        )
        .unwrap();
        let g = terms.loss.backward();
        let mut analytic: Vec<f64> = g.get(gen.params.by_name("w").unwrap()).unwrap().iter().map(|v| *v as f64).collect();
        analytic.push(g.get(gen.params.by_name("beta").unwrap()).unwrap()[0] as f64);

        // The residual is affine in x0 with an isotropic slope, so it is the
        // gradient of phi(x0) = c/2 |x0|^2 + b . x0.
        let (kt, bt) = teacher.coefs(t);
        let (ks, bs) = student.coefs(t);
        let (a, sg) = (schedule.alpha(t), schedule.sigma(t));
        let c = (kt - ks) * a;
        let b: Vec<f64> = eps.iter().map(|e| (kt - ks) * sg * e + bt - bs).collect();
        let phi = |theta: &[f64]| {
            let x = ToyGenerator::output(&theta[..9], theta[9], &z);
            x.iter().zip(&b).map(|(xi, bi)| 0.5 * c * xi * xi + bi * xi).sum::<f64>()
        };
        let mut theta: Vec<f64> = w0.iter().map(|v| *v as f64).collect();
        theta.push(0.1);
        let h = 1e-5;
        let fd: Vec<f64> = (0..10)
            .map(|i| {
                let (mut p, mut m) = (theta.clone(), theta.clone());
                p[i] += h;
                m[i] -= h;
                (phi(&p) - phi(&m)) / (2.0 * h)
            })
            .collect();
        let num: f64 = analytic.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|y| y * y).sum::<f64>().sqrt();
        assert!(num / den < 1e-2, "relative error {}", num / den);
    }

    #[test]
    fn student_loss_oracles() {
        struct Fixed(Tensor, DiffusionSchedule, ParamStore);
        impl BatchDenoiser for Fixed {
            fn kind(&self) -> PredictionKind {
                PredictionKind::Eps
            }
            fn schedule(&self) -> &DiffusionSchedule {
                &self.1
            }
            fn predict_batch(&self, _x: &Tensor, _t: &[f64], _c: Option<&Tensor>) -> Result<Tensor> {
                Ok(self.0.clone())
            }
            fn params(&self) -> &ParamStore {
                &self.2
            }
        }
        let s = make_schedule(ScheduleKind::Cosine, 0.02, 0.98).unwrap();
        let shape = [1, 6, 3, 16, 16];
        let eps = randn(20, &shape);
        let x0 = randn(21, &shape);
        let perfect = Fixed(eps.clone(), s, ParamStore::new());
        assert_eq!(student_loss(&perfect, &x0, None, &[0.5], &eps).unwrap().item(), 0.0);
        let independent = Fixed(randn(22, &shape), s, ParamStore::new());
        let l = student_loss(&independent, &x0, None, &[0.5], &eps).unwrap().item();
        assert!((1.5..2.5).contains(&l), "{l}");
    }

    #[test]
    fn alternation_counts_and_config_checks() {
        let teacher = tiny_teacher(6, 8);
        let mut gen = init_generator_from_teacher(&teacher, None).unwrap();
        let mut student = teacher.student_copy();
        let cfg = VSDConfig { steps: 3, lr_gen: 1e-4, lr_stu: 1e-4, ..VSDConfig::default() };
        let before = gen.model.params.deep_clone();
        let log = train_stage1(&mut gen, &teacher, &mut student, &[randn(30, &[3, 8, 8])], &cfg, None).unwrap();
        assert_eq!((log.generator_updates, log.student_updates, log.records.len()), (3, 3, 3));
        assert!(!gen.model.params.bit_eq(&before));
        assert!(VSDConfig { guidance_teacher: -1.0, ..VSDConfig::default() }.validate().is_err());
        assert!(VSDConfig { t_range_student: (0.0, 0.5), ..VSDConfig::default() }.validate().is_err());
        assert!(VSDConfig { lr_stu: 1e-4, ..VSDConfig::default() }.lr_imbalanced());
        assert!(!VSDConfig::default().lr_imbalanced());
    }
}
