//! File-backed orchestration of every stage: where artifacts live, how
//! checkpoints are loaded and how their lineage is checked.
//!
//! Layout under the resolved paths:
//!
//! ```text
//! <dataset>/manifest.json, scenes/...
//! <checkpoints>/teacher/teacher.ckpt
//! <checkpoints>/recon/reconstructor.ckpt
//! <checkpoints>/stage1/stage1.ckpt
//! <checkpoints>/stage2/stage2.ckpt
//! <pgt>/manifest.json, <cond_id>/<z_seed>/...
//! <reports>/<arm>.json, <arm>.txt
//! ```
//!
//! Every step writes `config.toml`, `provenance.txt` and `seed.txt` next to
//! its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{make_rig, CameraRig, RigKind};
use crate::config::{Paths, ResolvedConfig, RunConfig, Source};
use crate::error::{Error, Result};
use crate::eval::{self, diversity_stats, eval_scenes, protocol_poses, Comparison, Diversity, EvalOptions, Expectation, MetricsReport};
use crate::metrics::Perceptual;
use crate::models::{
    self, config_digest, init_generator_from_teacher, load_checkpoint, make_reconstructor, make_teacher, pretrain_reconstructor, reconstruction_psnr,
    save_checkpoint, train_teacher, Checkpoint, CheckpointManifest, DenoiserConfig, DenoiserModel, Generator, Reconstructor, ReconstructorConfig, Stage,
};
use crate::rng;
use crate::scene::{self, build_dataset, load_dataset, read_json, write_json, Dataset, SceneRecord};
use crate::splat::export_gaussians;
use crate::stage2::{self, gen_pseudo_gt, load_pseudo_gt, save_pseudo_gt, train_stage2, ImageTo3D, OneStepPipeline, Stage2Output, TeacherPipeline};
use crate::tensor::{no_grad, Tensor};
use crate::vsd::{train_stage1, Stage1Output};

/// Which image-to-3D pipeline an evaluation or inference runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    /// Stage II generator and reconstructor.
    Stage2,
    /// Stage I generator with the pretrained reconstructor.
    Stage1,
    /// One DDIM step of the teacher with the pretrained reconstructor.
    Naive,
    /// Multi-step DDIM sampling of the teacher with the pretrained reconstructor.
    Teacher,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Stage2, Arm::Stage1, Arm::Naive, Arm::Teacher];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Stage2 => "stage2",
            Arm::Stage1 => "stage1",
            Arm::Naive => "naive",
            Arm::Teacher => "teacher",
        }
    }

    pub fn parse(s: &str) -> Result<Arm> {
        Arm::ALL.into_iter().find(|a| a.label() == s).ok_or_else(|| Error::Config(format!("unknown arm {s:?} (stage2, stage1, naive, teacher)")))
    }
}

/// Machine-readable summary of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: String,
    pub dir: PathBuf,
    pub digest: Option<String>,
    pub parents: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
}

/// Order-independent digest of every file below `root` (relative path and bytes).
pub fn tree_digest(root: &Path) -> Result<String> {
    let mut files = scene::dataset_dir_files(root)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        if is_snapshot_file(&rel) {
            continue;
        }
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(std::fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

const SNAPSHOT_FILES: [&str; 3] = ["config.toml", "provenance.txt", "seed.txt"];

fn is_snapshot_file(rel: &str) -> bool {
    SNAPSHOT_FILES.contains(&rel)
}

/// Seed for one stage, mixing the run seed with the section's own seed.
pub fn stage_seed(run_seed: u64, tag: u64, section_seed: u64) -> u64 {
    rng::derive(rng::derive(run_seed, tag), section_seed)
}

pub struct Lab {
    pub config: RunConfig,
    pub paths: Paths,
    /// Accept checkpoints whose configuration or parents differ from the expected ones.
    pub force: bool,
    provenance: BTreeMap<String, Source>,
}

fn missing(what: &str, path: &Path) -> Error {
    Error::MissingParent(format!("{what} ({})", path.display()))
}

impl Lab {
    /// `home` anchors relative paths in the configuration.
    pub fn new(resolved: &ResolvedConfig, home: &Path, force: bool) -> Lab {
        Lab { config: resolved.config.clone(), paths: resolved.config.paths.under(home), force, provenance: resolved.provenance.clone() }
    }

    pub fn from_config(config: RunConfig, home: &Path) -> Lab {
        let paths = config.paths.under(home);
        Lab { config, paths, force: false, provenance: BTreeMap::new() }
    }

    pub fn rig(&self) -> Result<CameraRig> {
        make_rig(RigKind::Sixview, 6, &self.config.rig_params())
    }

    pub fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        let c = &self.paths.checkpoints;
        match stage {
            Stage::Teacher => c.join("teacher").join("teacher.ckpt"),
            Stage::Reconstructor => c.join("recon").join("reconstructor.ckpt"),
            Stage::Stage1 => c.join("stage1").join("stage1.ckpt"),
            Stage::Stage2 => c.join("stage2").join("stage2.ckpt"),
        }
    }

    /// Writes the resolved configuration, per-key provenance and the seed into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let toml = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("config.toml", toml)?;
        let prov: String = self.provenance.iter().map(|(k, s)| format!("{k} {}\n", s.label())).collect();
        put("provenance.txt", prov)?;
        put("seed.txt", format!("{}\n", self.config.seed))
    }

    fn save(&self, ckpt: &Checkpoint, path: &Path, metrics: BTreeMap<String, f64>) -> Result<()> {
        save_checkpoint(ckpt, path)?;
        write_json(&CheckpointManifest::for_checkpoint(ckpt, metrics), &CheckpointManifest::path_for(path))
    }

    fn summary(&self, step: &str, dir: &Path, ckpt: Option<&Checkpoint>, metrics: BTreeMap<String, f64>) -> StepSummary {
        StepSummary {
            step: step.into(),
            dir: dir.to_path_buf(),
            digest: ckpt.map(|c| c.digest().to_string()),
            parents: ckpt.map(|c| c.header.parents.clone()).unwrap_or_default(),
            metrics,
        }
    }

    fn lineage(&self, what: &str, expected: &str, found: &[String]) -> Result<()> {
        if found.iter().any(|p| p == expected) {
            return Ok(());
        }
        let msg = format!("{what} digest {expected} is not among the recorded parents {found:?}");
        if self.force {
            log::warn!("{msg} (forced)");
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("{msg}; use --force to override")))
        }
    }

    // ---- dataset ----

    pub fn build_dataset(&self) -> Result<StepSummary> {
        let dir = &self.paths.dataset;
        let (ds, _) = build_dataset(&self.config.dataset_config(), &self.rig()?, dir)?;
        self.write_snapshot(dir)?;
        let mut m = BTreeMap::new();
        m.insert("scenes".into(), ds.scenes.len() as f64);
        let mut s = self.summary("dataset build", dir, None, m);
        s.digest = Some(tree_digest(dir)?);
        Ok(s)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let manifest = self.paths.dataset.join("manifest.json");
        if !manifest.exists() {
            return Err(missing("dataset", &manifest));
        }
        let ds = load_dataset(&self.paths.dataset)?;
        if ds.rig.resolution().0 != self.config.scene.resolution {
            return Err(Error::Config(format!("dataset resolution {} differs from scene.resolution {}", ds.rig.resolution().0, self.config.scene.resolution)));
        }
        Ok(ds)
    }

    /// Training scenes, then the held-out tail.
    pub fn split<'a>(&self, ds: &'a Dataset) -> Result<(&'a [SceneRecord], &'a [SceneRecord])> {
        let h = self.config.scene.holdout;
        if h >= ds.scenes.len() {
            return Err(Error::Config(format!("holdout {h} leaves no training scenes out of {}", ds.scenes.len())));
        }
        Ok(ds.scenes.split_at(ds.scenes.len() - h))
    }

    // ---- teacher ----

    pub fn train_teacher(&self) -> Result<StepSummary> {
        let ds = self.dataset()?;
        let (train, _) = self.split(&ds)?;
        let mut model = make_teacher(&self.config.denoiser_config()?)?;
        let cfg = models::TeacherTrainConfig { seed: stage_seed(self.config.seed, 11, self.config.teacher.seed), ..self.config.teacher.clone() };
        let log = train_teacher(&mut model, train, &cfg)?;
        let path = self.checkpoint_path(Stage::Teacher);
        let dir = path.parent().expect("checkpoint dir");
        self.write_snapshot(dir)?;
        log.write_jsonl(&dir.join("teacher_log.jsonl"))?;
        let ckpt = Checkpoint::new(Stage::Teacher, &model.config, Some(model.config.schedule), Some(crate::diffusion::PredictionKind::V), vec![("net".into(), model.params.clone())], vec![])?;
        let (head, tail) = log.head_tail_loss(50);
        let metrics: BTreeMap<String, f64> = [("loss_head".to_string(), head), ("loss_tail".to_string(), tail)].into();
        self.save(&ckpt, &path, metrics.clone())?;
        Ok(self.summary("train teacher", dir, Some(&ckpt), metrics))
    }

    fn load(&self, stage: Stage, what: &str) -> Result<Checkpoint> {
        let path = self.checkpoint_path(stage);
        let ck = load_checkpoint(&path).map_err(|e| match e {
            Error::MissingParent(_) => missing(what, &path),
            other => other,
        })?;
        ck.expect_stage(stage)?;
        Ok(ck)
    }

    pub fn load_teacher(&self) -> Result<(DenoiserModel, String)> {
        let ck = self.load(Stage::Teacher, "teacher checkpoint")?;
        ck.verify_config_digest(&config_digest(&self.config.denoiser_config()?)?, self.force)?;
        let config: DenoiserConfig = ck.config_as()?;
        let mut model = make_teacher(&config)?;
        let params = ck.section("net")?.clone();
        models::check_layout(&model.params, &params)?;
        model.params = params;
        Ok((model, ck.digest().to_string()))
    }

    // ---- reconstructor ----

    pub fn train_recon(&self) -> Result<StepSummary> {
        let ds = self.dataset()?;
        let (train, held) = self.split(&ds)?;
        let mut rec = make_reconstructor(&self.config.reconstructor_config()?)?;
        let cfg = models::ReconTrainConfig { seed: stage_seed(self.config.seed, 12, self.config.recon.seed), ..self.config.recon.clone() };
        let log = pretrain_reconstructor(&mut rec, train, &ds.rig, &cfg)?;
        let path = self.checkpoint_path(Stage::Reconstructor);
        let dir = path.parent().expect("checkpoint dir");
        self.write_snapshot(dir)?;
        log.write_jsonl(&dir.join("recon_log.jsonl"))?;
        let (input, novel) = reconstruction_psnr(&rec, held, &ds.rig)?;
        let metrics: BTreeMap<String, f64> = [("heldout_input_psnr".to_string(), input), ("heldout_novel_psnr".to_string(), novel)].into();
        let ckpt = Checkpoint::new(Stage::Reconstructor, &rec.config, None, None, vec![("net".into(), rec.params.clone())], vec![])?;
        self.save(&ckpt, &path, metrics.clone())?;
        Ok(self.summary("train recon", dir, Some(&ckpt), metrics))
    }

    pub fn load_reconstructor(&self) -> Result<(Reconstructor, String)> {
        let ck = self.load(Stage::Reconstructor, "reconstructor checkpoint")?;
        ck.verify_config_digest(&config_digest(&self.config.reconstructor_config()?)?, self.force)?;
        let config: ReconstructorConfig = ck.config_as()?;
        Ok((Reconstructor::from_parts(&config, ck.section("net")?.clone())?, ck.digest().to_string()))
    }

    // ---- stage I ----

    pub fn stage1(&self) -> Result<StepSummary> {
        let (teacher, teacher_digest) = self.load_teacher()?;
        let ds = self.dataset()?;
        let (train, _) = self.split(&ds)?;
        let mut gen = init_generator_from_teacher(&teacher, self.config.model.t_gen)?;
        let mut student = teacher.student_copy();
        let conditions: Vec<Tensor> = train.iter().map(|s| s.condition.clone()).collect();
        let cfg = crate::vsd::VSDConfig { seed: stage_seed(self.config.seed, 13, self.config.stage1.seed), ..self.config.stage1.clone() };
        let path = self.checkpoint_path(Stage::Stage1);
        let dir = path.parent().expect("checkpoint dir");
        self.write_snapshot(dir)?;
        let out = Stage1Output { dir, parents: vec![teacher_digest] };
        let log = train_stage1(&mut gen, &teacher, &mut student, &conditions, &cfg, Some(&out))?;
        let ckpt = load_checkpoint(&path)?;
        let n = log.records.len().min(50).max(1);
        let tail = |f: &dyn Fn(&crate::vsd::Stage1Record) -> f64| log.records.iter().rev().take(n).map(f).sum::<f64>() / n as f64;
        let metrics: BTreeMap<String, f64> = [
            ("loss_gen_tail".to_string(), tail(&|r| r.loss_gen)),
            ("loss_stu_tail".to_string(), tail(&|r| r.loss_stu)),
            ("generator_updates".to_string(), log.generator_updates as f64),
        ]
        .into();
        write_json(&CheckpointManifest::for_checkpoint(&ckpt, metrics.clone()), &CheckpointManifest::path_for(&path))?;
        Ok(self.summary("distill stage1", dir, Some(&ckpt), metrics))
    }

    /// Generator and student from the Stage I checkpoint, with the teacher lineage checked.
    pub fn load_stage1(&self) -> Result<(Generator, DenoiserModel, String)> {
        let ck = self.load(Stage::Stage1, "stage1 checkpoint")?;
        if let Ok((_, teacher_digest)) = self.load_teacher() {
            self.lineage("teacher", &teacher_digest, &ck.header.parents)?;
        }
        #[derive(Deserialize)]
        struct Cfg {
            generator: DenoiserConfig,
            t_gen: f64,
        }
        let cfg: Cfg = ck.config_as()?;
        let gen = Generator::from_parts(&cfg.generator, ck.section("generator")?.clone(), cfg.t_gen)?;
        let mut student = make_teacher(&cfg.generator)?;
        student.params = ck.section("student")?.clone();
        student.output = crate::diffusion::PredictionKind::Eps;
        Ok((gen, student, ck.digest().to_string()))
    }

    // ---- pseudo ground truth ----

    pub fn stage2_config(&self) -> crate::stage2::Stage2Config {
        crate::stage2::Stage2Config { seed: stage_seed(self.config.seed, 14, self.config.stage2.seed), ..self.config.stage2.clone() }
    }

    pub fn build_pgt(&self) -> Result<StepSummary> {
        let (teacher, td) = self.load_teacher()?;
        let (rec, rd) = self.load_reconstructor()?;
        let ds = self.dataset()?;
        let (train, _) = self.split(&ds)?;
        let conditions: Vec<(String, Tensor)> = train.iter().map(|s| (s.id.clone(), s.condition.clone())).collect();
        let cfg = self.stage2_config();
        let build = gen_pseudo_gt(&teacher, &td, &rec, &rd, &ds.rig, &conditions, &cfg)?;
        let root = &self.paths.pgt;
        if root.join("manifest.json").exists() {
            std::fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
        }
        let manifest = save_pseudo_gt(&build, &cfg, root)?;
        self.write_snapshot(root)?;
        let metrics: BTreeMap<String, f64> = [("records".to_string(), manifest.records.len() as f64), ("skipped".to_string(), manifest.skipped.len() as f64)].into();
        let mut s = self.summary("pgt build", root, None, metrics);
        s.digest = Some(tree_digest(root)?);
        s.parents = vec![td, rd];
        Ok(s)
    }

    // ---- stage II ----

    pub fn stage2(&self) -> Result<StepSummary> {
        let (mut gen, _, s1) = self.load_stage1()?;
        let (mut rec, rd) = self.load_reconstructor()?;
        let manifest = self.paths.pgt.join("manifest.json");
        if !manifest.exists() {
            return Err(missing("pseudo ground truth", &manifest));
        }
        let (_, records) = load_pseudo_gt(&self.paths.pgt)?;
        for r in &records {
            self.lineage("reconstructor", &rd, std::slice::from_ref(&r.provenance.reconstructor_digest))?;
            if let Ok((_, td)) = self.load_teacher() {
                self.lineage("teacher", &td, std::slice::from_ref(&r.provenance.teacher_digest))?;
            }
        }
        let ds_rig = self.rig()?;
        let cfg = self.stage2_config();
        let path = self.checkpoint_path(Stage::Stage2);
        let dir = path.parent().expect("checkpoint dir");
        self.write_snapshot(dir)?;
        let out = Stage2Output { dir, parents: vec![s1, rd] };
        let log = train_stage2(&mut gen, &mut rec, &ds_rig, &records, &cfg, Some(&out))?;
        let ckpt = load_checkpoint(&path)?;
        let last = log.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
        let metrics: BTreeMap<String, f64> = [("loss_last".to_string(), last), ("off_rig_views".to_string(), log.off_rig_views as f64)].into();
        write_json(&CheckpointManifest::for_checkpoint(&ckpt, metrics.clone()), &CheckpointManifest::path_for(&path))?;
        Ok(self.summary("distill stage2", dir, Some(&ckpt), metrics))
    }

    /// Generator and reconstructor from the Stage II checkpoint, with its
    /// Stage I and reconstructor parents checked against the files on disk.
    pub fn load_stage2(&self) -> Result<(Generator, Reconstructor, String)> {
        let ck = self.load(Stage::Stage2, "stage2 checkpoint")?;
        let (_, _, s1) = self.load_stage1()?;
        self.lineage("stage1", &s1, &ck.header.parents)?;
        let (_, rd) = self.load_reconstructor()?;
        self.lineage("reconstructor", &rd, &ck.header.parents)?;
        #[derive(Deserialize)]
        struct Cfg {
            generator: DenoiserConfig,
            t_gen: f64,
            reconstructor: ReconstructorConfig,
        }
        let cfg: Cfg = ck.config_as()?;
        let gen = Generator::from_parts(&cfg.generator, ck.section("generator")?.clone(), cfg.t_gen)?;
        let rec = Reconstructor::from_parts(&cfg.reconstructor, ck.section("reconstructor")?.clone())?;
        Ok((gen, rec, ck.digest().to_string()))
    }

    // ---- inference and evaluation ----

    /// Loads the networks an arm needs; parents are verified on the way.
    pub fn arm(&self, arm: Arm) -> Result<LoadedArm> {
        Ok(match arm {
            Arm::Stage2 => {
                let (gen, rec, _) = self.load_stage2()?;
                LoadedArm::OneStep(gen, rec)
            }
            Arm::Stage1 => {
                let (gen, _, _) = self.load_stage1()?;
                LoadedArm::OneStep(gen, self.load_reconstructor()?.0)
            }
            Arm::Naive => LoadedArm::Teacher(self.load_teacher()?.0, self.load_reconstructor()?.0, 1, self.config.stage1.guidance_teacher),
            Arm::Teacher => LoadedArm::Teacher(self.load_teacher()?.0, self.load_reconstructor()?.0, self.config.stage2.ddim_steps, self.config.stage2.guidance),
        })
    }

    pub fn report_path(&self, label: &str) -> PathBuf {
        self.paths.reports.join(format!("{label}.json"))
    }

    /// Scores an arm on the held-out scenes and writes `<reports>/<arm>.{json,txt,png}`.
    pub fn evaluate(&self, arm: Arm) -> Result<MetricsReport> {
        let loaded = self.arm(arm)?;
        let rig = self.rig()?;
        let pipeline = loaded.pipeline(&rig);
        let ds = self.dataset()?;
        let (_, held) = self.split(&ds)?;
        if held.is_empty() {
            return Err(Error::Config("evaluation needs scene.holdout > 0".into()));
        }
        let protocol = self.config.eval.protocol;
        let scenes = eval_scenes(held, protocol, &self.config.rig_params())?;
        let opts = EvalOptions { z_seed: self.config.eval.z_seed, mask_bg: self.config.eval.mask_bg };
        let report = eval::evaluate(arm.label(), pipeline.as_ref(), &scenes, protocol, &opts)?;
        let dir = &self.paths.reports;
        self.write_snapshot(dir)?;
        write_json(&report, &self.report_path(arm.label()))?;
        let txt = dir.join(format!("{}.txt", arm.label()));
        std::fs::write(&txt, report.table()).map_err(|e| Error::io(&txt, e))?;
        let rows = scenes
            .iter()
            .take(4)
            .map(|s| Ok((s.condition.clone(), s.gt.clone(), pipeline.infer(&s.condition, opts.z_seed, &s.poses)?.renders)))
            .collect::<Result<Vec<_>>>()?;
        scene::save_png(&eval::contact_sheet(&rows), &dir.join(format!("{}_sheet.png", arm.label())))?;
        Ok(report)
    }

    pub fn load_report(&self, label: &str) -> Result<MetricsReport> {
        let p = self.report_path(label);
        if !p.exists() {
            return Err(missing(&format!("{label} report"), &p));
        }
        read_json(&p)
    }

    /// Compares saved reports and writes `<reports>/comparison.{json,txt}`.
    pub fn compare(&self, labels: &[String], expectations: &[Expectation]) -> Result<Comparison> {
        let reports = labels.iter().map(|l| self.load_report(l)).collect::<Result<Vec<_>>>()?;
        let cmp = eval::compare_runs(&reports, expectations)?;
        let dir = &self.paths.reports;
        write_json(&cmp, &dir.join("comparison.json"))?;
        let txt = dir.join("comparison.txt");
        std::fs::write(&txt, cmp.table()).map_err(|e| Error::io(&txt, e))?;
        Ok(cmp)
    }

    /// Renders and Gaussians for one condition image, written under `out`.
    pub fn infer(&self, arm: Arm, condition: &Path, z_seed: u64, out: &Path) -> Result<InferSummary> {
        let loaded = self.arm(arm)?;
        let rig = self.rig()?;
        let cond = scene::load_png(condition)?;
        let poses = protocol_poses(eval::Protocol::Ring15, &self.config.rig_params())?;
        let res = loaded.infer(&rig, &cond, z_seed, &poses)?;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        self.write_snapshot(out)?;
        export_gaussians(&res.gaussians, &out.join("gaussians.gspl"))?;
        for (k, img) in res.renders.iter().enumerate() {
            scene::save_png(img, &out.join(format!("render_{k:02}.png")))?;
        }
        let views: Vec<Tensor> = (0..res.multiview.dim(0)).map(|k| res.multiview.narrow(0, k, 1).reshape(&cond.shape()[..])).collect();
        scene::save_png(&scene::image_grid(&views, views.len()), &out.join("multiview.png"))?;
        let summary = InferSummary {
            arm,
            z_seed,
            gaussians: res.gaussians.len(),
            renders: res.renders.len(),
            generator_evaluations: res.generator_evaluations,
            reconstructor_evaluations: res.reconstructor_evaluations,
            timing: res.timing,
        };
        write_json(&summary, &out.join("timing.json"))?;
        Ok(summary)
    }

    /// Diversity across the configured seeds on the first held-out scene.
    pub fn diversity(&self, arm: Arm) -> Result<(Diversity, Vec<f64>)> {
        let loaded = self.arm(arm)?;
        let rig = self.rig()?;
        let ds = self.dataset()?;
        let (_, held) = self.split(&ds)?;
        let scene = held.first().ok_or_else(|| Error::Config("diversity needs scene.holdout > 0".into()))?;
        let pipeline = loaded.pipeline(&rig);
        let poses = protocol_poses(eval::Protocol::Ring15, &self.config.rig_params())?;
        let div = diversity_stats(pipeline.as_ref(), &scene.condition, &self.config.eval.diversity_seeds, &poses[1..])?;
        let cond_pose = [scene.condition_pose.clone()];
        let psnrs = self
            .config
            .eval
            .diversity_seeds
            .iter()
            .map(|&z| crate::metrics::psnr(&pipeline.infer(&scene.condition, z, &cond_pose)?.renders[0], &scene.condition))
            .collect::<Result<Vec<_>>>()?;
        Ok((div, psnrs))
    }

    /// Distance of one-step samples to multi-step teacher samples on the
    /// held-out conditions, before and after Stage I, next to the same
    /// quantity for fresh teacher samples. Writes `reports/sample_gap.json`.
    pub fn sample_gap(&self) -> Result<SampleGap> {
        let (teacher, _) = self.load_teacher()?;
        let (trained, _, _) = self.load_stage1()?;
        let init = init_generator_from_teacher(&teacher, self.config.model.t_gen)?;
        let ds = self.dataset()?;
        let (_, held) = self.split(&ds)?;
        let conds: Vec<Tensor> = held.iter().map(|s| s.condition.clone()).collect();
        let g = self.config.stage1.guidance_teacher;
        let refs = teacher_samples(&teacher, &conds, &GAP_REFERENCE_SEEDS, GAP_TEACHER_STEPS, g)?;
        let p = Perceptual::default();
        let gap = SampleGap {
            init: nearest_reference_distance(&generator_samples(&init, &conds, &GAP_SAMPLE_SEEDS)?, &refs, &p)?,
            trained: nearest_reference_distance(&generator_samples(&trained, &conds, &GAP_SAMPLE_SEEDS)?, &refs, &p)?,
            teacher: nearest_reference_distance(&teacher_samples(&teacher, &conds, &GAP_SAMPLE_SEEDS, GAP_TEACHER_STEPS, g)?, &refs, &p)?,
        };
        std::fs::create_dir_all(&self.paths.reports).map_err(|e| Error::io(&self.paths.reports, e))?;
        write_json(&gap, &self.paths.reports.join("sample_gap.json"))?;
        Ok(gap)
    }

    /// Copies a checkpoint's Gaussians for every held-out scene into `out` as GSPL files.
    pub fn export(&self, arm: Arm, out: &Path) -> Result<StepSummary> {
        let loaded = self.arm(arm)?;
        let rig = self.rig()?;
        let ds = self.dataset()?;
        let (_, held) = self.split(&ds)?;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        self.write_snapshot(out)?;
        for s in held {
            let res = loaded.infer(&rig, &s.condition, self.config.eval.z_seed, &[])?;
            export_gaussians(&res.gaussians, &out.join(format!("{}.gspl", s.id)))?;
        }
        let metrics: BTreeMap<String, f64> = [("scenes".to_string(), held.len() as f64)].into();
        let mut s = self.summary("export", out, None, metrics);
        s.digest = Some(tree_digest(out)?);
        Ok(s)
    }
}

pub enum LoadedArm {
    OneStep(Generator, Reconstructor),
    /// Teacher, reconstructor, DDIM steps, guidance.
    Teacher(DenoiserModel, Reconstructor, usize, f64),
}

impl LoadedArm {
    pub fn pipeline<'a>(&'a self, rig: &'a CameraRig) -> Box<dyn ImageTo3D + 'a> {
        match self {
            LoadedArm::OneStep(gen, rec) => Box::new(OneStepPipeline { gen, rec, rig }),
            LoadedArm::Teacher(teacher, rec, steps, guidance) => Box::new(TeacherPipeline { teacher, rec, rig, steps: *steps, guidance: *guidance }),
        }
    }

    pub fn infer(&self, rig: &CameraRig, cond: &Tensor, z_seed: u64, poses: &[crate::camera::CameraPose]) -> Result<stage2::Inference> {
        self.pipeline(rig).infer(cond, z_seed, poses)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    pub arm: Arm,
    pub z_seed: u64,
    pub gaussians: usize,
    pub renders: usize,
    pub generator_evaluations: u64,
    pub reconstructor_evaluations: u64,
    pub timing: stage2::Timing,
}

/// Noise seeds of the multi-step reference samples in [`Lab::sample_gap`].
pub const GAP_REFERENCE_SEEDS: [u64; 8] = [900, 901, 902, 903, 904, 905, 906, 907];
/// Noise seeds of the samples compared against the references.
pub const GAP_SAMPLE_SEEDS: [u64; 2] = [5, 6];
pub const GAP_TEACHER_STEPS: usize = 75;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleGap {
    /// Generator at initialization.
    pub init: f64,
    /// Generator after Stage I.
    pub trained: f64,
    /// Teacher samples with the sample seeds: what a perfect student reaches.
    pub teacher: f64,
}

impl SampleGap {
    pub fn ratio(&self) -> f64 {
        self.trained / self.init
    }
}

/// Mean perceptual distance between two multi-view stacks `[V, 3, H, W]`.
pub fn multiview_distance(a: &Tensor, b: &Tensor, perceptual: &Perceptual) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 4 {
        return Err(Error::Shape(format!("multi-view stacks differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let _g = no_grad();
    let v = a.dim(0);
    let img = |t: &Tensor, k: usize| t.narrow(0, k, 1).reshape(&t.shape()[1..]);
    let mut total = 0.0;
    for k in 0..v {
        total += perceptual.distance(&img(a, k), &img(b, k))?;
    }
    Ok(total / v as f64)
}

/// Mean over conditions of the distance from each sample to its nearest
/// reference sample of the same condition.
pub fn nearest_reference_distance(samples: &[Vec<Tensor>], references: &[Vec<Tensor>], perceptual: &Perceptual) -> Result<f64> {
    if samples.is_empty() || samples.len() != references.len() {
        return Err(Error::Param("need one reference set per condition".into()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (xs, refs) in samples.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Param("empty reference set".into()));
        }
        for x in xs {
            let d = refs.iter().map(|r| multiview_distance(x, r, perceptual)).collect::<Result<Vec<_>>>()?;
            total += d.into_iter().fold(f64::INFINITY, f64::min);
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// One-step samples `[V, 3, H, W]` of `gen` for each condition and seed.
pub fn generator_samples(gen: &Generator, conditions: &[Tensor], z_seeds: &[u64]) -> Result<Vec<Vec<Tensor>>> {
    use crate::models::MultiViewGenerator;
    let _g = no_grad();
    let net = &gen.model.config.net;
    let (v, h) = (net.views, net.resolution);
    conditions
        .iter()
        .map(|c| {
            z_seeds
                .iter()
                .map(|&z| {
                    let z = stage2::noise_for(z, v, h).values.reshape(&[1, v, 3, h, h]);
                    Ok(gen.generate(&z, &c.reshape(&[1, 3, h, h]))?.reshape(&[v, 3, h, h]))
                })
                .collect()
        })
        .collect()
}

/// Multi-step DDIM samples of the teacher, clamped to the image range.
pub fn teacher_samples(teacher: &DenoiserModel, conditions: &[Tensor], z_seeds: &[u64], steps: usize, guidance: f64) -> Result<Vec<Vec<Tensor>>> {
    let net = &teacher.config.net;
    conditions
        .iter()
        .map(|c| {
            z_seeds
                .iter()
                .map(|&z| Ok(crate::diffusion::ddim_sample(teacher, c, &stage2::noise_for(z, net.views, net.resolution), steps, guidance, &teacher.config.schedule)?.clamp(-1.0, 1.0)))
                .collect()
        })
        .collect()
}
