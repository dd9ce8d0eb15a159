//! Evaluation protocols, metric reports, run comparison and diversity.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::camera::{make_rig, CameraPose, RigKind, RigParams};
use crate::error::{Error, Result};
use crate::metrics::{psnr, rms_diff, ssim, Perceptual};
use crate::scene::{image_grid, ray_trace, SceneRecord, BACKGROUND};
use crate::stage2::{ImageTo3D, Timing};
use crate::tensor::Tensor;

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Sixview,
    Ring15,
}

pub fn protocol_poses(protocol: Protocol, rig: &RigParams) -> Result<Vec<CameraPose>> {
    Ok(match protocol {
        Protocol::Sixview => make_rig(RigKind::Sixview, 6, rig)?.poses,
        Protocol::Ring15 => make_rig(RigKind::Ring, 15, rig)?.poses,
    })
}

/// Held-out scene with ground truth at the protocol poses.
#[derive(Clone, Debug)]
pub struct EvalScene {
    pub id: String,
    pub condition: Tensor,
    pub poses: Vec<CameraPose>,
    pub gt: Vec<Tensor>,
    pub masks: Vec<Vec<bool>>,
}

pub fn eval_scenes(scenes: &[SceneRecord], protocol: Protocol, rig: &RigParams) -> Result<Vec<EvalScene>> {
    let poses = protocol_poses(protocol, rig)?;
    Ok(scenes
        .iter()
        .map(|s| {
            let renders: Vec<_> = poses.iter().map(|p| ray_trace(&s.scene, p)).collect();
            EvalScene {
                id: s.id.clone(),
                condition: s.condition.clone(),
                poses: poses.clone(),
                gt: renders.iter().map(|r| r.image.clone()).collect(),
                masks: renders.into_iter().map(|r| r.mask).collect(),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    /// `None` when every compared view is identical to its reference.
    pub psnr: Option<f64>,
    pub psnr_identical: bool,
    pub ssim: f64,
    pub perceptual: f64,
    /// Fraction of rendered opacity mass outside the ground-truth silhouette.
    pub floater: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub label: String,
    pub protocol: Protocol,
    pub mask_bg: bool,
    pub per_scene: BTreeMap<String, SceneMetrics>,
    pub aggregate: SceneMetrics,
    pub runtime: Timing,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub z_seed: u64,
    /// Replace predicted pixels outside the ground-truth silhouette by the background.
    pub mask_bg: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { z_seed: 0, mask_bg: false }
    }
}

fn mask_background(img: &Tensor, mask: &[bool]) -> Tensor {
    let hw = mask.len();
    let d = img.data().iter().enumerate().map(|(i, v)| if mask[i % hw] { *v } else { BACKGROUND }).collect();
    Tensor::new(d, img.shape())
}

fn floater_fraction(alpha: &[f32], mask: &[bool]) -> f64 {
    let total: f64 = alpha.iter().map(|a| *a as f64).sum();
    if total <= 0.0 {
        return 0.0;
    }
    alpha.iter().zip(mask).filter(|(_, m)| !**m).map(|(a, _)| *a as f64).sum::<f64>() / total
}

/// Metrics of predicted renders (and their alpha maps) against a scene's ground truth.
pub fn scene_metrics(scene: &EvalScene, renders: &[Tensor], alphas: &[Vec<f32>], mask_bg: bool, perceptual: &Perceptual) -> Result<SceneMetrics> {
    if renders.len() != scene.gt.len() {
        return Err(Error::Param(format!("scene {}: {} renders for {} ground-truth views", scene.id, renders.len(), scene.gt.len())));
    }
    let n = renders.len() as f64;
    let (mut ps, mut ss, mut pe, mut fl) = (0.0, 0.0, 0.0, 0.0);
    for (k, (r, gt)) in renders.iter().zip(&scene.gt).enumerate() {
        let r = if mask_bg { mask_background(r, &scene.masks[k]) } else { r.clone() };
        ps += psnr(&r, gt)?;
        ss += ssim(&r, gt)?;
        pe += perceptual.distance(&r, gt)?;
        fl += alphas.get(k).map(|a| floater_fraction(a, &scene.masks[k])).unwrap_or(0.0);
    }
    let p = ps / n;
    Ok(SceneMetrics { psnr: p.is_finite().then_some(p), psnr_identical: p.is_infinite(), ssim: ss / n, perceptual: pe / n, floater: fl / n })
}

fn aggregate(per_scene: &BTreeMap<String, SceneMetrics>) -> SceneMetrics {
    let n = per_scene.len().max(1) as f64;
    let mean = |f: &dyn Fn(&SceneMetrics) -> f64| per_scene.values().map(f).sum::<f64>() / n;
    let identical = per_scene.values().any(|m| m.psnr_identical);
    SceneMetrics {
        psnr: if identical { None } else { Some(mean(&|m| m.psnr.unwrap_or(f64::NAN))) },
        psnr_identical: identical,
        ssim: mean(&|m| m.ssim),
        perceptual: mean(&|m| m.perceptual),
        floater: mean(&|m| m.floater),
    }
}

pub fn assemble_report(label: &str, protocol: Protocol, mask_bg: bool, per_scene: BTreeMap<String, SceneMetrics>, runtime: Timing) -> MetricsReport {
    let aggregate = aggregate(&per_scene);
    MetricsReport { schema_version: REPORT_SCHEMA, label: label.to_string(), protocol, mask_bg, per_scene, aggregate, runtime }
}

/// Runs `pipeline` on every scene's condition image and scores its renders.
pub fn evaluate(label: &str, pipeline: &dyn ImageTo3D, scenes: &[EvalScene], protocol: Protocol, opts: &EvalOptions) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(Error::Param("evaluation needs at least one scene".into()));
    }
    let perceptual = Perceptual::default();
    let mut per_scene = BTreeMap::new();
    let mut runtime = Timing::default();
    for s in scenes {
        if s.gt.is_empty() {
            return Err(Error::Param(format!("scene {} has no ground truth", s.id)));
        }
        let out = pipeline.infer(&s.condition, opts.z_seed, &s.poses)?;
        runtime.t_multiview_ms += out.timing.t_multiview_ms;
        runtime.t_reconstruct_ms += out.timing.t_reconstruct_ms;
        runtime.t_render_ms += out.timing.t_render_ms;
        per_scene.insert(s.id.clone(), scene_metrics(s, &out.renders, &out.alphas, opts.mask_bg, &perceptual)?);
    }
    let n = scenes.len() as f64;
    runtime.t_multiview_ms /= n;
    runtime.t_reconstruct_ms /= n;
    runtime.t_render_ms /= n;
    Ok(assemble_report(label, protocol, opts.mask_bg, per_scene, runtime))
}

fn fmt_psnr(m: &SceneMetrics) -> String {
    match m.psnr {
        Some(p) => format!("{p:.3}"),
        None => "identical".into(),
    }
}

impl MetricsReport {
    /// Aligned plain-text table, one row per scene plus the mean.
    pub fn table(&self) -> String {
        let mut s = format!("{} ({:?}{})\n", self.label, self.protocol, if self.mask_bg { ", masked" } else { "" });
        let _ = writeln!(s, "{:<12} {:>10} {:>8} {:>11} {:>8}", "scene", "psnr", "ssim", "perceptual", "floater");
        let rows = self.per_scene.iter().map(|(k, v)| (k.as_str(), v)).chain(std::iter::once(("mean", &self.aggregate)));
        for (id, m) in rows {
            let _ = writeln!(s, "{:<12} {:>10} {:>8.4} {:>11.4} {:>8.4}", id, fmt_psnr(m), m.ssim, m.perceptual, m.floater);
        }
        let _ = writeln!(
            s,
            "runtime: multiview {:.1} ms, reconstruct {:.1} ms, render {:.1} ms",
            self.runtime.t_multiview_ms, self.runtime.t_reconstruct_ms, self.runtime.t_render_ms
        );
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
    Perceptual,
    Floater,
}

impl Metric {
    fn value(self, m: &SceneMetrics) -> f64 {
        match self {
            Metric::Psnr => m.psnr.unwrap_or(f64::INFINITY),
            Metric::Ssim => m.ssim,
            Metric::Perceptual => m.perceptual,
            Metric::Floater => m.floater,
        }
    }

    fn higher_is_better(self) -> bool {
        matches!(self, Metric::Psnr | Metric::Ssim)
    }
}

/// Ordering expectation between two labelled runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub better: String,
    pub worse: String,
    pub metric: Metric,
    /// Require a strict improvement instead of allowing ties.
    pub strict: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectationResult {
    pub expectation: Expectation,
    pub better_value: f64,
    pub worse_value: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub aggregate: SceneMetrics,
    /// Differences to the first report, per metric.
    pub deltas: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub protocol: Protocol,
    pub scenes: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    pub expectations: Vec<ExpectationResult>,
}

const METRICS: [Metric; 4] = [Metric::Psnr, Metric::Ssim, Metric::Perceptual, Metric::Floater];

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Psnr => "psnr",
        Metric::Ssim => "ssim",
        Metric::Perceptual => "perceptual",
        Metric::Floater => "floater",
    }
}

pub fn compare_runs(reports: &[MetricsReport], expectations: &[Expectation]) -> Result<Comparison> {
    let first = reports.first().ok_or_else(|| Error::Param("nothing to compare".into()))?;
    let scenes: Vec<String> = first.per_scene.keys().cloned().collect();
    for r in reports {
        if r.protocol != first.protocol {
            return Err(Error::Param(format!("protocol mismatch: {:?} vs {:?}", r.protocol, first.protocol)));
        }
        if r.per_scene.keys().ne(first.per_scene.keys()) {
            return Err(Error::Param(format!("report {} covers a different scene set", r.label)));
        }
    }
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            label: r.label.clone(),
            aggregate: r.aggregate,
            deltas: METRICS.iter().map(|&m| (metric_name(m).to_string(), m.value(&r.aggregate) - m.value(&first.aggregate))).collect(),
        })
        .collect();
    let find = |label: &str| reports.iter().find(|r| r.label == label).ok_or_else(|| Error::Param(format!("no report labelled {label}")));
    let expectations = expectations
        .iter()
        .map(|e| {
            let (b, w) = (e.metric.value(&find(&e.better)?.aggregate), e.metric.value(&find(&e.worse)?.aggregate));
            let (hi, lo) = if e.metric.higher_is_better() { (b, w) } else { (w, b) };
            let pass = if e.strict { hi > lo } else { hi >= lo };
            Ok(ExpectationResult { expectation: e.clone(), better_value: b, worse_value: w, pass })
        })
        .collect::<Result<_>>()?;
    Ok(Comparison { protocol: first.protocol, scenes, rows, expectations })
}

impl Comparison {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>10} {:>8} {:>11} {:>8} {:>9}", "run", "psnr", "ssim", "perceptual", "floater", "d_psnr");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>10} {:>8.4} {:>11.4} {:>8.4} {:>+9.3}",
                r.label,
                fmt_psnr(&r.aggregate),
                r.aggregate.ssim,
                r.aggregate.perceptual,
                r.aggregate.floater,
                r.deltas["psnr"]
            );
        }
        for e in &self.expectations {
            let x = &e.expectation;
            let op = if x.strict { ">" } else { ">=" };
            let _ = writeln!(
                s,
                "[{}] {} {op} {} on {} ({:.4} vs {:.4})",
                if e.pass { "pass" } else { "FAIL" },
                x.better,
                x.worse,
                metric_name(x.metric),
                e.better_value,
                e.worse_value
            );
        }
        s
    }
}

/// Mean pairwise L2 between unseen-view renders below which distinct noise
/// seeds count as collapsed onto one output.
pub const MODE_COLLAPSE_FLOOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    /// Mean over poses and seed pairs of the RMS difference between renders.
    pub mean_pairwise_l2: f64,
    pub per_pose: Vec<f64>,
}

pub fn diversity_stats(pipeline: &dyn ImageTo3D, condition: &Tensor, z_seeds: &[u64], unseen_poses: &[CameraPose]) -> Result<Diversity> {
    if z_seeds.len() < 2 {
        return Err(Error::Param("diversity needs at least two seeds".into()));
    }
    if unseen_poses.is_empty() {
        return Err(Error::Param("diversity needs at least one pose".into()));
    }
    let renders = z_seeds.iter().map(|&z| Ok(pipeline.infer(condition, z, unseen_poses)?.renders)).collect::<Result<Vec<_>>>()?;
    let per_pose: Vec<f64> = (0..unseen_poses.len())
        .map(|p| {
            let mut acc = 0.0;
            let mut pairs = 0;
            for i in 0..renders.len() {
                for j in i + 1..renders.len() {
                    acc += rms_diff(renders[i][p].data(), renders[j][p].data());
                    pairs += 1;
                }
            }
            acc / pairs as f64
        })
        .collect();
    Ok(Diversity { mean_pairwise_l2: per_pose.iter().sum::<f64>() / per_pose.len() as f64, per_pose })
}

/// Rows of condition | ground truth | prediction, one per scene.
pub fn contact_sheet(rows: &[(Tensor, Vec<Tensor>, Vec<Tensor>)]) -> Tensor {
    let cols = rows.iter().map(|(_, g, p)| 1 + g.len().max(p.len())).max().unwrap_or(1);
    let mut tiles = Vec::new();
    for (cond, gt, pred) in rows {
        for line in [gt, pred] {
            tiles.push(cond.clone());
            tiles.extend(line.iter().cloned());
            while tiles.len() % cols != 0 {
                tiles.push(Tensor::full(BACKGROUND, cond.shape()));
            }
        }
    }
    image_grid(&tiles, cols)
}
