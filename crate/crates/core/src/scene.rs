//! Procedural toy scenes, an analytic ray tracer, and on-disk datasets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{self, add, dot, mat_t_vec, normalize, quat_to_matrix, scale, sub, CameraPose, CameraRig, RigParams, Vec3};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Background level: gray 127/255 mapped to `[-1, 1]`.
pub const BACKGROUND: f32 = 2.0 * 127.0 / 255.0 - 1.0;

const LIGHT_DIR: Vec3 = [0.3713906763541037, 0.7427813527082074, 0.5570860145311556];
const AMBIENT: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Box,
    Capsule,
}

/// `size` is the radius for spheres, half extents for boxes, and
/// `(radius, half length, _)` for capsules aligned with the local y axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    pub size: Vec3,
    pub albedo: Vec3,
    /// Unit quaternion `[w, x, y, z]`, local to world.
    pub rotation: [f64; 4],
}

impl Primitive {
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Sphere => self.size[0],
            Shape::Box => camera::norm(self.size),
            Shape::Capsule => self.size[0] + self.size[1],
        }
    }

    /// Nearest hit distance along a unit ray and the world-space normal.
    fn intersect(&self, o: Vec3, d: Vec3) -> Option<(f64, Vec3)> {
        let m = quat_to_matrix(self.rotation);
        // World to local is the transpose of local to world.
        let lo = mat_t_vec(&m, sub(o, self.center));
        let ld = mat_t_vec(&m, d);
        let (t, n) = match self.shape {
            Shape::Sphere => hit_sphere(lo, ld, [0.0; 3], self.size[0])?,
            Shape::Box => hit_box(lo, ld, self.size)?,
            Shape::Capsule => hit_capsule(lo, ld, self.size[0], self.size[1])?,
        };
        Some((t, camera::mat_vec(&m, n)))
    }
}

const EPS_T: f64 = 1e-9;

fn hit_sphere(o: Vec3, d: Vec3, c: Vec3, r: f64) -> Option<(f64, Vec3)> {
    let oc = sub(o, c);
    let b = dot(oc, d);
    let disc = b * b - (dot(oc, oc) - r * r);
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t = if -b - sq > EPS_T { -b - sq } else { -b + sq };
    if t <= EPS_T {
        return None;
    }
    Some((t, normalize(sub(add(o, scale(d, t)), c))))
}

fn hit_box(o: Vec3, d: Vec3, half: Vec3) -> Option<(f64, Vec3)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut axis = 0;
    let mut sign = 1.0;
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i].abs() > half[i] {
                return None;
            }
            continue;
        }
        let a = (-half[i] - o[i]) / d[i];
        let b = (half[i] - o[i]) / d[i];
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        if near > t0 {
            t0 = near;
            axis = i;
            sign = if d[i] > 0.0 { -1.0 } else { 1.0 };
        }
        t1 = t1.min(far);
    }
    if t0 > t1 || t0 <= EPS_T {
        return None;
    }
    let mut n = [0.0; 3];
    n[axis] = sign;
    Some((t0, n))
}

fn hit_capsule(o: Vec3, d: Vec3, r: f64, h: f64) -> Option<(f64, Vec3)> {
    let mut best: Option<(f64, Vec3)> = None;
    let mut keep = |cand: Option<(f64, Vec3)>| {
        if let Some((t, n)) = cand {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, n));
            }
        }
    };
    // Cylinder x^2 + z^2 = r^2 restricted to |y| <= h.
    let a = d[0] * d[0] + d[2] * d[2];
    if a > 1e-15 {
        let b = o[0] * d[0] + o[2] * d[2];
        let c = o[0] * o[0] + o[2] * o[2] - r * r;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / a;
            let y = o[1] + t * d[1];
            if t > EPS_T && y.abs() <= h {
                let p = add(o, scale(d, t));
                keep(Some((t, normalize([p[0], 0.0, p[2]]))));
            }
        }
    }
    keep(hit_sphere(o, d, [0.0, h, 0.0], r));
    keep(hit_sphere(o, d, [0.0, -h, 0.0], r));
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn empty(seed: u64) -> Self {
        SceneSpec { seed, primitives: Vec::new() }
    }

    pub fn bounding_radius(&self) -> f64 {
        self.primitives.iter().map(|p| camera::norm(p.center) + p.bounding_radius()).fold(0.0, f64::max)
    }
}

fn random_unit_quat(r: &mut impl Rng) -> [f64; 4] {
    let q: Vec<f32> = rng::randn(r, 4);
    let n = q.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
    [q[0] as f64 / n, q[1] as f64 / n, q[2] as f64 / n, q[3] as f64 / n]
}

/// Deterministic scene with 2 to 4 primitives inside the unit sphere and at
/// least two distinct albedos.
pub fn sample_scene(seed: u64) -> SceneSpec {
    let mut r = rng::seeded(seed);
    let count = r.random_range(2..=4usize);
    let mut primitives: Vec<Primitive> = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = match r.random_range(0..3) {
            0 => Shape::Sphere,
            1 => Shape::Box,
            _ => Shape::Capsule,
        };
        let size = match shape {
            Shape::Sphere => {
                let s = rng::uniform(&mut r, 0.3, 0.5);
                [s, s, s]
            }
            Shape::Box => [rng::uniform(&mut r, 0.2, 0.38), rng::uniform(&mut r, 0.2, 0.38), rng::uniform(&mut r, 0.2, 0.38)],
            Shape::Capsule => [rng::uniform(&mut r, 0.15, 0.28), rng::uniform(&mut r, 0.15, 0.3), 0.0],
        };
        let mut p = Primitive { shape, center: [0.0; 3], size, albedo: [0.0; 3], rotation: random_unit_quat(&mut r) };
        let reach = 0.98 - p.bounding_radius();
        let dir = normalize(rng::randn(&mut r, 3).iter().map(|v| *v as f64).collect::<Vec<_>>().try_into().unwrap());
        let dist = rng::uniform(&mut r, 0.0, 0.45f64.min(reach));
        p.center = scale(dir, dist);
        loop {
            let a = [rng::uniform(&mut r, 0.1, 0.95), rng::uniform(&mut r, 0.1, 0.95), rng::uniform(&mut r, 0.1, 0.95)];
            if primitives.iter().all(|q| camera::norm(sub(q.albedo, a)) > 0.25) {
                p.albedo = a;
                break;
            }
        }
        primitives.push(p);
    }
    SceneSpec { seed, primitives }
}

/// A rendered view: `[3, H, W]` image in `[-1, 1]` and a hit mask.
#[derive(Clone, Debug)]
pub struct Render {
    pub image: Tensor,
    pub mask: Vec<bool>,
}

/// Analytic ray casting with Lambertian shading under one directional light.
pub fn ray_trace(scene: &SceneSpec, pose: &CameraPose) -> Render {
    let (h, w) = pose.resolution;
    let mut img = vec![BACKGROUND; 3 * h * w];
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = pose.ray_dir(x, y);
            let mut best: Option<(f64, Vec3, &Primitive)> = None;
            for p in &scene.primitives {
                if let Some((t, n)) = p.intersect(pose.position, d) {
                    if best.is_none_or(|(bt, _, _)| t < bt) {
                        best = Some((t, n, p));
                    }
                }
            }
            let Some((_, mut n, p)) = best else { continue };
            if dot(n, d) > 0.0 {
                n = scale(n, -1.0);
            }
            let shade = AMBIENT + (1.0 - AMBIENT) * dot(n, LIGHT_DIR).max(0.0);
            let i = y * w + x;
            mask[i] = true;
            for c in 0..3 {
                img[c * h * w + i] = ((2.0 * p.albedo[c] * shade - 1.0).clamp(-1.0, 1.0)) as f32;
            }
        }
    }
    Render { image: Tensor::new(img, &[3, h, w]), mask }
}

/// `V` views of one object on a rig, stored as `[V, 3, H, W]`.
#[derive(Clone, Debug)]
pub struct MultiViewImageSet {
    pub images: Tensor,
    pub rig: CameraRig,
    pub condition_index: Option<usize>,
}

impl MultiViewImageSet {
    pub fn new(images: Tensor, rig: CameraRig) -> Result<Self> {
        let (h, w) = rig.resolution();
        if images.shape() != [rig.len(), 3, h, w] {
            return Err(Error::Shape(format!("images {:?} do not fit rig of {} views at {h}x{w}", images.shape(), rig.len())));
        }
        Ok(MultiViewImageSet { images, rig, condition_index: None })
    }

    pub fn view(&self, k: usize) -> Tensor {
        self.images.narrow(0, k, 1).reshape(&self.images.shape()[1..])
    }
}

pub fn render_rig(scene: &SceneSpec, rig: &CameraRig) -> MultiViewImageSet {
    let views: Vec<Tensor> = rig.poses.iter().map(|p| ray_trace(scene, p).image).collect();
    let refs: Vec<&Tensor> = views.iter().collect();
    let (h, w) = rig.resolution();
    let images = Tensor::cat(&refs, 0).reshape(&[rig.len(), 3, h, w]);
    MultiViewImageSet { images, rig: rig.clone(), condition_index: None }
}

fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Writes a `[3, H, W]` image in `[-1, 1]` as 8-bit RGB PNG.
pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let [c, h, w] = image.shape() else {
        return Err(Error::Shape(format!("expected [3, H, W], got {:?}", image.shape())));
    };
    if *c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let (h, w) = (*h, *w);
    let d = image.data();
    let mut buf = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for ch in 0..3 {
            buf.push(to_u8(d[ch * h * w + i]));
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::format(path, e.to_string()))
}

fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0 * 2.0 - 1.0
}

/// Rounds an image to the values a PNG round trip produces.
pub fn quantize(image: &Tensor) -> Tensor {
    Tensor::new(image.data().iter().map(|v| from_u8(to_u8(*v))).collect(), image.shape())
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            out[ch * h * w + i] = from_u8(px.0[ch]);
        }
    }
    Ok(Tensor::new(out, &[3, h, w]))
}

/// Tiles `[3, H, W]` images into one grid image with `cols` columns.
pub fn image_grid(images: &[Tensor], cols: usize) -> Tensor {
    let (h, w) = (images[0].dim(1), images[0].dim(2));
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = vec![BACKGROUND; 3 * gh * gw];
    for (k, img) in images.iter().enumerate() {
        let (oy, ox) = ((k / cols) * h, (k % cols) * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[c * gh * gw + (oy + y) * gw + ox + x] = img.data()[c * h * w + y * w + x];
                }
            }
        }
    }
    Tensor::new(out, &[3, gh, gw])
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub const DATASET_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub seed: u64,
    pub rig: RigParams,
    /// Random held-out views rendered per scene in addition to the rig.
    pub extra_views: usize,
    pub extra_elevation_deg: (f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { n_scenes: 200, seed: 0, rig: RigParams::default(), extra_views: 4, extra_elevation_deg: (-30.0, 45.0) }
    }
}

#[derive(Clone, Debug)]
pub struct SceneRecord {
    pub id: String,
    pub scene: SceneSpec,
    pub condition: Tensor,
    pub condition_pose: CameraPose,
    pub views: MultiViewImageSet,
    pub extra: Vec<(CameraPose, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub rig: CameraRig,
    pub scenes: Vec<SceneRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestScene {
    pub id: String,
    pub seed: u64,
    pub condition: String,
    pub views: Vec<String>,
    pub poses: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config: DatasetConfig,
    pub rig: CameraRig,
    pub condition_pose: CameraPose,
    /// Views `0..rig_views` follow the rig, the rest are held-out random views.
    pub rig_views: usize,
    pub scenes: Vec<ManifestScene>,
}

pub fn scene_id(index: usize) -> String {
    format!("{index:05}")
}

pub fn extra_pose(scene_seed: u64, k: usize, cfg: &DatasetConfig) -> Result<CameraPose> {
    let r = cfg.rig.radius;
    let res = (cfg.rig.resolution, cfg.rig.resolution);
    camera::sample_random_pose(rng::derive(scene_seed, 1000 + k as u64), (r, r), cfg.extra_elevation_deg, cfg.rig.fov_y_deg.to_radians(), res)
}

/// Samples and renders every scene in memory.
pub fn generate_dataset(cfg: &DatasetConfig, rig: &CameraRig) -> Result<Dataset> {
    if cfg.n_scenes == 0 {
        return Err(Error::Param("dataset needs at least one scene".into()));
    }
    let cond_pose = cfg.rig.condition_pose()?;
    let scenes = (0..cfg.n_scenes)
        .map(|i| {
            let scene = sample_scene(rng::derive(cfg.seed, i as u64));
            let condition = ray_trace(&scene, &cond_pose).image;
            let views = render_rig(&scene, rig);
            let extra = (0..cfg.extra_views)
                .map(|k| {
                    let p = extra_pose(scene.seed, k, cfg)?;
                    let img = ray_trace(&scene, &p).image;
                    Ok((p, img))
                })
                .collect::<Result<_>>()?;
            Ok(SceneRecord { id: scene_id(i), scene, condition, condition_pose: cond_pose.clone(), views, extra })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { config: cfg.clone(), rig: rig.clone(), scenes })
}

/// Renders the dataset and writes PNGs, pose files and `manifest.json` under `out`.
pub fn build_dataset(cfg: &DatasetConfig, rig: &CameraRig, out: &Path) -> Result<(Dataset, DatasetManifest)> {
    let ds = generate_dataset(cfg, rig)?;
    let mut scenes = Vec::with_capacity(ds.scenes.len());
    for rec in &ds.scenes {
        let dir = out.join("scenes").join(&rec.id);
        save_png(&rec.condition, &dir.join("cond.png"))?;
        let mut views = Vec::new();
        let mut poses = Vec::new();
        let all = rig.poses.iter().enumerate().map(|(k, p)| (p, rec.views.view(k))).chain(rec.extra.iter().map(|(p, i)| (p, i.clone())));
        for (k, (pose, img)) in all.enumerate() {
            let (v, p) = (format!("scenes/{}/view_{k}.png", rec.id), format!("scenes/{}/pose_{k}.json", rec.id));
            save_png(&img, &out.join(&v))?;
            write_json(pose, &out.join(&p))?;
            views.push(v);
            poses.push(p);
        }
        scenes.push(ManifestScene { id: rec.id.clone(), seed: rec.scene.seed, condition: format!("scenes/{}/cond.png", rec.id), views, poses });
    }
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA,
        config: cfg.clone(),
        rig: rig.clone(),
        condition_pose: cfg.rig.condition_pose()?,
        rig_views: rig.len(),
        scenes,
    };
    write_json(&manifest, &out.join("manifest.json"))?;
    Ok((ds, manifest))
}

/// Reads a dataset written by [`build_dataset`]. Images come from the PNG files.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&root.join("manifest.json"))?;
    if manifest.schema_version != DATASET_SCHEMA {
        return Err(Error::format(root.join("manifest.json"), format!("unsupported schema {}", manifest.schema_version)));
    }
    let rig = manifest.rig.clone();
    let (h, w) = rig.resolution();
    let mut scenes = Vec::new();
    for ms in &manifest.scenes {
        let condition = load_png(&root.join(&ms.condition))?;
        let mut imgs = Vec::new();
        let mut extra = Vec::new();
        for (k, (v, p)) in ms.views.iter().zip(&ms.poses).enumerate() {
            let img = load_png(&root.join(v))?;
            if img.shape() != [3, h, w] {
                return Err(Error::format(root.join(v), "image resolution differs from rig"));
            }
            if k < manifest.rig_views {
                imgs.push(img);
            } else {
                let pose: CameraPose = read_json(&root.join(p))?;
                extra.push((pose, img));
            }
        }
        if imgs.len() != rig.len() {
            return Err(Error::format(root.join("manifest.json"), format!("scene {} lists {} rig views", ms.id, imgs.len())));
        }
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let images = Tensor::cat(&refs, 0).reshape(&[rig.len(), 3, h, w]);
        scenes.push(SceneRecord {
            id: ms.id.clone(),
            scene: sample_scene(ms.seed),
            condition,
            condition_pose: manifest.condition_pose.clone(),
            views: MultiViewImageSet::new(images, rig.clone())?,
            extra,
        });
    }
    Ok(Dataset { config: manifest.config, rig, scenes })
}

pub fn dataset_dir_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}
