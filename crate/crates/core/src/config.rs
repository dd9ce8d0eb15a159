//! Layered run configuration: defaults, then a TOML file, then `key=value`
//! overrides. Unknown keys are rejected at every level.
//!
//! File grammar: standard TOML with one table per section (`[scene]`,
//! `[model]`, `[teacher]`, `[recon]`, `[stage1]`, `[stage2]`, `[eval]`,
//! `[paths]`) plus top-level `seed` and `schema_version`. Override keys use
//! dotted paths (`stage2.lambda_perceptual=0.5`, or the alias `stage2.lambda`); values are parsed as TOML
//! and fall back to plain strings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::RigParams;
use crate::diffusion::{make_schedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::models::{pixel_footprint, DenoiserConfig, ReconTrainConfig, ReconstructorConfig, TeacherTrainConfig, UNetConfig};
use crate::scene::DatasetConfig;
use crate::splat::{SplatterParams, SPLAT_CHANNELS};
use crate::stage2::Stage2Config;
use crate::vsd::VSDConfig;

pub const CONFIG_SCHEMA: u32 = 1;
pub const HOME_ENV: &str = "GECO_LAB_HOME";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub pgt: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { dataset: "dataset".into(), checkpoints: "checkpoints".into(), pgt: "pgt".into(), reports: "reports".into() }
    }
}

impl Paths {
    /// Resolves relative entries against `root`.
    pub fn under(&self, root: &Path) -> Paths {
        let j = |p: &PathBuf| if p.is_absolute() { p.clone() } else { root.join(p) };
        Paths { dataset: j(&self.dataset), checkpoints: j(&self.checkpoints), pgt: j(&self.pgt), reports: j(&self.reports) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub n_scenes: usize,
    /// Trailing scenes kept out of every training stage.
    pub holdout: usize,
    pub resolution: usize,
    pub radius: f64,
    pub fov_y_deg: f64,
    pub extra_views: usize,
    pub extra_elevation_deg: (f64, f64),
}

impl Default for SceneSection {
    fn default() -> Self {
        SceneSection { n_scenes: 200, holdout: 20, resolution: 64, radius: 2.5, fov_y_deg: 50.0, extra_views: 4, extra_elevation_deg: (-30.0, 45.0) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub width: usize,
    pub width_low: usize,
    pub blocks_low: usize,
    pub patch: usize,
    pub groups: usize,
    pub schedule: ScheduleKind,
    pub t_min: f64,
    pub t_max: f64,
    /// Time at which the generator evaluates its backbone; defaults to `t_max`.
    pub t_gen: Option<f64>,
    pub depth_margin: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            width: 32,
            width_low: 64,
            blocks_low: 2,
            patch: 2,
            groups: 8,
            schedule: ScheduleKind::Cosine,
            t_min: 0.02,
            t_max: 0.98,
            t_gen: None,
            depth_margin: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub protocol: Protocol,
    pub z_seed: u64,
    pub mask_bg: bool,
    pub diversity_seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { protocol: Protocol::Ring15, z_seed: 0, mask_bg: false, diversity_seeds: vec![1, 2, 3, 4] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub scene: SceneSection,
    pub model: ModelSection,
    pub teacher: TeacherTrainConfig,
    pub recon: ReconTrainConfig,
    pub stage1: VSDConfig,
    pub stage2: Stage2Config,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA,
            seed: 0,
            paths: Paths::default(),
            scene: SceneSection::default(),
            model: ModelSection::default(),
            teacher: TeacherTrainConfig::default(),
            recon: ReconTrainConfig::default(),
            stage1: VSDConfig::default(),
            stage2: Stage2Config::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn rig_params(&self) -> RigParams {
        RigParams { radius: self.scene.radius, fov_y_deg: self.scene.fov_y_deg, resolution: self.scene.resolution }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            n_scenes: self.scene.n_scenes,
            seed: self.seed,
            rig: self.rig_params(),
            extra_views: self.scene.extra_views,
            extra_elevation_deg: self.scene.extra_elevation_deg,
        }
    }

    fn unet(&self, seed_tag: u64) -> UNetConfig {
        let m = &self.model;
        UNetConfig {
            views: 6,
            resolution: self.scene.resolution,
            in_channels: 3,
            cond_channels: 3,
            out_channels: 3,
            patch: m.patch,
            width: m.width,
            width_low: m.width_low,
            blocks_low: m.blocks_low,
            time_embedding: true,
            view_embedding: true,
            groups: m.groups,
            seed: crate::rng::derive(self.seed, seed_tag),
        }
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig> {
        let schedule = make_schedule(self.model.schedule, self.model.t_min, self.model.t_max)?;
        Ok(DenoiserConfig { net: self.unet(1), schedule })
    }

    pub fn reconstructor_config(&self) -> Result<ReconstructorConfig> {
        let net = UNetConfig {
            in_channels: 9,
            cond_channels: 0,
            out_channels: SPLAT_CHANNELS,
            time_embedding: false,
            view_embedding: false,
            ..self.unet(2)
        };
        let pose = self.rig_params().condition_pose()?;
        Ok(ReconstructorConfig { net, splat: SplatterParams { depth_margin: self.model.depth_margin }, init_scale: pixel_footprint(&pose) })
    }

    /// Checks cross-field constraints not expressible in the types.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA {
            return Err(Error::Config(format!("schema_version {} is not supported (expected {CONFIG_SCHEMA})", self.schema_version)));
        }
        if self.scene.holdout >= self.scene.n_scenes {
            return Err(Error::Config(format!("holdout {} leaves no training scenes out of {}", self.scene.holdout, self.scene.n_scenes)));
        }
        self.denoiser_config()?.net.validate()?;
        self.reconstructor_config()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Override,
}

impl Source {
    pub fn label(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Override => "override",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    /// Origin of every leaf key, by dotted path.
    pub provenance: BTreeMap<String, Source>,
}

fn leaves(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(&p, v, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in over {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &path)?,
            (Some(toml::Value::Table(_)), _) => return Err(Error::Config(format!("{path} is a section, not a value"))),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
    Ok(())
}

/// Short spellings accepted for a few keys.
const ALIASES: [(&str, &str); 1] = [("stage2.lambda", "stage2.lambda_perceptual")];

fn canonical(key: &str) -> String {
    ALIASES.iter().find(|(a, _)| *a == key).map(|(_, c)| c.to_string()).unwrap_or_else(|| key.to_string())
}

fn canonicalize(t: toml::Table, prefix: &str) -> toml::Table {
    t.into_iter()
        .map(|(k, v)| {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            let v = match v {
                toml::Value::Table(inner) => toml::Value::Table(canonicalize(inner, &path)),
                other => other,
            };
            let name = canonical(&path).rsplit('.').next().expect("nonempty key").to_string();
            (name, v)
        })
        .collect()
}

fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {s:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((canonical(key), value))
}

fn nest(key: &str, value: toml::Value) -> toml::Table {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("nonempty key");
    let mut t = toml::Table::new();
    t.insert(last.to_string(), value);
    for p in parts.into_iter().rev() {
        let mut outer = toml::Table::new();
        outer.insert(p.to_string(), toml::Value::Table(t));
        t = outer;
    }
    t
}

/// Parses TOML text into a table, mapping syntax errors to config errors.
pub fn parse_toml(text: &str, origin: &str) -> Result<toml::Table> {
    toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
}

/// Defaults < `file` < `overrides`.
pub fn resolve_config(file: Option<&Path>, overrides: &[String]) -> Result<ResolvedConfig> {
    let defaults = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
    let mut merged = defaults.clone();
    let mut from_file = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let t = canonicalize(parse_toml(&text, &path.display().to_string())?, "");
        leaves("", &toml::Value::Table(t.clone()), &mut from_file);
        merge(&mut merged, &t, "")?;
    }
    let mut from_override = Vec::new();
    for o in overrides {
        let (key, value) = parse_override(o)?;
        from_override.push(key.clone());
        merge(&mut merged, &nest(&key, value), "")?;
    }
    let config: RunConfig = toml::Value::Table(merged.clone()).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    config.validate()?;
    let mut all = Vec::new();
    leaves("", &toml::Value::Table(merged), &mut all);
    let provenance = all
        .into_iter()
        .map(|k| {
            let src = if from_override.contains(&k) {
                Source::Override
            } else if from_file.contains(&k) {
                Source::File
            } else {
                Source::Default
            };
            (k, src)
        })
        .collect();
    Ok(ResolvedConfig { config, provenance })
}

impl ResolvedConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.config).expect("config serializes")
    }

    /// One `key = value  # source` line per leaf.
    pub fn annotated(&self) -> String {
        let table = toml::Table::try_from(&self.config).expect("config serializes");
        let mut out = String::new();
        for (k, src) in &self.provenance {
            let mut v: Option<&toml::Value> = None;
            let mut t = &table;
            for (i, part) in k.split('.').enumerate() {
                match t.get(part) {
                    Some(toml::Value::Table(inner)) if i + 1 < k.split('.').count() => t = inner,
                    other => v = other,
                }
            }
            if let Some(v) = v {
                out.push_str(&format!("{k} = {v}  # {}\n", src.label()));
            }
        }
        out
    }
}

/// Root for relative paths: `GECO_LAB_HOME` if set, else the working directory.
pub fn lab_home() -> PathBuf {
    std::env::var_os(HOME_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}
