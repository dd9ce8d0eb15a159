//! Checkpoint files: a magic tag, a JSON header and named parameter sections.
//!
//! The content digest covers the parameter bytes only, so identical weights
//! give identical digests whatever the header says. Wall-clock metadata lives
//! in the sidecar manifest, which keeps checkpoint bytes reproducible.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{DiffusionSchedule, PredictionKind};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GECOCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Teacher,
    Reconstructor,
    Stage1,
    Stage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: Stage,
    pub config: serde_json::Value,
    pub config_digest: String,
    pub schedule: Option<DiffusionSchedule>,
    pub prediction: Option<PredictionKind>,
    pub sections: Vec<String>,
    pub parents: Vec<String>,
    pub content_digest: String,
}

#[derive(Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub sections: Vec<(String, ParamStore)>,
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn params_digest(sections: &[(String, ParamStore)]) -> String {
    let mut h = Sha256::new();
    for (name, ps) in sections {
        h.update(name.as_bytes());
        let mut buf = Vec::new();
        ps.write_to(&mut buf).expect("writing to memory");
        h.update(&buf);
    }
    hex::encode(h.finalize())
}

/// Digest of the canonical JSON form of a configuration.
pub fn config_digest<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
    Ok(digest_bytes(&serde_json::to_vec(&value).expect("json value serializes")))
}

impl Checkpoint {
    pub fn new<C: Serialize>(
        stage: Stage,
        config: &C,
        schedule: Option<DiffusionSchedule>,
        prediction: Option<PredictionKind>,
        sections: Vec<(String, ParamStore)>,
        parents: Vec<String>,
    ) -> Result<Self> {
        let config = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
        let header = CheckpointHeader {
            stage,
            config_digest: config_digest(&config)?,
            config,
            schedule,
            prediction,
            sections: sections.iter().map(|(n, _)| n.clone()).collect(),
            parents,
            content_digest: params_digest(&sections),
        };
        Ok(Checkpoint { header, sections })
    }

    pub fn digest(&self) -> &str {
        &self.header.content_digest
    }

    pub fn section(&self, name: &str) -> Result<&ParamStore> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no section {name:?}")))
    }

    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.header.config.clone()).map_err(|e| Error::Checkpoint(format!("config does not match: {e}")))
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.header.stage != stage {
            return Err(Error::Checkpoint(format!("expected a {stage:?} checkpoint, found {:?}", self.header.stage)));
        }
        Ok(())
    }

    /// Refuses a checkpoint whose configuration digest differs from
    /// `expected`, unless `force` is set.
    pub fn verify_config_digest(&self, expected: &str, force: bool) -> Result<()> {
        if self.header.config_digest != expected {
            if force {
                log::warn!("config digest mismatch ignored: {} vs {expected}", self.header.config_digest);
            } else {
                return Err(Error::Checkpoint(format!(
                    "config digest {} does not match {expected} (use --force to override)",
                    self.header.config_digest
                )));
            }
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let header = serde_json::to_vec(&ckpt.header).expect("header serializes");
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, ps) in &ckpt.sections {
            ps.write_to(&mut w)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingParent(path.display().to_string()));
    }
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 8];
    let mut word = [0u8; 4];
    let mut len = [0u8; 8];
    let io = |e| Error::io(path, e);
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    r.read_exact(&mut word).map_err(io)?;
    if u32::from_le_bytes(word) != VERSION {
        return Err(Error::format(path, "unsupported checkpoint version"));
    }
    r.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(Error::format(path, "checkpoint header too large"));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(io)?;
    let header: CheckpointHeader = serde_json::from_slice(&header).map_err(|e| Error::format(path, &e.to_string()))?;
    let sections = header
        .sections
        .iter()
        .map(|n| Ok((n.clone(), ParamStore::read_from(&mut r).map_err(io)?)))
        .collect::<Result<Vec<_>>>()?;
    let digest = params_digest(&sections);
    if digest != header.content_digest {
        return Err(Error::Checkpoint(format!("{}: content digest mismatch, file is corrupt", path.display())));
    }
    Ok(Checkpoint { header, sections })
}

/// Sidecar record written next to each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub stage: Stage,
    pub config_digest: String,
    pub content_digest: String,
    pub parent_digests: Vec<String>,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub metrics_snapshot: BTreeMap<String, f64>,
}

impl CheckpointManifest {
    pub fn for_checkpoint(ckpt: &Checkpoint, metrics: BTreeMap<String, f64>) -> Self {
        let created_at = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        CheckpointManifest {
            stage: ckpt.header.stage,
            config_digest: ckpt.header.config_digest.clone(),
            content_digest: ckpt.header.content_digest.clone(),
            parent_digests: ckpt.header.parents.clone(),
            created_at,
            metrics_snapshot: metrics,
        }
    }

    pub fn path_for(checkpoint: &Path) -> PathBuf {
        let mut s = checkpoint.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}
