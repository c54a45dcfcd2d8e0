//! Engine manifests: a JSON file tying together the per-partition CIDX
//! files, the baseline index and the router.
//!
//! Layout of an engine directory:
//! ```text
//! manifest.json
//! baseline.cidx            (if a baseline was built)
//! partitions/tlc-<id>.cidx (one per cascade partition)
//! router.json              (softmax routers only)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use cbir_core::cascade::{BaselineEngine, CascadeEngine, Router};
use cbir_core::catalog::TlcId;
use cbir_core::router::OracleRouter;
use cbir_core::vecindex::IndexSpec;
use serde::{Deserialize, Serialize};

use super::cidx::{load_index, save_index};
use super::router_file::{load_router, save_router, RouterFile, TrainingMeta};
use super::{read_file, write_file};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_TAG: &str = "cbir-engine/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RouterRef {
    Softmax { file: String },
    Oracle(OracleRouter),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionEntry {
    pub tlc_id: TlcId,
    pub file: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeEntry {
    pub router: RouterRef,
    pub partitions: Vec<PartitionEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub file: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub build_version: u64,
    pub dim: usize,
    pub index: IndexSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default)]
    pub baseline: Option<BaselineEntry>,
    #[serde(default)]
    pub cascade: Option<CascadeEntry>,
}

/// Engines reloaded from disk.
#[derive(Debug, Clone)]
pub struct EngineSet {
    pub manifest: Manifest,
    pub baseline: Option<BaselineEngine>,
    pub cascade: Option<CascadeEngine>,
    pub router_training: Option<TrainingMeta>,
}

pub struct SaveRequest<'a> {
    pub baseline: Option<&'a BaselineEngine>,
    pub cascade: Option<&'a CascadeEngine>,
    pub router_training: Option<TrainingMeta>,
    pub fingerprint: Option<String>,
    pub build_version: u64,
}

pub fn save_engines(dir: &Path, req: SaveRequest<'_>) -> Result<Manifest> {
    let spec = match (req.baseline, req.cascade) {
        (Some(b), _) => *b.spec(),
        (None, Some(c)) => *c.spec(),
        (None, None) => return Err(Error::Usage("nothing to save: no engine was built".into())),
    };
    let dim = req
        .baseline
        .map(|b| b.index().dim())
        .or(req.cascade.map(cbir_core::cascade::Retriever::dim))
        .unwrap_or(0);

    let baseline = match req.baseline {
        Some(b) => {
            let file = "baseline.cidx".to_string();
            save_index(&dir.join(&file), b.index())?;
            Some(BaselineEntry {
                file,
                count: b.index().len(),
            })
        }
        None => None,
    };

    let cascade = match req.cascade {
        Some(c) => {
            let router = match c.router() {
                Router::Softmax(r) => {
                    let file = "router.json".to_string();
                    save_router(&dir.join(&file), &RouterFile::new(r, req.router_training.clone()))?;
                    RouterRef::Softmax { file }
                }
                Router::Oracle(o) => RouterRef::Oracle(o.clone()),
            };
            let mut partitions = Vec::new();
            for (tlc, idx) in c.partitions() {
                let file = format!("partitions/tlc-{tlc}.cidx");
                save_index(&dir.join(&file), idx)?;
                partitions.push(PartitionEntry {
                    tlc_id: *tlc,
                    file,
                    count: idx.len(),
                });
            }
            Some(CascadeEntry { router, partitions })
        }
        None => None,
    };

    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        build_version: req.build_version,
        dim,
        index: spec,
        fingerprint: req.fingerprint,
        baseline,
        cascade,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_file(&dir.join(MANIFEST_FILE), &bytes)?;
    Ok(manifest)
}

pub fn load_engines(dir: &Path) -> Result<EngineSet> {
    let manifest: Manifest = serde_json::from_slice(&read_file(&dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Format(format!("unknown manifest format {:?}", manifest.format)));
    }
    let check = |what: &str, idx: &cbir_core::vecindex::VectorIndex, count: usize| -> Result<()> {
        if idx.kind() != manifest.index.kind() || idx.dim() != manifest.dim || idx.len() != count {
            return Err(Error::Format(format!("{what} does not match the manifest")));
        }
        Ok(())
    };

    let baseline = match &manifest.baseline {
        Some(entry) => {
            let idx = load_index(&dir.join(&entry.file))?;
            check(&entry.file, &idx, entry.count)?;
            Some(BaselineEngine::from_parts(idx, manifest.index, manifest.build_version))
        }
        None => None,
    };

    let mut router_training = None;
    let cascade = match &manifest.cascade {
        Some(entry) => {
            let router = match &entry.router {
                RouterRef::Softmax { file } => {
                    let rf = load_router(&dir.join(file))?;
                    router_training = rf.training.clone();
                    Router::Softmax(rf.router()?)
                }
                RouterRef::Oracle(o) => {
                    Router::Oracle(OracleRouter::new(o.accuracy, o.class_labels.clone(), o.seed)?)
                }
            };
            let mut partitions = BTreeMap::new();
            for p in &entry.partitions {
                let idx = load_index(&dir.join(&p.file))?;
                check(&p.file, &idx, p.count)?;
                if partitions.insert(p.tlc_id, idx).is_some() {
                    return Err(Error::Format(format!("partition {} listed twice", p.tlc_id)));
                }
            }
            Some(CascadeEngine::from_parts(
                router,
                partitions,
                manifest.index,
                manifest.dim,
                manifest.build_version,
            )?)
        }
        None => None,
    };

    Ok(EngineSet {
        manifest,
        baseline,
        cascade,
        router_training,
    })
}
