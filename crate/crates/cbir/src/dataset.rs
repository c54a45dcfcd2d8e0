//! A catalog plus its embeddings as stored in a data directory.
//!
//! ```text
//! embeddings.cemb      CEMB vectors
//! catalog.jsonl        one image record per line
//! ground_truth.jsonl   query image → product, TLC (synthetic data only)
//! synth_meta.json      generator config and confuser products (synthetic only)
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use cbir_core::catalog::{validate, Catalog, EmbeddingMatrix, ProductId, ValidationSummary};
use cbir_core::metrics::fingerprint;
use cbir_core::synthgen::{SynthConfig, SynthDataset};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::formats::catalog_jsonl::{load_catalog, render_ground_truth, save_catalog};
use crate::formats::cemb::{load_embeddings, save_embeddings};
use crate::formats::{read_file, write_file};

pub const EMBEDDINGS_FILE: &str = "embeddings.cemb";
pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const SYNTH_META_FILE: &str = "synth_meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub config: SynthConfig,
    pub confuser_products: Vec<ProductId>,
    pub summary: ValidationSummary,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub catalog: Catalog,
    /// Unit-normalized.
    pub embeddings: EmbeddingMatrix,
    pub summary: ValidationSummary,
    /// Known only for generated data.
    pub confuser_products: Option<BTreeSet<ProductId>>,
    pub synth_config: Option<SynthConfig>,
}

impl Dataset {
    /// Validates the pair and normalizes the embeddings.
    pub fn new(catalog: Catalog, mut embeddings: EmbeddingMatrix) -> Result<Self> {
        let summary = validate(&catalog, &embeddings)?;
        embeddings.normalize()?;
        Ok(Dataset {
            catalog,
            embeddings,
            summary,
            confuser_products: None,
            synth_config: None,
        })
    }

    pub fn from_synth(s: SynthDataset) -> Result<Self> {
        let mut d = Dataset::new(s.catalog, s.embeddings)?;
        d.confuser_products = Some(s.confuser_products);
        d.synth_config = Some(s.config);
        Ok(d)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let embeddings = load_embeddings(&dir.join(EMBEDDINGS_FILE))?;
        let catalog = load_catalog(&dir.join(CATALOG_FILE))?;
        let mut d = Dataset::new(catalog, embeddings)?;
        let meta_path = dir.join(SYNTH_META_FILE);
        if meta_path.exists() {
            let meta: SynthMeta = serde_json::from_slice(&read_file(&meta_path)?)?;
            d.confuser_products = Some(meta.confuser_products.into_iter().collect());
            d.synth_config = Some(meta.config);
        }
        Ok(d)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.catalog, &self.embeddings)
    }
}

/// Writes a generated dataset in the data-directory layout.
pub fn save_synth(dir: &Path, s: &SynthDataset) -> Result<SynthMeta> {
    save_embeddings(&dir.join(EMBEDDINGS_FILE), &s.embeddings)?;
    save_catalog(&dir.join(CATALOG_FILE), &s.catalog)?;
    write_file(&dir.join(GROUND_TRUTH_FILE), render_ground_truth(&s.ground_truth).as_bytes())?;
    let meta = SynthMeta {
        config: s.config.clone(),
        confuser_products: s.confuser_products.iter().copied().collect(),
        summary: validate(&s.catalog, &s.embeddings)?,
    };
    let mut bytes = serde_json::to_vec_pretty(&meta)?;
    bytes.push(b'\n');
    write_file(&dir.join(SYNTH_META_FILE), &bytes)?;
    Ok(meta)
}
