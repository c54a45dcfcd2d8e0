//! Catalog and ground-truth JSON Lines files.

use std::collections::BTreeMap;
use std::path::Path;

use cbir_core::catalog::{Catalog, CatalogImage, Domain, ImageId, ProductId, TlcId};
use cbir_core::synthgen::GroundTruth;
use serde::{Deserialize, Serialize};

use super::{read_file, write_file};
use crate::error::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image_id: u64,
    product_id: u64,
    tlc_id: u32,
    domain: String,
}

fn parse_domain(s: &str, line: usize) -> Result<Domain> {
    match s {
        "catalog" => Ok(Domain::Catalog),
        "query" => Ok(Domain::Query),
        other => Err(Error::Format(format!("line {line}: unknown domain {other:?}"))),
    }
}

pub fn parse_catalog(text: &str) -> Result<Catalog> {
    let mut images = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        images.push(CatalogImage {
            image_id: raw.image_id,
            product_id: raw.product_id,
            tlc_id: raw.tlc_id,
            domain: parse_domain(&raw.domain, i + 1)?,
        });
    }
    Ok(Catalog::new(images)?)
}

pub fn render_catalog(catalog: &Catalog) -> String {
    let mut out = String::with_capacity(catalog.len() * 72);
    for img in catalog.images() {
        out.push_str(&format!(
            "{{\"image_id\":{},\"product_id\":{},\"tlc_id\":{},\"domain\":\"{}\"}}\n",
            img.image_id,
            img.product_id,
            img.tlc_id,
            img.domain.as_str()
        ));
    }
    out
}

pub fn load_catalog(path: &Path) -> Result<Catalog> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Format(format!("not UTF-8: {e}")))?;
    parse_catalog(&text)
}

pub fn save_catalog(path: &Path, catalog: &Catalog) -> Result<()> {
    write_file(path, render_catalog(catalog).as_bytes())
}

#[derive(Serialize, Deserialize)]
struct GroundTruthRecord {
    image_id: ImageId,
    product_id: ProductId,
    tlc_id: TlcId,
}

pub fn render_ground_truth(gt: &BTreeMap<ImageId, GroundTruth>) -> String {
    let mut out = String::new();
    for (id, g) in gt {
        out.push_str(&format!(
            "{{\"image_id\":{id},\"product_id\":{},\"tlc_id\":{}}}\n",
            g.product_id, g.tlc_id
        ));
    }
    out
}

pub fn parse_ground_truth(text: &str) -> Result<BTreeMap<ImageId, GroundTruth>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: GroundTruthRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.insert(
            r.image_id,
            GroundTruth {
                product_id: r.product_id,
                tlc_id: r.tlc_id,
            },
        );
    }
    Ok(out)
}
