#![allow(dead_code)]

#[path = "../../../core/tests/common/mod.rs"]
pub mod oracles;

use std::path::Path;

use cbir::dataset::save_synth;
use cbir::formats::catalog_jsonl::render_catalog;
use cbir::formats::cemb::encode;
use cbir::service::{spawn, ServerHandle};
use cbir_core::catalog::{Catalog, CatalogImage, EmbeddingMatrix};
use cbir_core::synthgen::{generate, SynthConfig, SynthDataset};
use base64::Engine as _;
use serde_json::{json, Value};

pub fn start_server() -> ServerHandle {
    spawn("127.0.0.1:0".parse().unwrap(), None).unwrap()
}

pub struct Client {
    base: String,
    http: reqwest::blocking::Client,
}

impl Client {
    pub fn new(server: &ServerHandle) -> Self {
        Client {
            base: format!("http://{}", server.addr()),
            http: reqwest::blocking::Client::builder()
                .timeout(std::time::Duration::from_secs(300))
                .build()
                .unwrap(),
        }
    }

    pub fn post(&self, path: &str, body: &Value) -> (u16, Value) {
        let r = self.http.post(format!("{}{path}", self.base)).json(body).send().unwrap();
        let status = r.status().as_u16();
        (status, r.json().unwrap_or(Value::Null))
    }

    pub fn post_raw(&self, path: &str, body: &'static str) -> (u16, Value) {
        let r = self
            .http
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .unwrap();
        let status = r.status().as_u16();
        (status, r.json().unwrap_or(Value::Null))
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().unwrap();
        let status = r.status().as_u16();
        (status, r.json().unwrap_or(Value::Null))
    }
}

pub fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        num_tlcs: 8,
        products_per_tlc: 25,
        catalog_images_per_product: 8,
        query_images_per_product: 2,
        dim: 32,
        seed,
        ..SynthConfig::reference()
    }
}

/// Inline ingest payload for a catalog/embedding pair.
pub fn inline_ingest(catalog: &Catalog, emb: &EmbeddingMatrix) -> Value {
    json!({
        "embeddings_b64": base64::engine::general_purpose::STANDARD.encode(encode(emb)),
        "catalog_jsonl": render_catalog(catalog),
    })
}

/// Shifts every image and product id by `offset`, so two datasets can be
/// told apart from search results alone.
pub fn offset_ids(d: &SynthDataset, offset: u64) -> (Catalog, EmbeddingMatrix) {
    let images = d
        .catalog
        .images()
        .iter()
        .map(|i| CatalogImage {
            image_id: i.image_id + offset,
            product_id: i.product_id + offset,
            ..*i
        })
        .collect();
    let mut emb = EmbeddingMatrix::new(d.embeddings.dim()).unwrap();
    for (id, v) in d.embeddings.rows() {
        emb.push(id + offset, v).unwrap();
    }
    (Catalog::new(images).unwrap(), emb)
}

pub fn write_synth(dir: &Path, cfg: &SynthConfig) -> SynthDataset {
    let d = generate(cfg).unwrap();
    save_synth(dir, &d).unwrap();
    d
}
