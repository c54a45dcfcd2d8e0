//! Deterministic synthetic cross-domain embedding datasets.
//!
//! The generator reproduces three structural difficulties of snap-and-search
//! retrieval: a TLC → product → image hierarchy, a systematic shift between
//! query-domain and catalog-domain vectors, and "confuser" products whose
//! vectors sit in another TLC's region while keeping their own label.
//!
//! # Random stream
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64(seed)` split into
//! four word streams (`set_stream`), one per phase:
//!
//! | stream | draws |
//! |--------|-------|
//! | 0 | TLC centroids, `num_tlcs × dim` standard normals, row-major |
//! | 1 | per TLC: confuser subset (`rand::seq::index::sample`), then per product the anchor TLC (confusers only) followed by `dim` normals |
//! | 2 | catalog images, product-major, `dim` normals each |
//! | 3 | domain-shift direction (`dim` normals), then query images product-major |
//!
//! Normals are `rand_distr::StandardNormal` sampled as `f64`. All arithmetic
//! is `f64`; vectors are normalized and then rounded to `f32`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, CatalogImage, Domain, EmbeddingMatrix, ImageId, ProductId, TlcId};
use crate::error::{Error, Result};
use crate::math;

const STREAM_TLC: u64 = 0;
const STREAM_PRODUCTS: u64 = 1;
const STREAM_CATALOG: u64 = 2;
const STREAM_QUERY: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_tlcs: usize,
    pub products_per_tlc: usize,
    pub catalog_images_per_product: usize,
    pub query_images_per_product: usize,
    pub dim: usize,
    /// Per-component standard deviation of product centroids around their anchor.
    pub tlc_spread: f64,
    /// Per-component standard deviation of catalog images around their product.
    pub image_noise: f64,
    /// Per-component standard deviation of query images around their product.
    pub query_noise: f64,
    /// Length of the global query-domain offset.
    pub domain_shift: f64,
    pub confuser_fraction: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// The frozen desk-scale configuration used by the benchmark and the
    /// acceptance suite.
    pub fn reference() -> Self {
        SynthConfig {
            num_tlcs: 32,
            products_per_tlc: 100,
            catalog_images_per_product: 10,
            query_images_per_product: 3,
            dim: 64,
            tlc_spread: 0.05,
            image_noise: 0.02,
            query_noise: 0.05,
            domain_shift: 0.8,
            confuser_fraction: 0.05,
            seed: 42,
        }
    }

    pub fn confusers_per_tlc(&self) -> usize {
        math::floor(self.confuser_fraction * self.products_per_tlc as f64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_tlcs", self.num_tlcs),
            ("products_per_tlc", self.products_per_tlc),
            ("catalog_images_per_product", self.catalog_images_per_product),
            ("query_images_per_product", self.query_images_per_product),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.dim < 2 {
            return Err(Error::Config(format!("dim must be >= 2, got {}", self.dim)));
        }
        for (name, v) in [
            ("tlc_spread", self.tlc_spread),
            ("image_noise", self.image_noise),
            ("query_noise", self.query_noise),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a positive number")));
            }
        }
        if self.query_noise < self.image_noise {
            return Err(Error::Config(
                "query_noise must be >= image_noise".into(),
            ));
        }
        if !(self.domain_shift >= 0.0 && self.domain_shift.is_finite()) {
            return Err(Error::Config("domain_shift must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.confuser_fraction) {
            return Err(Error::Config("confuser_fraction must lie in [0, 1]".into()));
        }
        if self.num_tlcs == 1 && self.confusers_per_tlc() > 0 {
            return Err(Error::Config(
                "confuser products need at least two TLCs".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub product_id: ProductId,
    pub tlc_id: TlcId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub catalog: Catalog,
    pub embeddings: EmbeddingMatrix,
    /// Query image id → true product and TLC.
    pub ground_truth: BTreeMap<ImageId, GroundTruth>,
    pub confuser_products: BTreeSet<ProductId>,
}

impl SynthDataset {
    pub fn query_ids(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.ground_truth.keys().copied()
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(v: &mut [f64]) {
    let n = math::sqrt(v.iter().map(|x| x * x).sum());
    for x in v.iter_mut() {
        *x /= n;
    }
}

fn to_unit_f32(mut v: Vec<f64>) -> Vec<f32> {
    unit(&mut v);
    v.into_iter().map(|x| x as f32).collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generates a dataset. Pure function of `config`.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let dim = config.dim;
    let n_tlc = config.num_tlcs;
    let n_prod = config.products_per_tlc;

    let mut rng = stream(config.seed, STREAM_TLC);
    let centroids: Vec<Vec<f64>> = (0..n_tlc)
        .map(|_| {
            let mut c = normal_vec(&mut rng, dim, 1.0);
            unit(&mut c);
            c
        })
        .collect();

    let mut rng = stream(config.seed, STREAM_PRODUCTS);
    let n_conf = config.confusers_per_tlc();
    let mut products: Vec<(ProductId, TlcId, Vec<f64>)> = Vec::with_capacity(n_tlc * n_prod);
    let mut confuser_products = BTreeSet::new();
    for t in 0..n_tlc {
        let confusers: BTreeSet<usize> = index::sample(&mut rng, n_prod, n_conf).into_iter().collect();
        for p in 0..n_prod {
            let anchor = if confusers.contains(&p) {
                let other = rng.random_range(0..n_tlc - 1);
                if other >= t {
                    other + 1
                } else {
                    other
                }
            } else {
                t
            };
            let offset = normal_vec(&mut rng, dim, config.tlc_spread);
            let centroid: Vec<f64> = centroids[anchor]
                .iter()
                .zip(&offset)
                .map(|(a, b)| a + b)
                .collect();
            let product_id = (t * n_prod + p) as ProductId;
            if anchor != t {
                confuser_products.insert(product_id);
            }
            products.push((product_id, t as TlcId, centroid));
        }
    }

    let n_cat = products.len() * config.catalog_images_per_product;
    let n_query = products.len() * config.query_images_per_product;
    let mut images = Vec::with_capacity(n_cat + n_query);
    let mut embeddings = EmbeddingMatrix::with_capacity(dim, n_cat + n_query)?;
    let mut next_id: ImageId = 0;

    let mut rng = stream(config.seed, STREAM_CATALOG);
    for (product_id, tlc_id, centroid) in &products {
        for _ in 0..config.catalog_images_per_product {
            let noise = normal_vec(&mut rng, dim, config.image_noise);
            let v: Vec<f64> = centroid.iter().zip(&noise).map(|(a, b)| a + b).collect();
            embeddings.push(next_id, &to_unit_f32(v))?;
            images.push(CatalogImage {
                image_id: next_id,
                product_id: *product_id,
                tlc_id: *tlc_id,
                domain: Domain::Catalog,
            });
            next_id += 1;
        }
    }

    let mut rng = stream(config.seed, STREAM_QUERY);
    let mut shift = normal_vec(&mut rng, dim, 1.0);
    unit(&mut shift);
    let mut ground_truth = BTreeMap::new();
    for (product_id, tlc_id, centroid) in &products {
        for _ in 0..config.query_images_per_product {
            let noise = normal_vec(&mut rng, dim, config.query_noise);
            let v: Vec<f64> = centroid
                .iter()
                .zip(&shift)
                .zip(&noise)
                .map(|((c, u), n)| c + config.domain_shift * u + n)
                .collect();
            embeddings.push(next_id, &to_unit_f32(v))?;
            images.push(CatalogImage {
                image_id: next_id,
                product_id: *product_id,
                tlc_id: *tlc_id,
                domain: Domain::Query,
            });
            ground_truth.insert(
                next_id,
                GroundTruth {
                    product_id: *product_id,
                    tlc_id: *tlc_id,
                },
            );
            next_id += 1;
        }
    }

    Ok(SynthDataset {
        config: config.clone(),
        catalog: Catalog::new(images)?,
        embeddings,
        ground_truth,
        confuser_products,
    })
}
