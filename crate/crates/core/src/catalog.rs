//! Gallery/query data model: image → product → TLC hierarchy and the
//! embedding matrix keyed by image id.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

pub type ImageId = u64;
pub type ProductId = u64;
pub type TlcId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Catalog,
    Query,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Catalog => "catalog",
            Domain::Query => "query",
        }
    }
}

/// Which images a partitioning or count should consider.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainFilter {
    Only(Domain),
    Any,
}

impl DomainFilter {
    pub fn matches(self, d: Domain) -> bool {
        match self {
            DomainFilter::Only(want) => want == d,
            DomainFilter::Any => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogImage {
    pub image_id: ImageId,
    pub product_id: ProductId,
    pub tlc_id: TlcId,
    pub domain: Domain,
}

/// Validated, immutable collection of image records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Catalog {
    images: Vec<CatalogImage>,
    product_to_tlc: BTreeMap<ProductId, TlcId>,
    tlc_ids: BTreeSet<TlcId>,
    position: BTreeMap<ImageId, usize>,
}

impl Catalog {
    /// Builds a catalog, rejecting duplicate image ids and products that
    /// appear under more than one TLC. Record order is preserved.
    pub fn new(images: Vec<CatalogImage>) -> Result<Self> {
        let mut product_to_tlc = BTreeMap::new();
        let mut tlc_ids = BTreeSet::new();
        let mut position = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            if position.insert(img.image_id, i).is_some() {
                return Err(Error::DuplicateImage(img.image_id));
            }
            match product_to_tlc.get(&img.product_id) {
                Some(&t) if t != img.tlc_id => {
                    return Err(Error::Hierarchy {
                        product_id: img.product_id,
                        first: t,
                        second: img.tlc_id,
                    })
                }
                Some(_) => {}
                None => {
                    product_to_tlc.insert(img.product_id, img.tlc_id);
                }
            }
            tlc_ids.insert(img.tlc_id);
        }
        Ok(Catalog {
            images,
            product_to_tlc,
            tlc_ids,
            position,
        })
    }

    pub fn images(&self) -> &[CatalogImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, image_id: ImageId) -> Option<&CatalogImage> {
        self.position.get(&image_id).map(|&i| &self.images[i])
    }

    pub fn product_to_tlc(&self) -> &BTreeMap<ProductId, TlcId> {
        &self.product_to_tlc
    }

    pub fn tlc_of_product(&self, product_id: ProductId) -> Option<TlcId> {
        self.product_to_tlc.get(&product_id).copied()
    }

    pub fn tlc_ids(&self) -> &BTreeSet<TlcId> {
        &self.tlc_ids
    }

    pub fn count(&self, filter: DomainFilter) -> usize {
        self.images.iter().filter(|i| filter.matches(i.domain)).count()
    }

    /// Number of images per product within the given domain filter.
    pub fn product_counts(&self, filter: DomainFilter) -> BTreeMap<ProductId, usize> {
        let mut out = BTreeMap::new();
        for img in self.images.iter().filter(|i| filter.matches(i.domain)) {
            *out.entry(img.product_id).or_insert(0) += 1;
        }
        out
    }

    /// Groups image ids by TLC. Within a partition ids keep catalog order;
    /// TLCs with no matching image are absent from the map.
    pub fn partition_by_tlc(&self, filter: DomainFilter) -> BTreeMap<TlcId, Vec<ImageId>> {
        let mut parts: BTreeMap<TlcId, Vec<ImageId>> = BTreeMap::new();
        for img in self.images.iter().filter(|i| filter.matches(i.domain)) {
            parts.entry(img.tlc_id).or_default().push(img.image_id);
        }
        parts
    }
}

/// Dense vectors of a fixed dimension keyed by image id, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<ImageId>,
    data: Vec<f32>,
    position: BTreeMap<ImageId, usize>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyInput("embedding dimension is zero"));
        }
        Ok(EmbeddingMatrix {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            position: BTreeMap::new(),
        })
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Result<Self> {
        let mut m = Self::new(dim)?;
        m.ids.reserve(rows);
        m.data.reserve(rows * dim);
        Ok(m)
    }

    /// Appends a row. Rejects wrong length, non-finite values and repeated ids.
    pub fn push(&mut self, image_id: ImageId, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                row: self.ids.len(),
                image_id,
            });
        }
        if self.position.insert(image_id, self.ids.len()).is_some() {
            return Err(Error::DuplicateImage(image_id));
        }
        self.ids.push(image_id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ImageId] {
        &self.ids
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, image_id: ImageId) -> Option<&[f32]> {
        self.position.get(&image_id).map(|&i| self.row(i))
    }

    pub fn rows(&self) -> impl Iterator<Item = (ImageId, &[f32])> + '_ {
        self.ids
            .iter()
            .copied()
            .zip(self.data.chunks_exact(self.dim))
    }

    /// Scales every row to unit L2 norm. A zero row cannot be normalized
    /// and is reported as an error.
    pub fn normalize(&mut self) -> Result<()> {
        let dim = self.dim;
        for (row, chunk) in self.data.chunks_exact_mut(dim).enumerate() {
            let n = math::l2_norm(chunk);
            if n == 0.0 {
                return Err(Error::Argument(alloc::format!(
                    "zero vector for image_id {}",
                    self.ids[row]
                )));
            }
            for x in chunk.iter_mut() {
                *x = (*x as f64 / n) as f32;
            }
        }
        Ok(())
    }

    /// New matrix holding the given ids, in the given order.
    pub fn subset(&self, ids: &[ImageId]) -> Result<EmbeddingMatrix> {
        let mut out = EmbeddingMatrix::with_capacity(self.dim, ids.len())?;
        for &id in ids {
            let v = self.get(id).ok_or_else(|| Error::Mismatch {
                missing_embeddings: alloc::vec![id],
                missing_catalog: Vec::new(),
            })?;
            out.push(id, v)?;
        }
        Ok(out)
    }
}

/// Returns a unit-norm copy of `v`, or an error for zero/non-finite input.
pub fn normalized(v: &[f32]) -> Result<Vec<f32>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument("vector has non-finite components".into()));
    }
    let n = math::l2_norm(v);
    if n == 0.0 {
        return Err(Error::Argument("zero vector cannot be normalized".into()));
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCounts {
    pub catalog: usize,
    pub query: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub dim: usize,
    pub catalog_images: usize,
    pub query_images: usize,
    pub products: usize,
    pub per_tlc: BTreeMap<TlcId, DomainCounts>,
}

/// Checks that the catalog and embedding id sets coincide and summarizes
/// counts per TLC and domain.
pub fn validate(catalog: &Catalog, embeddings: &EmbeddingMatrix) -> Result<ValidationSummary> {
    let missing_embeddings: Vec<ImageId> = catalog
        .images()
        .iter()
        .map(|i| i.image_id)
        .filter(|id| embeddings.get(*id).is_none())
        .collect();
    let missing_catalog: Vec<ImageId> = embeddings
        .ids()
        .iter()
        .copied()
        .filter(|id| catalog.get(*id).is_none())
        .collect();
    if !missing_embeddings.is_empty() || !missing_catalog.is_empty() {
        return Err(Error::Mismatch {
            missing_embeddings,
            missing_catalog,
        });
    }
    let mut summary = ValidationSummary {
        dim: embeddings.dim(),
        products: catalog.product_to_tlc().len(),
        ..Default::default()
    };
    for img in catalog.images() {
        let c = summary.per_tlc.entry(img.tlc_id).or_default();
        match img.domain {
            Domain::Catalog => {
                c.catalog += 1;
                summary.catalog_images += 1;
            }
            Domain::Query => {
                c.query += 1;
                summary.query_images += 1;
            }
        }
    }
    Ok(summary)
}
