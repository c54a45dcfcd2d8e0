mod common;

use std::collections::{BTreeMap, BTreeSet};

use cbir_core::catalog::{validate, Catalog, CatalogImage, Domain, DomainFilter};
use cbir_core::synthgen::{generate, SynthConfig};
use common::{dot_seq, TestRng};
use proptest::prelude::*;

fn random_catalog(seed: u64, n: usize) -> Catalog {
    let mut rng = TestRng(seed | 1);
    let images = (0..n as u64)
        .map(|i| {
            let product_id = rng.next_u64() % 40;
            CatalogImage {
                image_id: i * 3 + 1,
                product_id,
                tlc_id: (product_id % 7) as u32,
                domain: if rng.unit() < 0.7 { Domain::Catalog } else { Domain::Query },
            }
        })
        .collect();
    Catalog::new(images).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn partitions_cover_filtered_images_once(seed in any::<u64>(), n in 0usize..300) {
        let c = random_catalog(seed, n);
        for filter in [DomainFilter::Only(Domain::Catalog), DomainFilter::Only(Domain::Query), DomainFilter::Any] {
            let parts = c.partition_by_tlc(filter);
            let total: usize = parts.values().map(|v| v.len()).sum();
            prop_assert_eq!(total, c.count(filter));
            let mut seen = BTreeSet::new();
            for (tlc, ids) in &parts {
                prop_assert!(!ids.is_empty());
                for id in ids {
                    prop_assert!(seen.insert(*id));
                    prop_assert_eq!(c.get(*id).unwrap().tlc_id, *tlc);
                }
                // catalog order within a partition
                prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}

#[test]
fn reference_dataset_shape() {
    let ds = generate(&SynthConfig::reference()).unwrap();

    // independent group-by over raw records
    let mut per_tlc: BTreeMap<u32, usize> = BTreeMap::new();
    let mut products = BTreeSet::new();
    let (mut n_cat, mut n_query) = (0, 0);
    for img in ds.catalog.images() {
        products.insert(img.product_id);
        match img.domain {
            Domain::Catalog => {
                n_cat += 1;
                *per_tlc.entry(img.tlc_id).or_default() += 1;
            }
            Domain::Query => n_query += 1,
        }
    }
    assert_eq!((n_cat, n_query), (32_000, 9_600));
    assert_eq!(products.len(), 3_200);
    assert_eq!(per_tlc.len(), 32);
    assert!(per_tlc.values().all(|&c| c == 1_000));

    let parts = ds.catalog.partition_by_tlc(DomainFilter::Only(Domain::Catalog));
    assert!(parts.len() >= 30);
    for (tlc, ids) in &parts {
        assert_eq!(ids.len(), per_tlc[tlc]);
    }

    let summary = validate(&ds.catalog, &ds.embeddings).unwrap();
    assert_eq!(summary.catalog_images, 32_000);
    assert_eq!(summary.query_images, 9_600);

    for (_, v) in ds.embeddings.rows() {
        let n = dot_seq(v, v).sqrt();
        assert!((n - 1.0).abs() <= 1e-5);
    }
    assert_eq!(ds.confuser_products.len(), 32 * 5);
    for t in 0..32u64 {
        assert_eq!(ds.confuser_products.iter().filter(|&&p| p / 100 == t).count(), 5);
    }
    assert_eq!(ds.ground_truth.len(), 9_600);
    for (qid, gt) in &ds.ground_truth {
        let img = ds.catalog.get(*qid).unwrap();
        assert_eq!(img.domain, Domain::Query);
        assert_eq!(ds.catalog.tlc_of_product(gt.product_id), Some(gt.tlc_id));
    }
}

/// Exact recall@1 by exhaustive argmax over the gallery.
fn brute_recall_at_1(cfg: &SynthConfig, query_stride: usize) -> f64 {
    let ds = generate(cfg).unwrap();
    let gallery: Vec<(u64, &[f32])> = common::gallery(&ds.catalog, &ds.embeddings);
    let mut hits = 0;
    let mut n = 0;
    for (qid, gt) in ds.ground_truth.iter().step_by(query_stride) {
        let q = ds.embeddings.get(*qid).unwrap();
        let mut best = (f64::MIN, 0u64);
        for (id, v) in &gallery {
            let s = dot_seq(q, v);
            if s > best.0 {
                best = (s, *id);
            }
        }
        if ds.catalog.get(best.1).unwrap().product_id == gt.product_id {
            hits += 1;
        }
        n += 1;
    }
    hits as f64 / n as f64
}

#[test]
fn easy_regime_recall_is_high() {
    let cfg = SynthConfig {
        domain_shift: 0.0,
        confuser_fraction: 0.0,
        ..SynthConfig::reference()
    };
    let r = brute_recall_at_1(&cfg, 2);
    assert!(r > 0.95, "recall@1 {r}");
}

#[test]
fn domain_shift_hurts_on_average() {
    let small = SynthConfig {
        num_tlcs: 8,
        products_per_tlc: 40,
        ..SynthConfig::reference()
    };
    let mut shifted = 0.0;
    let mut clean = 0.0;
    for seed in 0..5 {
        shifted += brute_recall_at_1(&SynthConfig { seed, ..small.clone() }, 1);
        clean += brute_recall_at_1(
            &SynthConfig {
                seed,
                domain_shift: 0.0,
                ..small.clone()
            },
            1,
        );
    }
    assert!(shifted / 5.0 < clean / 5.0, "{shifted} vs {clean}");
}
