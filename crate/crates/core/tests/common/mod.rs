//! Independent reference implementations used as test oracles. Nothing
//! here calls into the index or metric code under test.
#![allow(dead_code)]

use cbir_core::catalog::{Catalog, Domain, EmbeddingMatrix};
use cbir_core::router::SoftmaxRouter;
use cbir_core::vecindex::SearchResult;

/// Sequential f64 inner product.
pub fn dot_seq(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

/// Scores everything, full sort, take k.
pub fn brute_force(rows: &[(u64, &[f32])], q: &[f32], k: usize) -> Vec<SearchResult> {
    let mut all: Vec<SearchResult> = rows
        .iter()
        .map(|(id, v)| SearchResult {
            image_id: *id,
            score: dot_seq(q, v),
        })
        .collect();
    all.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.image_id.cmp(&b.image_id))
    });
    all.truncate(k);
    all
}

/// Catalog-domain rows of a dataset, in catalog order.
pub fn gallery<'a>(catalog: &Catalog, emb: &'a EmbeddingMatrix) -> Vec<(u64, &'a [f32])> {
    catalog
        .images()
        .iter()
        .filter(|i| i.domain == Domain::Catalog)
        .map(|i| (i.image_id, emb.get(i.image_id).unwrap()))
        .collect()
}

/// Fixed-seed xorshift stream for test inputs.
pub struct TestRng(pub u64);

impl TestRng {
    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn gauss(&mut self) -> f64 {
        let u1 = self.unit().max(1e-300);
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn unit_vector(&mut self, dim: usize) -> Vec<f32> {
        let v: Vec<f64> = (0..dim).map(|_| self.gauss()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| (x / n) as f32).collect()
    }
}

/// Independent metric evaluator: recomputes relevance by scanning the
/// catalog for every retrieved id.
pub struct BruteMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map10: f64,
    pub mrr: f64,
}

pub fn brute_metrics(catalog: &Catalog, lists: &[(u64, Vec<u64>)]) -> BruteMetrics {
    let product_of = |id: u64| {
        catalog
            .images()
            .iter()
            .find(|i| i.image_id == id && i.domain == Domain::Catalog)
            .map(|i| i.product_id)
    };
    let n = lists.len() as f64;
    let (mut r1, mut r5, mut r10, mut map, mut mrr) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (truth, list) in lists {
        let rel: Vec<bool> = list
            .iter()
            .take(10)
            .map(|&id| product_of(id) == Some(*truth))
            .collect();
        let total = catalog
            .images()
            .iter()
            .filter(|i| i.domain == Domain::Catalog && i.product_id == *truth)
            .count();
        if rel.iter().take(1).any(|&b| b) {
            r1 += 1.0;
        }
        if rel.iter().take(5).any(|&b| b) {
            r5 += 1.0;
        }
        if rel.iter().any(|&b| b) {
            r10 += 1.0;
        }
        if let Some(p) = rel.iter().position(|&b| b) {
            mrr += 1.0 / (p + 1) as f64;
        }
        let mut ap = 0.0;
        for i in 0..rel.len() {
            if rel[i] {
                let prec = rel[..=i].iter().filter(|&&b| b).count() as f64 / (i + 1) as f64;
                ap += prec;
            }
        }
        map += ap / total.min(10) as f64;
    }
    BruteMetrics {
        r1: r1 / n,
        r5: r5 / n,
        r10: r10 / n,
        map10: map / n,
        mrr: mrr / n,
    }
}

/// Objective recomputed from scratch: mean −log softmax + (λ/2)‖W‖².
fn objective(r: &SoftmaxRouter, rows: &[Vec<f32>], labels: &[u32], lambda: f64) -> f64 {
    let c = r.class_labels.len();
    let d = r.dim;
    let mut total = 0.0;
    for (x, y) in rows.iter().zip(labels) {
        let logits: Vec<f64> = (0..c)
            .map(|k| r.bias[k] + (0..d).map(|j| r.weights[k * d + j] * x[j] as f64).sum::<f64>())
            .collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let yi = r.class_labels.iter().position(|l| l == y).unwrap();
        total += lse - logits[yi];
    }
    let reg: f64 = r.weights.iter().map(|w| w * w).sum();
    total / rows.len() as f64 + 0.5 * lambda * reg
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Max relative error between analytic and central-difference gradients.
pub fn gradient_check(seed: u64, classes: usize, lambda: f64, samples: Option<usize>) -> f64 {
    let mut rng = TestRng(seed);
    let dim = 6;
    let mut r = SoftmaxRouter::zeros((0..classes as u32).map(|c| c * 3 + 1).collect(), dim).unwrap();
    for w in r.weights.iter_mut() {
        *w = rng.gauss() * 0.7;
    }
    for b in r.bias.iter_mut() {
        *b = rng.gauss() * 0.3;
    }
    let n = samples.unwrap_or(1 + (rng.next_u64() % 5) as usize);
    let rows: Vec<Vec<f32>> = (0..n).map(|_| rng.unit_vector(dim)).collect();
    let labels: Vec<u32> = (0..n)
        .map(|_| r.class_labels[(rng.next_u64() % classes as u64) as usize])
        .collect();
    let refs: Vec<&[f32]> = rows.iter().map(|v| v.as_slice()).collect();
    let lg = r.loss_and_grad(&refs, &labels, lambda).unwrap();
    assert!(rel_err(lg.loss, objective(&r, &rows, &labels, lambda)) < 1e-12);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..r.weights.len() {
        let mut p = r.clone();
        p.weights[i] += h;
        let mut m = r.clone();
        m.weights[i] -= h;
        let fd = (objective(&p, &rows, &labels, lambda) - objective(&m, &rows, &labels, lambda)) / (2.0 * h);
        worst = worst.max(rel_err(lg.grad_weights[i], fd));
    }
    for i in 0..r.bias.len() {
        let mut p = r.clone();
        p.bias[i] += h;
        let mut m = r.clone();
        m.bias[i] -= h;
        let fd = (objective(&p, &rows, &labels, lambda) - objective(&m, &rows, &labels, lambda)) / (2.0 * h);
        worst = worst.max(rel_err(lg.grad_bias[i], fd));
    }
    worst
}
