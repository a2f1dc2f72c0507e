#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use triplet_debias::graph::{AnnotatedEntity, MeasuredEntity, PairEvidence, Relation};
use triplet_debias::{
    estimate_prior, BoundingBox, GroundTruthGraph, MeasurementGraph, PriorConfig, PriorModel, Triplet, TripletCounts,
    Vocabulary,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn vocabulary(n_e: usize, n_r: usize) -> Vocabulary {
    Vocabulary::new((0..n_e).map(|i| format!("e{i}")).collect(), (0..n_r).map(|i| format!("p{i}")).collect()).unwrap()
}

/// Probability vector with roughly `zero_rate` of its entries zeroed and at
/// least one positive entry.
pub fn distribution(rng: &mut impl Rng, n: usize, zero_rate: f64) -> Vec<f64> {
    let mut v: Vec<f64> =
        (0..n).map(|_| if rng.random_bool(zero_rate) { 0.0 } else { rng.random_range(0.01..1.0) }).collect();
    if v.iter().all(|&x| x == 0.0) {
        v[rng.random_range(0..n)] = 1.0;
    }
    let sum: f64 = v.iter().sum();
    v.iter().map(|x| x / sum).collect()
}

/// Sparse random counts with at least one valid triplet.
pub fn counts(rng: &mut impl Rng, n_e: usize, n_r: usize, density: f64) -> TripletCounts {
    let mut c = TripletCounts::new(n_e, n_r);
    for s in 0..n_e {
        for r in 0..n_r {
            for o in 0..n_e {
                if rng.random_bool(density) {
                    c.add_valid(Triplet::new(s, r, o), rng.random_range(1..50));
                }
            }
        }
    }
    if c.total_valid() == 0 {
        c.add_valid(Triplet::new(0, 0, n_e - 1), 1);
    }
    c
}

pub fn prior(rng: &mut impl Rng, n_e: usize, n_r: usize) -> PriorModel<f64> {
    let density = rng.random_range(0.05..0.6);
    estimate_prior(&counts(rng, n_e, n_r, density), &PriorConfig::default()).unwrap()
}

pub fn unit_box(rng: &mut impl Rng) -> BoundingBox<f64> {
    let x = rng.random_range(0.0..100.0);
    let y = rng.random_range(0.0..100.0);
    BoundingBox::new(x, y, x + rng.random_range(1.0..40.0), y + rng.random_range(1.0..40.0)).unwrap()
}

/// Random image with `n_nodes` entities and up to `max_pairs` distinct
/// ordered pairs.
pub fn measurement(
    rng: &mut impl Rng,
    id: &str,
    n_nodes: usize,
    max_pairs: usize,
    n_e: usize,
    n_r: usize,
) -> MeasurementGraph<f64> {
    let entities = (0..n_nodes)
        .map(|_| MeasuredEntity { bbox: unit_box(rng), class_probs: distribution(rng, n_e, 0.3) })
        .collect();
    let mut all: Vec<(usize, usize)> =
        (0..n_nodes).flat_map(|s| (0..n_nodes).map(move |o| (s, o))).filter(|(s, o)| s != o).collect();
    let mut pairs = Vec::new();
    while pairs.len() < max_pairs && !all.is_empty() {
        let (s, o) = all.swap_remove(rng.random_range(0..all.len()));
        pairs.push(PairEvidence { subject_index: s, object_index: o, rel_probs: distribution(rng, n_r, 0.3) });
    }
    MeasurementGraph::new(id, entities, pairs).unwrap()
}

pub fn ground_truth(
    rng: &mut impl Rng,
    id: &str,
    n_nodes: usize,
    n_rels: usize,
    n_e: usize,
    n_r: usize,
) -> GroundTruthGraph<f64> {
    let entities =
        (0..n_nodes).map(|_| AnnotatedEntity { bbox: unit_box(rng), label: rng.random_range(0..n_e) }).collect();
    let relations = (0..n_rels)
        .map(|_| {
            let s = rng.random_range(0..n_nodes);
            let mut o = rng.random_range(0..n_nodes - 1);
            if o >= s {
                o += 1;
            }
            Relation { subject_index: s, object_index: o, rel: rng.random_range(0..n_r) }
        })
        .collect();
    GroundTruthGraph { image_id: id.into(), entities, relations }
}

pub fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.1 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}
