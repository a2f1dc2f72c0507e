#![allow(dead_code)]

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde::Serialize;
use triplet_debias::graph::write_record;
use triplet_debias::{TripletCounts, Vocabulary};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_triplet-debias"))
}

/// Runs the binary, returning the exit code and captured output.
pub fn run(args: &[&str]) -> (i32, String, String) {
    let Output { status, stdout, stderr } = bin().args(args).output().unwrap();
    (status.code().unwrap(), String::from_utf8(stdout).unwrap(), String::from_utf8(stderr).unwrap())
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn write_vocab(dir: &Path, vocab: &Vocabulary) -> PathBuf {
    let path = dir.join("vocab.json");
    vocab.to_writer(File::create(&path).unwrap()).unwrap();
    path
}

pub fn write_counts(dir: &Path, name: &str, counts: &TripletCounts, vocab: &Vocabulary) -> PathBuf {
    let path = dir.join(name);
    counts.write(BufWriter::new(File::create(&path).unwrap()), vocab).unwrap();
    path
}

pub fn write_jsonl<V: Serialize>(dir: &Path, name: &str, records: &[V]) -> PathBuf {
    let path = dir.join(name);
    let mut w = BufWriter::new(File::create(&path).unwrap());
    for r in records {
        write_record(&mut w, r).unwrap();
    }
    path
}

pub mod random {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use triplet_debias::graph::{AnnotatedEntity, MeasuredEntity, PairEvidence, Relation};
    use triplet_debias::{BoundingBox, GroundTruthGraph, MeasurementGraph, Triplet, TripletCounts};

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn distribution(rng: &mut impl Rng, n: usize, zero_rate: f64) -> Vec<f64> {
        let mut v: Vec<f64> =
            (0..n).map(|_| if rng.random_bool(zero_rate) { 0.0 } else { rng.random_range(0.01..1.0) }).collect();
        if v.iter().all(|&x| x == 0.0) {
            v[rng.random_range(0..n)] = 1.0;
        }
        let sum: f64 = v.iter().sum();
        v.iter().map(|x| x / sum).collect()
    }

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

    pub fn bbox(rng: &mut impl Rng) -> BoundingBox<f64> {
        let x = rng.random_range(0.0..100.0);
        let y = rng.random_range(0.0..100.0);
        BoundingBox::new(x, y, x + rng.random_range(1.0..40.0), y + rng.random_range(1.0..40.0)).unwrap()
    }

    pub fn measurement(
        rng: &mut impl Rng,
        id: &str,
        n_nodes: usize,
        n_pairs: usize,
        n_e: usize,
        n_r: usize,
        zero_rate: f64,
    ) -> MeasurementGraph<f64> {
        let entities = (0..n_nodes)
            .map(|_| MeasuredEntity { bbox: bbox(rng), class_probs: distribution(rng, n_e, zero_rate) })
            .collect();
        let mut all: Vec<(usize, usize)> =
            (0..n_nodes).flat_map(|s| (0..n_nodes).map(move |o| (s, o))).filter(|(s, o)| s != o).collect();
        let mut pairs = Vec::new();
        while pairs.len() < n_pairs && !all.is_empty() {
            let (s, o) = all.swap_remove(rng.random_range(0..all.len()));
            pairs.push(PairEvidence {
                subject_index: s,
                object_index: o,
                rel_probs: distribution(rng, n_r, zero_rate),
            });
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
            (0..n_nodes).map(|_| AnnotatedEntity { bbox: bbox(rng), label: rng.random_range(0..n_e) }).collect();
        let relations = (0..n_rels)
            .map(|_| {
                let s = rng.random_range(0..n_nodes);
                let o = (s + rng.random_range(1..n_nodes)) % n_nodes;
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
}
