//! Graph-constrained recall metrics: R@K, mR@K and their zero-shot variants.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::graph::{iou, BoundingBox, DebiasedGraph, GroundTruthGraph, ScoredTriplet};
use crate::prior::Triplet;
use crate::scalar::Real;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Cut-offs, ascending.
    pub ks: Vec<usize>,
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![50, 100], iou_threshold: 0.5 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() {
            return Err(Error::InvalidConfig("K list is empty".into()));
        }
        if self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "K list must be positive and strictly ascending, got {:?}",
                self.ks
            )));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::InvalidConfig(format!("IoU threshold must lie in [0, 1], got {}", self.iou_threshold)));
        }
        Ok(())
    }
}

/// Keeps the first, i.e. highest-ranked, triplet of every ordered
/// `(subject_index, object_index)` pair. Input must be sorted by descending
/// score.
pub fn apply_graph_constraint<T: Clone>(ranked: &[ScoredTriplet<T>]) -> Vec<ScoredTriplet<T>> {
    let mut seen = HashSet::with_capacity(ranked.len());
    ranked.iter().filter(|t| seen.insert((t.subject_index, t.object_index))).cloned().collect()
}

/// Rank of the prediction that consumed each GT relation, or `None`.
///
/// Predictions are visited in rank order; each takes the first unmatched GT
/// relation with identical labels whose subject and object boxes both reach
/// the IoU threshold. Because matching is greedy, the result restricted to
/// ranks below K equals matching only the top K.
fn match_ranks<T: Real>(
    ranked: &[ScoredTriplet<T>],
    boxes: &[BoundingBox<T>],
    gt: &GroundTruthGraph<T>,
    iou_threshold: f64,
) -> Vec<Option<usize>> {
    let mut matched = vec![None; gt.relations.len()];
    for (rank, p) in ranked.iter().enumerate() {
        let (pb_s, pb_o) = (&boxes[p.subject_index], &boxes[p.object_index]);
        for (g, slot) in gt.relations.iter().zip(matched.iter_mut()) {
            if slot.is_some() || g.rel != p.rel_label {
                continue;
            }
            let (gs, go) = (&gt.entities[g.subject_index], &gt.entities[g.object_index]);
            if gs.label != p.subject_label || go.label != p.object_label {
                continue;
            }
            if iou(pb_s, &gs.bbox).as_f64() >= iou_threshold && iou(pb_o, &go.bbox).as_f64() >= iou_threshold {
                *slot = Some(rank);
                break;
            }
        }
    }
    matched
}

/// Which GT relations are recovered by `predictions`, taken as the top-K
/// triplets in rank order.
pub fn match_triplets<T: Real>(
    predictions: &[ScoredTriplet<T>],
    boxes: &[BoundingBox<T>],
    gt: &GroundTruthGraph<T>,
    iou_threshold: f64,
) -> Vec<bool> {
    match_ranks(predictions, boxes, gt, iou_threshold).iter().map(Option::is_some).collect()
}

/// Recall figures at one cut-off. `None` marks quantities without any GT
/// to measure against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub k: usize,
    pub recall: Option<f64>,
    pub mean_recall: Option<f64>,
    pub per_predicate: Vec<Option<f64>>,
    pub zero_shot_recall: Option<f64>,
    pub zero_shot_mean_recall: Option<f64>,
    pub zero_shot_per_predicate: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub image_count: usize,
    pub iou_threshold: f64,
    /// Whether zero-shot figures were computed.
    pub zero_shot: bool,
    pub results: Vec<RecallAtK>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&RecallAtK> {
        self.results.iter().find(|r| r.k == k)
    }

    pub fn to_json_writer<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    /// Aligned plain-text table, one row per K.
    pub fn to_table(&self) -> String {
        let mut header = vec!["K", "R@K", "mR@K"];
        if self.zero_shot {
            header.extend(["zsR@K", "zs-mR@K"]);
        }
        let mut rows = vec![header.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
        for r in &self.results {
            let mut row = vec![r.k.to_string(), fmt_opt(r.recall), fmt_opt(r.mean_recall)];
            if self.zero_shot {
                row.extend([fmt_opt(r.zero_shot_recall), fmt_opt(r.zero_shot_mean_recall)]);
            }
            rows.push(row);
        }
        let widths: Vec<usize> =
            (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = format!("images: {}\n", self.image_count);
        for row in rows {
            let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            let _ = writeln!(out, "{}", cells.join("  "));
        }
        out
    }

    /// One row per predicate, one `R@K` column per K; undefined cells are
    /// left empty.
    pub fn write_per_predicate_csv<W: Write>(&self, mut writer: W, labels: &[String]) -> Result<()> {
        let mut header = vec!["predicate".to_string()];
        header.extend(self.results.iter().map(|r| format!("R@{}", r.k)));
        if self.zero_shot {
            header.extend(self.results.iter().map(|r| format!("zsR@{}", r.k)));
        }
        writeln!(writer, "{}", header.join(","))?;
        let n = self.results.first().map_or(0, |r| r.per_predicate.len());
        for p in 0..n {
            let mut row = vec![csv_field(labels.get(p).map_or(&p.to_string(), |s| s))];
            let cell = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
            row.extend(self.results.iter().map(|r| cell(r.per_predicate[p])));
            if self.zero_shot {
                row.extend(self.results.iter().map(|r| cell(r.zero_shot_per_predicate[p])));
            }
            writeln!(writer, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Running sum of per-image ratios.
#[derive(Clone, Debug, Default)]
struct MacroMean {
    sum: f64,
    n: usize,
}

impl MacroMean {
    fn add(&mut self, hits: usize, total: usize) {
        if total > 0 {
            self.sum += hits as f64 / total as f64;
            self.n += 1;
        }
    }

    fn value(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

#[derive(Clone, Debug)]
struct Tally {
    overall: MacroMean,
    per_predicate: Vec<MacroMean>,
}

impl Tally {
    fn new(n_relations: usize) -> Self {
        Self { overall: MacroMean::default(), per_predicate: vec![MacroMean::default(); n_relations] }
    }

    /// `hits[i]` says whether GT relation `i` was matched; only relations
    /// with `include[i]` count.
    fn add(&mut self, rels: &[usize], hits: &[bool], include: &[bool]) {
        let mut total = 0;
        let mut found = 0;
        let mut per = HashMap::<usize, (usize, usize)>::new();
        for ((&r, &hit), &inc) in rels.iter().zip(hits).zip(include) {
            if !inc {
                continue;
            }
            total += 1;
            found += hit as usize;
            let e = per.entry(r).or_default();
            e.0 += hit as usize;
            e.1 += 1;
        }
        self.overall.add(found, total);
        for (r, (h, t)) in per {
            self.per_predicate[r].add(h, t);
        }
    }

    fn per_predicate(&self) -> Vec<Option<f64>> {
        self.per_predicate.iter().map(MacroMean::value).collect()
    }
}

/// Arithmetic mean of the defined entries.
pub fn mean_of_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Accumulates metrics image by image, so predictions can be streamed.
#[derive(Clone, Debug)]
pub struct Evaluator<'a> {
    config: EvalConfig,
    n_relations: usize,
    seen: Option<&'a BTreeSet<Triplet>>,
    images: usize,
    all: Vec<Tally>,
    zero_shot: Vec<Tally>,
}

impl<'a> Evaluator<'a> {
    /// `seen` enables the zero-shot figures: GT relations whose label
    /// combination is in the set are left out of them.
    pub fn new(n_relations: usize, config: EvalConfig, seen: Option<&'a BTreeSet<Triplet>>) -> Result<Self> {
        config.validate()?;
        let k = config.ks.len();
        Ok(Self {
            config,
            n_relations,
            seen,
            images: 0,
            all: vec![Tally::new(n_relations); k],
            zero_shot: vec![Tally::new(n_relations); k],
        })
    }

    pub fn add_image<T: Real>(&mut self, pred: &DebiasedGraph<T>, gt: &GroundTruthGraph<T>) -> Result<()> {
        if pred.image_id != gt.image_id {
            return Err(Error::UnmatchedImages(vec![pred.image_id.clone(), gt.image_id.clone()]));
        }
        for t in &pred.triplets {
            if t.subject_index >= pred.entity_boxes.len() || t.object_index >= pred.entity_boxes.len() {
                return Err(Error::InvalidGraph(format!(
                    "image {}: triplet ({}, {}) references a missing box",
                    pred.image_id, t.subject_index, t.object_index
                )));
            }
            if t.rel_label >= self.n_relations {
                return Err(Error::DimensionMismatch { expected: self.n_relations, actual: t.rel_label + 1 });
            }
        }
        let rels: Vec<usize> = gt.relations.iter().map(|r| r.rel).collect();
        if let Some(&r) = rels.iter().find(|&&r| r >= self.n_relations) {
            return Err(Error::DimensionMismatch { expected: self.n_relations, actual: r + 1 });
        }

        let ranked = apply_graph_constraint(&pred.triplets);
        let k_max = *self.config.ks.last().unwrap();
        let top = &ranked[..ranked.len().min(k_max)];
        let ranks = match_ranks(top, &pred.entity_boxes, gt, self.config.iou_threshold);

        let everything = vec![true; rels.len()];
        let unseen: Vec<bool> = match self.seen {
            Some(seen) => gt
                .relations
                .iter()
                .map(|r| {
                    let t = Triplet::new(gt.entities[r.subject_index].label, r.rel, gt.entities[r.object_index].label);
                    !seen.contains(&t)
                })
                .collect(),
            None => vec![false; rels.len()],
        };
        for (i, &k) in self.config.ks.iter().enumerate() {
            let hits: Vec<bool> = ranks.iter().map(|r| r.is_some_and(|r| r < k)).collect();
            self.all[i].add(&rels, &hits, &everything);
            self.zero_shot[i].add(&rels, &hits, &unseen);
        }
        self.images += 1;
        Ok(())
    }

    pub fn finish(self) -> EvalReport {
        let zero_shot = self.seen.is_some();
        let results = self
            .config
            .ks
            .iter()
            .zip(self.all.iter().zip(&self.zero_shot))
            .map(|(&k, (all, zs))| {
                let per_predicate = all.per_predicate();
                let zero_shot_per_predicate = zs.per_predicate();
                RecallAtK {
                    k,
                    recall: all.overall.value(),
                    mean_recall: mean_of_defined(&per_predicate),
                    per_predicate,
                    zero_shot_recall: zs.overall.value(),
                    zero_shot_mean_recall: mean_of_defined(&zero_shot_per_predicate),
                    zero_shot_per_predicate,
                }
            })
            .collect();
        EvalReport { image_count: self.images, iou_threshold: self.config.iou_threshold, zero_shot, results }
    }
}

/// Evaluates predictions against ground truth, pairing images by id.
/// Images are reduced in ground-truth order.
pub fn evaluate<T: Real>(
    predictions: &[DebiasedGraph<T>],
    gts: &[GroundTruthGraph<T>],
    n_relations: usize,
    seen: Option<&BTreeSet<Triplet>>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let mut by_id = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_id.insert(p.image_id.as_str(), p).is_some() {
            return Err(Error::InvalidGraph(format!("duplicate prediction for image {}", p.image_id)));
        }
    }
    let mut gt_ids = HashSet::with_capacity(gts.len());
    let mut unmatched = Vec::new();
    for g in gts {
        if !gt_ids.insert(g.image_id.as_str()) {
            return Err(Error::InvalidGraph(format!("duplicate ground truth for image {}", g.image_id)));
        }
        if !by_id.contains_key(g.image_id.as_str()) {
            unmatched.push(g.image_id.clone());
        }
    }
    unmatched.extend(predictions.iter().filter(|p| !gt_ids.contains(p.image_id.as_str())).map(|p| p.image_id.clone()));
    if !unmatched.is_empty() {
        return Err(Error::UnmatchedImages(unmatched));
    }

    let mut evaluator = Evaluator::new(n_relations, config.clone(), seen)?;
    for g in gts {
        evaluator.add_image(by_id[g.image_id.as_str()], g)?;
    }
    Ok(evaluator.finish())
}
