//! Posterior inference in the within-triplet network with soft evidence from
//! a measurement model, and resolution of entity labels shared by several
//! triplets.
//!
//! Soft evidence enters through virtual evidence nodes whose likelihood
//! ratios are `P_m(x) / P(x)`. The prior terms for subject and object cancel,
//! so the unnormalized posterior of a triplet is
//!
//! ```text
//! P_m(s) * P_m(o) * P_m(r) / P(r) * P(r | s, o)
//! ```
//!
//! and the relationship term is evaluated as `P_m(r) * lift(s, o)[r]` with
//! `lift = P(r|s,o) / P(r)` precomputed by the prior. Pairs that fall back to
//! the marginal have a lift of one wherever `P(r) > 0` and zero elsewhere.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::graph::{DebiasedGraph, MeasurementGraph, ScoredTriplet, INPUT_TOLERANCE};
use crate::prior::{PriorModel, Triplet};
use crate::scalar::{argmax, sum_f64, Real};
use crate::{Error, Result};

/// Measurement probabilities for the three nodes of one triplet.
#[derive(Clone, Copy, Debug)]
pub struct TripletEvidence<'a, T> {
    pub subject: &'a [T],
    pub object: &'a [T],
    pub relation: &'a [T],
}

impl<'a, T: Real> TripletEvidence<'a, T> {
    pub fn new(subject: &'a [T], object: &'a [T], relation: &'a [T]) -> Result<Self> {
        for v in [subject, object, relation] {
            if v.iter().any(|p| !p.is_finite() || *p < T::zero()) {
                return Err(Error::NegativeProbability);
            }
            let sum = sum_f64(v);
            if (sum - 1.0).abs() > INPUT_TOLERANCE {
                return Err(Error::Unnormalized { sum });
            }
        }
        Ok(Self { subject, object, relation })
    }

    fn check_against(&self, prior: &PriorModel<T>) -> Result<()> {
        let n_e = prior.n_entities();
        for len in [self.subject.len(), self.object.len()] {
            if len != n_e {
                return Err(Error::DimensionMismatch { expected: n_e, actual: len });
            }
        }
        if self.relation.len() != prior.n_relations() {
            return Err(Error::DimensionMismatch { expected: prior.n_relations(), actual: self.relation.len() });
        }
        Ok(())
    }
}

/// Normalized joint posterior over `(s, r, o)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorTable<T> {
    n_entities: usize,
    n_relations: usize,
    probs: Vec<T>,
    normalizer: T,
}

impl<T: Real> PosteriorTable<T> {
    fn offset(&self, s: usize, r: usize, o: usize) -> usize {
        (s * self.n_relations + r) * self.n_entities + o
    }

    pub fn get(&self, s: usize, r: usize, o: usize) -> T {
        self.probs[self.offset(s, r, o)]
    }

    /// Sum of the unnormalized entries.
    pub fn normalizer(&self) -> T {
        self.normalizer
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    /// Entries in `(s, r, o)` row-major order.
    pub fn as_slice(&self) -> &[T] {
        &self.probs
    }

    /// Marginal over relationships.
    pub fn relation_marginal(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.n_relations];
        for s in 0..self.n_entities {
            for (r, m) in out.iter_mut().enumerate() {
                for o in 0..self.n_entities {
                    *m += self.get(s, r, o);
                }
            }
        }
        out
    }
}

/// Unnormalized posterior of one cell. Every code path that scores a cell
/// goes through here so equal cells compare equal bit for bit.
#[inline]
fn objective<T: Real>(subject_p: T, object_p: T, relation_term: T) -> T {
    subject_p * object_p * relation_term
}

#[inline]
fn relation_term<T: Real>(relation: &[T], lift: Option<&[T]>, p_rel: &[T], r: usize) -> T {
    match lift {
        Some(l) => relation[r] * l[r],
        // the ratio P(r|s,o) / P(r) is 1 on fallback pairs, or 0 when P(r) = 0
        None if p_rel[r] > T::zero() => relation[r],
        None => T::zero(),
    }
}

/// Joint posterior of a triplet's labels given its soft evidence.
pub fn posterior_joint<T: Real>(ev: &TripletEvidence<'_, T>, prior: &PriorModel<T>) -> Result<PosteriorTable<T>> {
    ev.check_against(prior)?;
    let n_e = prior.n_entities();
    let n_r = prior.n_relations();
    let mut probs = vec![T::zero(); n_e * n_r * n_e];
    for s in 0..n_e {
        for o in 0..n_e {
            let lift = prior.lift(s, o);
            for r in 0..n_r {
                probs[(s * n_r + r) * n_e + o] =
                    objective(ev.subject[s], ev.object[o], relation_term(ev.relation, lift, prior.p_rel(), r));
            }
        }
    }
    let normalizer: T = probs.iter().copied().sum();
    if !(normalizer > T::zero()) {
        return Err(Error::IncompatibleEvidence);
    }
    for p in &mut probs {
        *p /= normalizer;
    }
    Ok(PosteriorTable { n_entities: n_e, n_relations: n_r, probs, normalizer })
}

/// MAP labels of one triplet and the unnormalized posterior at the maximum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MapEstimate<T> {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub score: T,
}

impl<T: Real> MapEstimate<T> {
    pub fn triplet(&self) -> Triplet {
        Triplet::new(self.subject, self.relation, self.object)
    }
}

/// Tracks the maximum with lexicographic `(s, r, o)` tie-breaking.
struct Best<T> {
    value: T,
    key: (usize, usize, usize),
    found: bool,
}

impl<T: Real> Best<T> {
    fn new() -> Self {
        Self { value: T::zero(), key: (0, 0, 0), found: false }
    }

    #[inline]
    fn offer(&mut self, value: T, key: (usize, usize, usize)) {
        if !self.found || value > self.value || (value == self.value && key < self.key) {
            self.value = value;
            self.key = key;
            self.found = true;
        }
    }
}

/// Within-triplet MAP inference: the argmax of [`posterior_joint`] without
/// materializing the table. Ties go to the lowest subject, then
/// relationship, then object index.
pub fn wti_map<T: Real>(ev: &TripletEvidence<'_, T>, prior: &PriorModel<T>) -> Result<MapEstimate<T>> {
    ev.check_against(prior)?;
    let n_e = prior.n_entities();
    let n_r = prior.n_relations();

    // On fallback pairs the relation term is P_m(r) itself. Only entries
    // within rounding distance of the largest can win after scaling.
    let p_rel = prior.p_rel();
    let masked: Vec<T> = (0..n_r).map(|r| relation_term(ev.relation, None, p_rel, r)).collect();
    let top = argmax(&masked);
    let cutoff = masked[top] * (T::one() - T::lit(1e-6));
    let contenders: Vec<usize> = (0..n_r).filter(|&r| masked[r] >= cutoff && masked[r] > T::zero()).collect();

    let mut best = Best::new();
    // Fallback cells in decreasing order of P_m(s) * P_m(o), stopping once
    // no remaining cell can reach the incumbent.
    if !contenders.is_empty() {
        let by_mass = |p: &[T]| {
            let mut idx: Vec<usize> = (0..n_e).filter(|&i| p[i] > T::zero()).collect();
            idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(Ordering::Equal));
            idx
        };
        let (subjects, objects) = (by_mass(ev.subject), by_mass(ev.object));
        let m_top = masked[top];
        let Some(&o_top) = objects.first() else { return Err(Error::IncompatibleEvidence) };
        for &s in &subjects {
            let ps = ev.subject[s];
            if best.found && objective(ps, ev.object[o_top], m_top) < best.value {
                break;
            }
            for &o in &objects {
                let po = ev.object[o];
                if best.found && objective(ps, po, m_top) < best.value {
                    break;
                }
                if prior.sparse_lift(s, o).is_none() {
                    for &r in &contenders {
                        best.offer(objective(ps, po, masked[r]), (s, r, o));
                    }
                }
            }
        }
    }

    // Stored cells, skipping rows that cannot reach the incumbent. Cells with
    // a zero ratio score 0 and never beat a positive maximum.
    let rel_max = ev.relation.iter().copied().fold(T::zero(), T::max);
    for ((s, o), rels, lifts, max_lift) in prior.sparse_rows() {
        let (ps, po) = (ev.subject[s], ev.object[o]);
        if ps <= T::zero() || po <= T::zero() || (best.found && objective(ps, po, rel_max * max_lift) < best.value) {
            continue;
        }
        for (&r, &l) in rels.iter().zip(lifts) {
            let r = r as usize;
            best.offer(objective(ps, po, ev.relation[r] * l), (s, r, o));
        }
    }

    if !best.found || !(best.value > T::zero()) {
        return Err(Error::IncompatibleEvidence);
    }
    let (subject, relation, object) = best.key;
    Ok(MapEstimate { subject, relation, object, score: best.value })
}

/// Shannon entropy in nats, `0 ln 0 = 0`, clamped to `[0, ln n]`.
pub fn relationship_entropy<T: Real>(rel_probs: &[T]) -> T {
    let h: T = rel_probs.iter().filter(|&&p| p > T::zero()).map(|&p| -p * p.ln()).sum();
    let ceiling = T::from_usize(rel_probs.len().max(1)).unwrap().ln();
    h.max(T::zero()).min(ceiling)
}

/// Best relationship for fixed subject and object labels, with its
/// relation term `P_m(r) / P(r) * P(r|s,o)`.
fn best_relation<T: Real>(rel_probs: &[T], lift: Option<&[T]>, p_rel: &[T]) -> (usize, T) {
    let mut best = 0;
    let mut best_term = relation_term(rel_probs, lift, p_rel, 0);
    for r in 1..rel_probs.len() {
        let term = relation_term(rel_probs, lift, p_rel, r);
        if term > best_term {
            best = r;
            best_term = term;
        }
    }
    (best, best_term)
}

/// Re-infers a relationship once its subject and object labels are final.
pub fn relationship_update<T: Real>(rel_probs: &[T], s: usize, o: usize, prior: &PriorModel<T>) -> usize {
    best_relation(rel_probs, prior.lift(s, o), prior.p_rel()).0
}

/// Label of entity `entity` that best agrees with its own measurement and
/// with the prior of every refined triplet it takes part in.
///
/// `wti` holds the per-pair MAP labels (`None` for pairs left unrefined).
/// Each candidate label `e` scores
/// `P_m(e) * (sum_{as subject} P(r_t | e, o_t) + sum_{as object} P(r_t | s_t, e))`.
/// An entity outside every refined triplet keeps its measurement argmax.
pub fn object_update<T: Real>(
    entity: usize,
    graph: &MeasurementGraph<T>,
    wti: &[Option<MapEstimate<T>>],
    prior: &PriorModel<T>,
) -> usize {
    let class_probs = &graph.entities[entity].class_probs;
    let n_e = class_probs.len();
    let mut support = vec![T::zero(); n_e];
    let mut connected = false;
    for (pair, estimate) in graph.pairs.iter().zip(wti) {
        let Some(m) = estimate else { continue };
        if pair.subject_index == entity {
            connected = true;
            for (e, acc) in support.iter_mut().enumerate() {
                *acc += prior.conditional(e, m.object)[m.relation];
            }
        }
        if pair.object_index == entity {
            connected = true;
            for (e, acc) in support.iter_mut().enumerate() {
                *acc += prior.conditional(m.subject, e)[m.relation];
            }
        }
    }
    if !connected {
        return argmax(class_probs);
    }
    let scores: Vec<T> = class_probs.iter().zip(&support).map(|(&p, &f)| p * f).collect();
    if scores.iter().all(|&f| f <= T::zero()) {
        return argmax(class_probs);
    }
    argmax(&scores)
}

/// Most frequent MAP label of an entity across its refined triplets.
pub fn mode_update<T: Real>(entity: usize, graph: &MeasurementGraph<T>, wti: &[Option<MapEstimate<T>>]) -> usize {
    let n_e = graph.entities[entity].class_probs.len();
    let mut votes = vec![0usize; n_e];
    let mut connected = false;
    for (pair, estimate) in graph.pairs.iter().zip(wti) {
        let Some(m) = estimate else { continue };
        if pair.subject_index == entity {
            votes[m.subject] += 1;
            connected = true;
        }
        if pair.object_index == entity {
            votes[m.object] += 1;
            connected = true;
        }
    }
    if !connected {
        return argmax(&graph.entities[entity].class_probs);
    }
    let mut best = 0;
    for (e, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = e;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictStrategy {
    /// Object updating followed by relationship updating.
    #[default]
    TwoStep,
    /// Majority vote over the per-triplet MAP labels.
    Mode,
    /// Entities keep their measurement argmax.
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Known labels and boxes: entities are pinned to the evidence.
    #[default]
    Predcls,
    Sgcls,
    Sgdet,
}

macro_rules! text_enum {
    ($ty:ty { $($variant:ident => $text:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),* })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)*
                    other => Err(Error::InvalidConfig(format!(
                        "unknown value {other:?}, expected one of: {}",
                        [$($text),*].join(", ")
                    ))),
                }
            }
        }
    };
}

text_enum!(ConflictStrategy { TwoStep => "two_step", Mode => "mode", None => "none" });
text_enum!(TaskMode { Predcls => "predcls", Sgcls => "sgcls", Sgdet => "sgdet" });

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InferenceConfig<T> {
    /// Pairs whose relationship-measurement entropy (nats) exceeds this are
    /// left at their measurement argmax. `None` refines every pair; `0`
    /// refines none.
    pub entropy_threshold: Option<T>,
    pub conflict: ConflictStrategy,
    pub task: TaskMode,
}

impl<T: Real> InferenceConfig<T> {
    pub fn validate(&self) -> Result<()> {
        match self.entropy_threshold {
            Some(t) if !(t >= T::zero()) => {
                Err(Error::InvalidConfig(format!("entropy threshold must be >= 0, got {t}")))
            }
            _ => Ok(()),
        }
    }

    /// Whether a pair with these relationship probabilities gets refined.
    pub fn refines(&self, rel_probs: &[T]) -> bool {
        match self.entropy_threshold {
            None => true,
            Some(t) => t > T::zero() && relationship_entropy(rel_probs) <= t,
        }
    }

    fn effective_conflict(&self) -> ConflictStrategy {
        match self.task {
            TaskMode::Predcls => ConflictStrategy::None,
            _ => self.conflict,
        }
    }
}

fn sort_ranked<T: Real>(triplets: &mut [ScoredTriplet<T>]) {
    triplets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(a.subject_index.cmp(&b.subject_index))
            .then(a.object_index.cmp(&b.object_index))
    });
}

fn entity_boxes<T: Real>(graph: &MeasurementGraph<T>) -> Vec<crate::graph::BoundingBox<T>> {
    graph.entities.iter().map(|e| e.bbox).collect()
}

/// Scene graph read straight off the measurements: every node at its
/// argmax, scored by the product of the three maxima.
pub fn measurement_baseline<T: Real>(graph: &MeasurementGraph<T>) -> DebiasedGraph<T> {
    let labels = graph.entity_argmax();
    let mut triplets: Vec<ScoredTriplet<T>> = graph
        .pairs
        .iter()
        .map(|p| {
            let (s, o) = (labels[p.subject_index], labels[p.object_index]);
            let r = argmax(&p.rel_probs);
            ScoredTriplet {
                subject_index: p.subject_index,
                object_index: p.object_index,
                subject_label: s,
                object_label: o,
                rel_label: r,
                score: objective(
                    graph.entities[p.subject_index].class_probs[s],
                    graph.entities[p.object_index].class_probs[o],
                    p.rel_probs[r],
                ),
            }
        })
        .collect();
    sort_ranked(&mut triplets);
    DebiasedGraph {
        image_id: graph.image_id.clone(),
        entity_labels: labels,
        entity_boxes: entity_boxes(graph),
        triplets,
    }
}

/// Debiases one image.
///
/// 1. Pairs passing the entropy gate get per-triplet MAP labels; the rest
///    stay at their measurement argmax.
/// 2. Entity labels are made consistent across triplets by the configured
///    strategy (PredCls pins entities to the evidence).
/// 3. Each refined pair re-infers its relationship under the final entity
///    labels and is scored by the unnormalized posterior there; unrefined
///    pairs are scored by their measurement product.
pub fn debias_graph<T: Real>(
    graph: &MeasurementGraph<T>,
    prior: &PriorModel<T>,
    config: &InferenceConfig<T>,
) -> Result<DebiasedGraph<T>> {
    config.validate()?;
    graph.check_dimensions(prior.n_entities(), prior.n_relations())?;

    let refined: Vec<bool> = graph.pairs.iter().map(|p| config.refines(&p.rel_probs)).collect();
    let mut wti = Vec::with_capacity(graph.pairs.len());
    for (pair, &refine) in graph.pairs.iter().zip(&refined) {
        if !refine {
            wti.push(None);
            continue;
        }
        let ev = TripletEvidence {
            subject: &graph.entities[pair.subject_index].class_probs,
            object: &graph.entities[pair.object_index].class_probs,
            relation: &pair.rel_probs,
        };
        wti.push(Some(wti_map(&ev, prior)?));
    }

    let labels: Vec<usize> = match config.effective_conflict() {
        ConflictStrategy::TwoStep => (0..graph.entities.len()).map(|i| object_update(i, graph, &wti, prior)).collect(),
        ConflictStrategy::Mode => (0..graph.entities.len()).map(|i| mode_update(i, graph, &wti)).collect(),
        ConflictStrategy::None => graph.entity_argmax(),
    };

    let mut triplets = Vec::with_capacity(graph.pairs.len());
    for (pair, &refine) in graph.pairs.iter().zip(&refined) {
        let (s, o) = (labels[pair.subject_index], labels[pair.object_index]);
        let (r, term) = if refine {
            best_relation(&pair.rel_probs, prior.lift(s, o), prior.p_rel())
        } else {
            let r = argmax(&pair.rel_probs);
            (r, pair.rel_probs[r])
        };
        triplets.push(ScoredTriplet {
            subject_index: pair.subject_index,
            object_index: pair.object_index,
            subject_label: s,
            object_label: o,
            rel_label: r,
            score: objective(
                graph.entities[pair.subject_index].class_probs[s],
                graph.entities[pair.object_index].class_probs[o],
                term,
            ),
        });
    }
    sort_ranked(&mut triplets);
    Ok(DebiasedGraph {
        image_id: graph.image_id.clone(),
        entity_labels: labels,
        entity_boxes: entity_boxes(graph),
        triplets,
    })
}
