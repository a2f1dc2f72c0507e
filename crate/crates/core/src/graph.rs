//! Domain types shared by every stage: the label vocabulary, bounding boxes,
//! per-image measurement / ground-truth / debiased graphs, and their
//! line-delimited JSON encoding.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Read, Write};
use std::marker::PhantomData;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scalar::{argmax, normalize_distribution, Real};
use crate::{Error, Result};

/// Tolerance for probability vectors read from measurement files.
pub const INPUT_TOLERANCE: f64 = 1e-6;

/// Fixed index maps for entity (object) and relationship (predicate) labels.
///
/// Subjects and objects share one entity vocabulary. Indices follow file order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    objects: Vec<String>,
    predicates: Vec<String>,
    object_index: HashMap<String, usize>,
    predicate_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyDocument {
    objects: Vec<String>,
    predicates: Vec<String>,
}

impl Vocabulary {
    pub fn new(objects: Vec<String>, predicates: Vec<String>) -> Result<Self> {
        let object_index = index_labels(&objects, "object")?;
        let predicate_index = index_labels(&predicates, "predicate")?;
        Ok(Self { objects, predicates, object_index, predicate_index })
    }

    pub fn num_entities(&self) -> usize {
        self.objects.len()
    }

    pub fn num_relations(&self) -> usize {
        self.predicates.len()
    }

    pub fn object_id(&self, label: &str) -> Option<usize> {
        self.object_index.get(label).copied()
    }

    pub fn predicate_id(&self, label: &str) -> Option<usize> {
        self.predicate_index.get(label).copied()
    }

    pub fn object_label(&self, index: usize) -> &str {
        &self.objects[index]
    }

    pub fn predicate_label(&self, index: usize) -> &str {
        &self.predicates[index]
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }

    /// Hex SHA-256 over both label lists; stored in prior files so a prior
    /// is never applied to data indexed by a different vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for label in &self.objects {
            hasher.update(label.as_bytes());
            hasher.update([0u8]);
        }
        hasher.update([1u8]);
        for label in &self.predicates {
            hasher.update(label.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let doc = VocabularyDocument { objects: self.objects.clone(), predicates: self.predicates.clone() };
        serde_json::to_writer_pretty(writer, &doc)?;
        Ok(())
    }
}

fn index_labels(labels: &[String], kind: &'static str) -> Result<HashMap<String, usize>> {
    if labels.is_empty() {
        return Err(Error::EmptyLabels(kind));
    }
    let mut index = HashMap::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        if index.insert(label.clone(), i).is_some() {
            return Err(Error::DuplicateLabel { kind, label: label.clone() });
        }
    }
    Ok(index)
}

/// Reads a vocabulary document: a JSON object with ordered `objects` and
/// `predicates` arrays.
pub fn load_vocabulary<R: Read>(source: R) -> Result<Vocabulary> {
    let doc: VocabularyDocument = serde_json::from_reader(source)?;
    Vocabulary::new(doc.objects, doc.predicates)
}

/// Axis-aligned box in pixel coordinates with `x2 > x1` and `y2 > y1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxRecord<T>", into = "BoxRecord<T>", bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct BoundingBox<T> {
    x1: T,
    y1: T,
    x2: T,
    y2: T,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
struct BoxRecord<T> {
    x1: T,
    y1: T,
    x2: T,
    y2: T,
}

impl<T: Real> TryFrom<BoxRecord<T>> for BoundingBox<T> {
    type Error = Error;

    fn try_from(r: BoxRecord<T>) -> Result<Self> {
        BoundingBox::new(r.x1, r.y1, r.x2, r.y2)
    }
}

impl<T: Real> From<BoundingBox<T>> for BoxRecord<T> {
    fn from(b: BoundingBox<T>) -> Self {
        BoxRecord { x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2 }
    }
}

impl<T: Real> BoundingBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidBox { x1: x1.as_f64(), y1: y1.as_f64(), x2: x2.as_f64(), y2: y2.as_f64() });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> T {
        self.x1
    }

    pub fn y1(&self) -> T {
        self.y1
    }

    pub fn x2(&self) -> T {
        self.x2
    }

    pub fn y2(&self) -> T {
        self.y2
    }

    pub fn area(&self) -> T {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou<T: Real>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(T::zero());
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(T::zero());
    let inter = w * h;
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.area() + b.area() - inter;
    (inter / union).min(T::one())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MeasuredEntity<T> {
    #[serde(rename = "box")]
    pub bbox: BoundingBox<T>,
    pub class_probs: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PairEvidence<T> {
    pub subject_index: usize,
    pub object_index: usize,
    pub rel_probs: Vec<T>,
}

/// Soft evidence for one image as produced by the upstream measurement model.
///
/// In PredCls mode the entity `class_probs` are one-hot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MeasurementGraph<T> {
    pub image_id: String,
    pub entities: Vec<MeasuredEntity<T>>,
    pub pairs: Vec<PairEvidence<T>>,
}

impl<T: Real> MeasurementGraph<T> {
    pub fn new(
        image_id: impl Into<String>,
        entities: Vec<MeasuredEntity<T>>,
        pairs: Vec<PairEvidence<T>>,
    ) -> Result<Self> {
        let mut graph = Self { image_id: image_id.into(), entities, pairs };
        graph.validate()?;
        Ok(graph)
    }

    /// Checks every invariant and renormalizes vectors that are within
    /// tolerance of summing to one.
    pub fn validate(&mut self) -> Result<()> {
        let mut n_e = None;
        for entity in &mut self.entities {
            normalize_distribution(&mut entity.class_probs, INPUT_TOLERANCE)?;
            check_len(&mut n_e, entity.class_probs.len())?;
        }
        let mut n_r = None;
        let mut seen = HashSet::with_capacity(self.pairs.len());
        for pair in &mut self.pairs {
            let (s, o) = (pair.subject_index, pair.object_index);
            if s >= self.entities.len() || o >= self.entities.len() {
                return Err(Error::InvalidGraph(format!(
                    "image {}: pair ({s}, {o}) references a missing entity",
                    self.image_id
                )));
            }
            if s == o {
                return Err(Error::InvalidGraph(format!(
                    "image {}: pair ({s}, {o}) relates an entity to itself",
                    self.image_id
                )));
            }
            if !seen.insert((s, o)) {
                return Err(Error::InvalidGraph(format!("image {}: duplicate pair ({s}, {o})", self.image_id)));
            }
            normalize_distribution(&mut pair.rel_probs, INPUT_TOLERANCE)?;
            check_len(&mut n_r, pair.rel_probs.len())?;
        }
        Ok(())
    }

    pub fn check_dimensions(&self, n_entities: usize, n_relations: usize) -> Result<()> {
        for entity in &self.entities {
            expect_len(n_entities, entity.class_probs.len())?;
        }
        for pair in &self.pairs {
            expect_len(n_relations, pair.rel_probs.len())?;
        }
        Ok(())
    }

    /// Measurement argmax label of every entity.
    pub fn entity_argmax(&self) -> Vec<usize> {
        self.entities.iter().map(|e| argmax(&e.class_probs)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AnnotatedEntity<T> {
    #[serde(rename = "box")]
    pub bbox: BoundingBox<T>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub subject_index: usize,
    pub object_index: usize,
    pub rel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct GroundTruthGraph<T> {
    pub image_id: String,
    pub entities: Vec<AnnotatedEntity<T>>,
    pub relations: Vec<Relation>,
}

impl<T: Real> GroundTruthGraph<T> {
    pub fn validate(&mut self) -> Result<()> {
        for rel in &self.relations {
            if rel.subject_index >= self.entities.len() || rel.object_index >= self.entities.len() {
                return Err(Error::InvalidGraph(format!(
                    "image {}: relation ({}, {}) references a missing entity",
                    self.image_id, rel.subject_index, rel.object_index
                )));
            }
        }
        Ok(())
    }

    pub fn check_dimensions(&self, n_entities: usize, n_relations: usize) -> Result<()> {
        for entity in &self.entities {
            if entity.label >= n_entities {
                return Err(Error::InvalidGraph(format!(
                    "image {}: entity label {} out of range",
                    self.image_id, entity.label
                )));
            }
        }
        for rel in &self.relations {
            if rel.rel >= n_relations {
                return Err(Error::InvalidGraph(format!(
                    "image {}: relationship index {} out of range",
                    self.image_id, rel.rel
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ScoredTriplet<T> {
    pub subject_index: usize,
    pub object_index: usize,
    pub subject_label: usize,
    pub object_label: usize,
    pub rel_label: usize,
    pub score: T,
}

/// Final labels for one image. Boxes are carried through from the
/// measurement graph because recall matching needs them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DebiasedGraph<T> {
    pub image_id: String,
    pub entity_labels: Vec<usize>,
    pub entity_boxes: Vec<BoundingBox<T>>,
    pub triplets: Vec<ScoredTriplet<T>>,
}

impl<T: Real> DebiasedGraph<T> {
    pub fn validate(&mut self) -> Result<()> {
        if self.entity_labels.len() != self.entity_boxes.len() {
            return Err(Error::InvalidGraph(format!(
                "image {}: {} labels for {} boxes",
                self.image_id,
                self.entity_labels.len(),
                self.entity_boxes.len()
            )));
        }
        let mut seen = HashSet::with_capacity(self.triplets.len());
        for t in &self.triplets {
            let consistent = self.entity_labels.get(t.subject_index) == Some(&t.subject_label)
                && self.entity_labels.get(t.object_index) == Some(&t.object_label);
            if !consistent {
                return Err(Error::InvalidGraph(format!(
                    "image {}: triplet ({}, {}) disagrees with entity labels",
                    self.image_id, t.subject_index, t.object_index
                )));
            }
            if !(t.score >= T::zero()) {
                return Err(Error::InvalidGraph(format!("image {}: negative triplet score", self.image_id)));
            }
            if !seen.insert((t.subject_index, t.object_index)) {
                return Err(Error::InvalidGraph(format!(
                    "image {}: more than one triplet for pair ({}, {})",
                    self.image_id, t.subject_index, t.object_index
                )));
            }
        }
        Ok(())
    }
}

fn check_len(expected: &mut Option<usize>, actual: usize) -> Result<()> {
    match *expected {
        None => {
            *expected = Some(actual);
            Ok(())
        }
        Some(n) => expect_len(n, actual),
    }
}

fn expect_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// A record type stored one JSON object per line.
pub trait Record: Sized + DeserializeOwned + Serialize {
    fn validate_record(&mut self) -> Result<()>;
}

impl<T: Real> Record for MeasurementGraph<T> {
    fn validate_record(&mut self) -> Result<()> {
        self.validate()
    }
}

impl<T: Real> Record for GroundTruthGraph<T> {
    fn validate_record(&mut self) -> Result<()> {
        self.validate()
    }
}

impl<T: Real> Record for DebiasedGraph<T> {
    fn validate_record(&mut self) -> Result<()> {
        self.validate()
    }
}

/// Streaming reader over line-delimited records. Blank lines are skipped;
/// errors carry the 1-based line number.
pub struct RecordReader<R, V> {
    lines: std::io::Lines<R>,
    line: usize,
    _record: PhantomData<V>,
}

impl<R: BufRead, V: Record> RecordReader<R, V> {
    pub fn new(reader: R) -> Self {
        Self { lines: reader.lines(), line: 0, _record: PhantomData }
    }
}

impl<R: BufRead, V: Record> Iterator for RecordReader<R, V> {
    type Item = Result<V>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = self.lines.next()?;
            self.line += 1;
            let text = match text {
                Ok(t) => t,
                Err(e) => return Some(Err(Error::Io(e).at_line(self.line))),
            };
            if text.trim().is_empty() {
                continue;
            }
            let parsed =
                serde_json::from_str::<V>(&text).map_err(Error::from).and_then(|mut v| v.validate_record().map(|_| v));
            return Some(parsed.map_err(|e| e.at_line(self.line)));
        }
    }
}

pub fn read_measurements<T: Real, R: BufRead>(reader: R) -> RecordReader<R, MeasurementGraph<T>> {
    RecordReader::new(reader)
}

pub fn read_ground_truth<T: Real, R: BufRead>(reader: R) -> RecordReader<R, GroundTruthGraph<T>> {
    RecordReader::new(reader)
}

pub fn read_debiased<T: Real, R: BufRead>(reader: R) -> RecordReader<R, DebiasedGraph<T>> {
    RecordReader::new(reader)
}

pub fn load_measurements<T: Real, R: BufRead>(reader: R) -> Result<Vec<MeasurementGraph<T>>> {
    read_measurements(reader).collect()
}

pub fn load_ground_truth<T: Real, R: BufRead>(reader: R) -> Result<Vec<GroundTruthGraph<T>>> {
    read_ground_truth(reader).collect()
}

/// Writes one record as a single JSON line.
pub fn write_record<W: Write, V: Serialize>(mut writer: W, record: &V) -> Result<()> {
    serde_json::to_writer(&mut writer, record)?;
    writer.write_all(b"\n")?;
    Ok(())
}
