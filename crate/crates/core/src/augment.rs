//! Count augmentation from out-of-vocabulary triplets that lie close to a
//! valid triplet in sentence-embedding space.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::graph::Vocabulary;
use crate::prior::{Triplet, TripletCounts};
use crate::scalar::Real;
use crate::{Error, Result};

/// Tolerance on the Euclidean norm of stored embedding vectors.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Text used to look a triplet up in the embedding table: lowercase words
/// separated by single spaces, with underscores read as spaces.
///
/// The embedding exporter renders triplets with the same rule.
pub fn render_triplet(subject: &str, relation: &str, object: &str) -> String {
    [subject, relation, object]
        .iter()
        .flat_map(|part| part.split(|c: char| c == '_' || c.is_whitespace()))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Unit-norm sentence embeddings keyed by rendered triplet text.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    dim: usize,
    vectors: HashMap<String, Vec<T>>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingHeader {
    dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct EmbeddingRecord<T> {
    text: String,
    vector: Vec<T>,
}

impl<T: Real> EmbeddingTable<T> {
    pub fn new(dim: usize) -> Self {
        Self { dim, vectors: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, text: impl Into<String>, vector: Vec<T>) -> Result<()> {
        let text = text.into();
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: vector.len() });
        }
        let norm = vector.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidEmbedding(format!("\"{text}\" has norm {norm}")));
        }
        if self.vectors.contains_key(&text) {
            return Err(Error::InvalidEmbedding(format!("duplicate text \"{text}\"")));
        }
        self.vectors.insert(text, vector);
        Ok(())
    }

    pub fn get(&self, text: &str) -> Result<&[T]> {
        self.vectors.get(text).map(Vec::as_slice).ok_or_else(|| Error::MissingEmbedding(text.to_string()))
    }

    /// Reads the line-delimited embedding file: a `{"dim": D}` header record
    /// followed by `{"text": ..., "vector": [...]}` records.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut table: Option<Self> = None;
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::Io(e).at_line(line_no))?;
            if line.trim().is_empty() {
                continue;
            }
            let step = match table.as_mut() {
                None => serde_json::from_str::<EmbeddingHeader>(&line)
                    .map(|h| table = Some(Self::new(h.dim)))
                    .map_err(Error::from),
                Some(t) => serde_json::from_str::<EmbeddingRecord<T>>(&line)
                    .map_err(Error::from)
                    .and_then(|r| t.insert(r.text, r.vector)),
            };
            step.map_err(|e| e.at_line(line_no))?;
        }
        table.ok_or_else(|| Error::InvalidEmbedding("missing header record".into()))
    }

    /// Writes the table in the file format accepted by [`EmbeddingTable::read`],
    /// records sorted by text.
    pub fn write<W: Write>(&self, mut writer: W) -> Result<()> {
        crate::graph::write_record(&mut writer, &EmbeddingHeader { dim: self.dim })?;
        let mut texts: Vec<&String> = self.vectors.keys().collect();
        texts.sort();
        for text in texts {
            let record = EmbeddingRecord { text: text.clone(), vector: self.vectors[text].clone() };
            crate::graph::write_record(&mut writer, &record)?;
        }
        Ok(())
    }
}

/// `1 - <u, v>` for unit vectors, clamped to `[0, 2]`.
pub fn cosine_distance<T: Real>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), actual: v.len() });
    }
    let dot: T = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    Ok((T::one() - dot).max(T::zero()).min(T::lit(2.0)))
}

/// Indices of `candidates` whose embedding lies strictly within `eps` of the
/// anchor's embedding.
pub fn epsilon_neighborhood<T: Real, S: AsRef<str>>(
    anchor: &str,
    candidates: &[S],
    table: &EmbeddingTable<T>,
    eps: T,
) -> Result<Vec<usize>> {
    let center = table.get(anchor)?;
    let mut inside = Vec::new();
    for (i, text) in candidates.iter().enumerate() {
        if cosine_distance(center, table.get(text.as_ref())?)? < eps {
            inside.push(i);
        }
    }
    Ok(inside)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationConfig<T> {
    /// Cosine-distance radius of the neighborhood.
    pub epsilon: T,
    /// Credit each out-of-vocabulary triplet only to its nearest valid
    /// triplet instead of every valid triplet whose ball contains it.
    pub nearest_only: bool,
}

impl<T: Real> Default for AugmentationConfig<T> {
    fn default() -> Self {
        Self { epsilon: T::lit(0.05), nearest_only: false }
    }
}

/// Adds the counts of out-of-vocabulary triplets to every valid triplet of
/// the same `(subject, object)` pair whose embedding neighborhood contains
/// them. Invalid counts are carried through unchanged.
pub fn augment_counts<T: Real>(
    counts: &TripletCounts,
    vocab: &Vocabulary,
    table: &EmbeddingTable<T>,
    config: &AugmentationConfig<T>,
) -> Result<TripletCounts> {
    if !(config.epsilon >= T::zero()) {
        return Err(Error::InvalidConfig(format!("epsilon must be >= 0, got {}", config.epsilon)));
    }
    let mut by_pair: BTreeMap<(usize, usize), Vec<(String, u64)>> = BTreeMap::new();
    for (t, &c) in counts.invalid() {
        let text = render_triplet(vocab.object_label(t.subject), &t.relation, vocab.object_label(t.object));
        by_pair.entry((t.subject, t.object)).or_default().push((text, c));
    }
    let mut valid_by_pair: BTreeMap<(usize, usize), Vec<Triplet>> = BTreeMap::new();
    for t in counts.valid().keys() {
        valid_by_pair.entry((t.subject, t.object)).or_default().push(*t);
    }

    let mut augmented = counts.valid().clone();
    for (pair, valid) in &valid_by_pair {
        let Some(candidates) = by_pair.get(pair) else { continue };
        let candidate_vectors = candidates.iter().map(|(text, _)| table.get(text)).collect::<Result<Vec<_>>>()?;
        // distances[v][c]: valid triplet v to candidate c
        let mut distances = Vec::with_capacity(valid.len());
        for t in valid {
            let anchor = render_triplet(
                vocab.object_label(t.subject),
                vocab.predicate_label(t.relation),
                vocab.object_label(t.object),
            );
            let center = table.get(&anchor)?;
            let row = candidate_vectors.iter().map(|v| cosine_distance(center, v)).collect::<Result<Vec<T>>>()?;
            distances.push(row);
        }
        for (c, (_, count)) in candidates.iter().enumerate() {
            if config.nearest_only {
                let mut best = 0;
                for v in 1..valid.len() {
                    if distances[v][c] < distances[best][c] {
                        best = v;
                    }
                }
                if distances[best][c] < config.epsilon {
                    *augmented.get_mut(&valid[best]).unwrap() += count;
                }
            } else {
                for (v, t) in valid.iter().enumerate() {
                    if distances[v][c] < config.epsilon {
                        *augmented.get_mut(t).unwrap() += count;
                    }
                }
            }
        }
    }
    Ok(counts.with_valid(augmented))
}
