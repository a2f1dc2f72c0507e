//! Within-triplet prior: `P(S)`, `P(O)`, `P(R|S,O)` and the implied marginal
//! `P(R)`, learned by maximum likelihood from triplet counts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::graph::Vocabulary;
use crate::scalar::{sum_f64, Real};
use crate::{Error, Result, FORMAT_VERSION};

/// An in-vocabulary `(subject, relationship, object)` index triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

impl Triplet {
    pub fn new(subject: usize, relation: usize, object: usize) -> Self {
        Self { subject, relation, object }
    }
}

/// A triplet whose relationship text is outside the predicate vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InvalidTriplet {
    pub subject: usize,
    pub object: usize,
    pub relation: String,
}

/// Sparse triplet counts, split into in-vocabulary and out-of-vocabulary
/// relationship tables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletCounts {
    n_entities: usize,
    n_relations: usize,
    valid: BTreeMap<Triplet, u64>,
    invalid: BTreeMap<InvalidTriplet, u64>,
}

impl TripletCounts {
    pub fn new(n_entities: usize, n_relations: usize) -> Self {
        Self { n_entities, n_relations, valid: BTreeMap::new(), invalid: BTreeMap::new() }
    }

    pub fn for_vocabulary(vocab: &Vocabulary) -> Self {
        Self::new(vocab.num_entities(), vocab.num_relations())
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    /// Adds `count` occurrences of a labelled triplet, routing it to the valid
    /// or invalid table depending on whether `r_text` is a known predicate.
    pub fn add_labelled(
        &mut self,
        vocab: &Vocabulary,
        s_label: &str,
        r_text: &str,
        o_label: &str,
        count: u64,
    ) -> Result<()> {
        let s = vocab.object_id(s_label).ok_or_else(|| Error::UnknownLabel(s_label.into()))?;
        let o = vocab.object_id(o_label).ok_or_else(|| Error::UnknownLabel(o_label.into()))?;
        match vocab.predicate_id(r_text) {
            Some(r) => self.add_valid(Triplet::new(s, r, o), count),
            None => self.add_invalid(s, r_text, o, count),
        }
        Ok(())
    }

    pub fn add_valid(&mut self, triplet: Triplet, count: u64) {
        assert!(triplet.subject < self.n_entities && triplet.object < self.n_entities);
        assert!(triplet.relation < self.n_relations);
        *self.valid.entry(triplet).or_insert(0) += count;
    }

    pub fn add_invalid(&mut self, subject: usize, relation: &str, object: usize, count: u64) {
        assert!(subject < self.n_entities && object < self.n_entities);
        let key = InvalidTriplet { subject, object, relation: relation.to_string() };
        *self.invalid.entry(key).or_insert(0) += count;
    }

    pub fn valid(&self) -> &BTreeMap<Triplet, u64> {
        &self.valid
    }

    pub fn invalid(&self) -> &BTreeMap<InvalidTriplet, u64> {
        &self.invalid
    }

    pub fn get(&self, triplet: &Triplet) -> u64 {
        self.valid.get(triplet).copied().unwrap_or(0)
    }

    pub fn total_valid(&self) -> u64 {
        self.valid.values().sum()
    }

    pub fn total_invalid(&self) -> u64 {
        self.invalid.values().sum()
    }

    /// Number of distinct `(subject, object)` pairs with a positive valid count.
    pub fn distinct_pairs(&self) -> usize {
        self.valid.iter().filter(|(_, &c)| c > 0).map(|(t, _)| (t.subject, t.object)).collect::<BTreeSet<_>>().len()
    }

    /// Copy with the valid table replaced; the invalid table is kept as is.
    pub(crate) fn with_valid(&self, valid: BTreeMap<Triplet, u64>) -> Self {
        Self { valid, ..self.clone() }
    }

    /// Reads a counts file: one `subject<TAB>relationship<TAB>object<TAB>count`
    /// record per line. Blank lines and `#` comments are skipped; repeated
    /// triplets accumulate.
    pub fn read<R: BufRead>(reader: R, vocab: &Vocabulary) -> Result<Self> {
        let mut counts = Self::for_vocabulary(vocab);
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::Io(e).at_line(line_no))?;
            let trimmed = line.trim_end_matches(['\r', '\n']);
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::InvalidCounts(format!("expected 4 tab-separated fields, found {}", fields.len()))
                    .at_line(line_no));
            }
            let count: u64 = fields[3]
                .trim()
                .parse()
                .map_err(|_| Error::InvalidCounts(format!("bad count {:?}", fields[3])).at_line(line_no))?;
            counts.add_labelled(vocab, fields[0], fields[1], fields[2], count).map_err(|e| e.at_line(line_no))?;
        }
        Ok(counts)
    }

    /// Writes valid records (index order) followed by invalid ones.
    pub fn write<W: Write>(&self, mut writer: W, vocab: &Vocabulary) -> Result<()> {
        for (t, c) in &self.valid {
            writeln!(
                writer,
                "{}\t{}\t{}\t{}",
                vocab.object_label(t.subject),
                vocab.predicate_label(t.relation),
                vocab.object_label(t.object),
                c
            )?;
        }
        for (t, c) in &self.invalid {
            writeln!(
                writer,
                "{}\t{}\t{}\t{}",
                vocab.object_label(t.subject),
                t.relation,
                vocab.object_label(t.object),
                c
            )?;
        }
        Ok(())
    }
}

/// Counts `(subject label, relationship text, object label)` annotations.
pub fn accumulate_counts<'a, I>(annotations: I, vocab: &Vocabulary) -> Result<TripletCounts>
where
    I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
{
    let mut counts = TripletCounts::for_vocabulary(vocab);
    for (s, r, o) in annotations {
        counts.add_labelled(vocab, s, r, o, 1)?;
    }
    Ok(counts)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PriorConfig {
    /// Added to every cell of each stored `(s, o)` row before normalizing.
    pub smoothing: f64,
}

/// Learned within-triplet Bayesian network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorModel<T> {
    n_entities: usize,
    n_relations: usize,
    p_subject: Vec<T>,
    p_object: Vec<T>,
    p_rel: Vec<T>,
    pairs: Vec<(usize, usize)>,
    // row-major, one row of n_relations per entry of `pairs`
    cond: Vec<T>,
    // cond[r] / p_rel[r], or 0 where p_rel[r] == 0
    lift: Vec<T>,
    // nonzero entries of each lift row: row i spans nz_start[i]..nz_start[i + 1]
    nz_start: Vec<usize>,
    nz_rel: Vec<u32>,
    nz_lift: Vec<T>,
    // largest lift of each row
    max_lift: Vec<T>,
    row_of: Vec<u32>,
    seen: BTreeSet<Triplet>,
    vocabulary_hash: Option<String>,
}

const NO_ROW: u32 = u32::MAX;

impl<T: Real> PriorModel<T> {
    /// Builds a model from explicit parameters, validating every distribution.
    ///
    /// `p_rel` is taken as given, so hand-built models need not satisfy the
    /// marginalization identity that [`estimate_prior`] produces.
    pub fn from_parts(
        p_subject: Vec<T>,
        p_object: Vec<T>,
        p_rel: Vec<T>,
        rows: Vec<((usize, usize), Vec<T>)>,
        seen: BTreeSet<Triplet>,
    ) -> Result<Self> {
        let n_entities = p_subject.len();
        let n_relations = p_rel.len();
        if n_entities == 0 || n_relations == 0 {
            return Err(Error::InvalidPrior("empty distribution".into()));
        }
        if p_object.len() != n_entities {
            return Err(Error::DimensionMismatch { expected: n_entities, actual: p_object.len() });
        }
        check_distribution(&p_subject, "p_subject")?;
        check_distribution(&p_object, "p_object")?;
        check_distribution(&p_rel, "p_rel")?;

        let mut rows = rows;
        rows.sort_by_key(|(pair, _)| *pair);
        let mut row_of = vec![NO_ROW; n_entities * n_entities];
        let mut pairs = Vec::with_capacity(rows.len());
        let mut cond = Vec::with_capacity(rows.len() * n_relations);
        let mut lift = Vec::with_capacity(rows.len() * n_relations);
        let mut nz_start = vec![0];
        let mut nz_rel = Vec::new();
        let mut nz_lift = Vec::new();
        let mut max_lift = Vec::new();
        for ((s, o), row) in rows {
            if s >= n_entities || o >= n_entities {
                return Err(Error::InvalidPrior(format!("row ({s}, {o}) out of range")));
            }
            if row.len() != n_relations {
                return Err(Error::DimensionMismatch { expected: n_relations, actual: row.len() });
            }
            check_distribution(&row, "conditional row")?;
            let slot = &mut row_of[s * n_entities + o];
            if *slot != NO_ROW {
                return Err(Error::InvalidPrior(format!("duplicate row ({s}, {o})")));
            }
            *slot = pairs.len() as u32;
            let pair_mass = p_subject[s] * p_object[o];
            for (r, &c) in row.iter().enumerate() {
                if p_rel[r] > T::zero() {
                    lift.push(c / p_rel[r]);
                } else if c > T::zero() && pair_mass > T::zero() {
                    return Err(Error::InvalidPrior(format!(
                        "row ({s}, {o}) puts mass on relationship {r} but its marginal is 0"
                    )));
                } else {
                    lift.push(T::zero());
                }
            }
            for (r, &l) in lift[lift.len() - n_relations..].iter().enumerate() {
                if l > T::zero() {
                    nz_rel.push(r as u32);
                    nz_lift.push(l);
                }
            }
            max_lift.push(nz_lift[nz_start[nz_start.len() - 1]..].iter().copied().fold(T::zero(), T::max));
            nz_start.push(nz_rel.len());
            pairs.push((s, o));
            cond.extend(row);
        }
        for t in &seen {
            if t.subject >= n_entities || t.object >= n_entities || t.relation >= n_relations {
                return Err(Error::InvalidPrior("seen triplet out of range".into()));
            }
        }
        Ok(Self {
            n_entities,
            n_relations,
            p_subject,
            p_object,
            p_rel,
            pairs,
            cond,
            lift,
            nz_start,
            nz_rel,
            nz_lift,
            max_lift,
            row_of,
            seen,
            vocabulary_hash: None,
        })
    }

    pub fn with_vocabulary_hash(mut self, hash: impl Into<String>) -> Self {
        self.vocabulary_hash = Some(hash.into());
        self
    }

    pub fn vocabulary_hash(&self) -> Option<&str> {
        self.vocabulary_hash.as_deref()
    }

    /// Fails if the model was learned against a different vocabulary.
    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        let actual = vocab.fingerprint();
        match &self.vocabulary_hash {
            Some(h) if *h != actual => Err(Error::VocabularyMismatch { prior: h.clone(), vocabulary: actual }),
            _ if vocab.num_entities() != self.n_entities || vocab.num_relations() != self.n_relations => {
                Err(Error::VocabularyMismatch {
                    prior: self.vocabulary_hash.clone().unwrap_or_default(),
                    vocabulary: actual,
                })
            }
            _ => Ok(()),
        }
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    pub fn p_subject(&self) -> &[T] {
        &self.p_subject
    }

    pub fn p_object(&self) -> &[T] {
        &self.p_object
    }

    pub fn p_rel(&self) -> &[T] {
        &self.p_rel
    }

    fn row_index(&self, s: usize, o: usize) -> Option<usize> {
        match self.row_of[s * self.n_entities + o] {
            NO_ROW => None,
            i => Some(i as usize),
        }
    }

    /// The stored MLE row for a pair seen in training.
    pub fn stored_row(&self, s: usize, o: usize) -> Option<&[T]> {
        let n = self.n_relations;
        self.row_index(s, o).map(|i| &self.cond[i * n..(i + 1) * n])
    }

    /// `P(R | S=s, O=o)`; pairs never seen in training fall back to `P(R)`.
    pub fn conditional(&self, s: usize, o: usize) -> &[T] {
        self.stored_row(s, o).unwrap_or(&self.p_rel)
    }

    /// `P(R | s, o) / P(R)` per relationship, or `None` for fallback pairs
    /// where the ratio is one wherever `P(R) > 0`.
    pub fn lift(&self, s: usize, o: usize) -> Option<&[T]> {
        let n = self.n_relations;
        self.row_index(s, o).map(|i| &self.lift[i * n..(i + 1) * n])
    }

    /// Positive entries of [`lift`](Self::lift) as parallel
    /// `(relationship, ratio)` slices.
    pub fn sparse_lift(&self, s: usize, o: usize) -> Option<(&[u32], &[T])> {
        self.row_index(s, o).map(|i| {
            let span = self.nz_start[i]..self.nz_start[i + 1];
            (&self.nz_rel[span.clone()], &self.nz_lift[span])
        })
    }

    /// [`sparse_lift`](Self::sparse_lift) for every stored pair in index
    /// order, with the largest lift of the row.
    pub fn sparse_rows(&self) -> impl Iterator<Item = ((usize, usize), &[u32], &[T], T)> + '_ {
        self.pairs.iter().enumerate().map(|(i, &pair)| {
            let span = self.nz_start[i]..self.nz_start[i + 1];
            (pair, &self.nz_rel[span.clone()], &self.nz_lift[span], self.max_lift[i])
        })
    }

    /// Stored `(s, o)` pairs with their rows, in index order.
    pub fn rows(&self) -> impl Iterator<Item = ((usize, usize), &[T])> + '_ {
        self.pairs.iter().copied().zip(self.cond.chunks(self.n_relations))
    }

    pub fn num_rows(&self) -> usize {
        self.pairs.len()
    }

    pub fn seen_triplets(&self) -> &BTreeSet<Triplet> {
        &self.seen
    }

    pub fn is_seen(&self, triplet: &Triplet) -> bool {
        self.seen.contains(triplet)
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let doc = PriorDocument {
            format_version: FORMAT_VERSION,
            vocabulary_hash: self.vocabulary_hash.clone(),
            n_entities: self.n_entities,
            n_relations: self.n_relations,
            p_subject: self.p_subject.clone(),
            p_object: self.p_object.clone(),
            p_rel: self.p_rel.clone(),
            cond: self.rows().map(|((s, o), row)| CondRow { s, o, row: row.to_vec() }).collect(),
            seen_triplets: self.seen.iter().map(|t| [t.subject, t.relation, t.object]).collect(),
        };
        serde_json::to_writer(writer, &doc)?;
        Ok(())
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let doc: PriorDocument<T> = serde_json::from_reader(reader)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::InvalidPrior(format!("unsupported format version {}", doc.format_version)));
        }
        if doc.p_subject.len() != doc.n_entities || doc.p_rel.len() != doc.n_relations {
            return Err(Error::InvalidPrior("declared sizes disagree with vectors".into()));
        }
        let rows = doc.cond.into_iter().map(|r| ((r.s, r.o), r.row)).collect();
        let seen = doc.seen_triplets.into_iter().map(|[s, r, o]| Triplet::new(s, r, o)).collect();
        let model = Self::from_parts(doc.p_subject, doc.p_object, doc.p_rel, rows, seen)?;
        Ok(match doc.vocabulary_hash {
            Some(h) => model.with_vocabulary_hash(h),
            None => model,
        })
    }
}

fn check_distribution<T: Real>(values: &[T], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite() || *v < T::zero()) {
        return Err(Error::InvalidPrior(format!("{what} has negative or non-finite entries")));
    }
    let sum = sum_f64(values);
    if (sum - 1.0).abs() > T::NORMALIZATION_TOLERANCE {
        return Err(Error::InvalidPrior(format!("{what} sums to {sum}")));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct PriorDocument<T> {
    format_version: u32,
    vocabulary_hash: Option<String>,
    n_entities: usize,
    n_relations: usize,
    p_subject: Vec<T>,
    p_object: Vec<T>,
    p_rel: Vec<T>,
    cond: Vec<CondRow<T>>,
    seen_triplets: Vec<[usize; 3]>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct CondRow<T> {
    s: usize,
    o: usize,
    row: Vec<T>,
}

/// Maximum-likelihood estimate of the within-triplet prior.
///
/// `P(R|s,o)` is the relative frequency of each relationship among the
/// triplets of pair `(s, o)`; `P(S)` and `P(O)` are the relative frequencies
/// of each entity in the subject and object slots. The marginal is
/// `P(R) = sum_{s,o} P(R|s,o) P(s) P(o)` over the full grid, where unseen
/// pairs contribute through the fallback row `P(R)` itself. That fixed point
/// has the closed form `P(R) = sum_seen P(R|s,o) P(s) P(o) / sum_seen P(s) P(o)`.
pub fn estimate_prior<T: Real>(counts: &TripletCounts, config: &PriorConfig) -> Result<PriorModel<T>> {
    if !(config.smoothing >= 0.0) || !config.smoothing.is_finite() {
        return Err(Error::InvalidConfig(format!("smoothing must be >= 0, got {}", config.smoothing)));
    }
    let n_e = counts.n_entities();
    let n_r = counts.n_relations();
    let total = counts.total_valid();
    if total == 0 {
        return Err(Error::NoTrainingTriplets);
    }

    let mut subject_counts = vec![0u64; n_e];
    let mut object_counts = vec![0u64; n_e];
    let mut pair_counts: BTreeMap<(usize, usize), Vec<u64>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (t, &c) in counts.valid() {
        if c == 0 {
            continue;
        }
        subject_counts[t.subject] += c;
        object_counts[t.object] += c;
        pair_counts.entry((t.subject, t.object)).or_insert_with(|| vec![0; n_r])[t.relation] += c;
        seen.insert(*t);
    }

    let total_t = T::from_u64(total).expect("count fits scalar");
    let p_subject: Vec<T> = subject_counts.iter().map(|&c| T::from_u64(c).unwrap() / total_t).collect();
    let p_object: Vec<T> = object_counts.iter().map(|&c| T::from_u64(c).unwrap() / total_t).collect();

    let k = T::lit(config.smoothing);
    let mut rows = Vec::with_capacity(pair_counts.len());
    let mut marginal = vec![T::zero(); n_r];
    for ((s, o), cells) in pair_counts {
        let row_total = T::from_u64(cells.iter().sum()).unwrap() + k * T::from_usize(n_r).unwrap();
        let row: Vec<T> = cells.iter().map(|&c| (T::from_u64(c).unwrap() + k) / row_total).collect();
        let weight = p_subject[s] * p_object[o];
        for (m, &p) in marginal.iter_mut().zip(&row) {
            *m += weight * p;
        }
        rows.push(((s, o), row));
    }
    let mass: T = marginal.iter().copied().sum();
    let p_rel: Vec<T> = marginal.into_iter().map(|m| m / mass).collect();

    PriorModel::from_parts(p_subject, p_object, p_rel, rows, seen)
}
