//! Query normalization and pairwise matching with a trained encoder.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{join_concept_ids, ConceptDictionary, ConceptIds, PairRecord};
use crate::encoder::{EmbeddingMatrix, EncoderHandle};
use crate::error::{Error, Result};
use crate::graph::{similarity_row, top_k_indices};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub dict_index: usize,
    pub surface: String,
    pub concept_ids: ConceptIds,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub query: String,
    pub ranked: Vec<RankedEntry>,
}

impl Normalization {
    pub fn top1(&self) -> Option<&RankedEntry> {
        self.ranked.first()
    }
}

/// `query \t rank \t dict_surface \t concept_ids \t weight`, ranks from 1.
pub fn normalizations_to_tsv(results: &[Normalization]) -> String {
    let mut out = String::new();
    for result in results {
        for (rank, entry) in result.ranked.iter().enumerate() {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                result.query,
                rank + 1,
                entry.surface,
                join_concept_ids(&entry.concept_ids),
                entry.weight
            )
            .expect("write to string");
        }
    }
    out
}

pub const INDEX_EMBEDDINGS: &str = "dict_embeddings.bin";
pub const INDEX_STAMP: &str = "dict_embeddings.fingerprint";

/// Dictionary embeddings computed once for a fixed set of encoder parameters.
#[derive(Debug, Clone)]
pub struct DictionaryIndex {
    dictionary: ConceptDictionary,
    embeddings: EmbeddingMatrix,
    fingerprint: String,
}

impl DictionaryIndex {
    pub fn build(dict: &ConceptDictionary, encoder: &EncoderHandle) -> Result<Self> {
        if dict.is_empty() {
            return Err(Error::Argument("dictionary is empty".into()));
        }
        Ok(Self {
            embeddings: encoder.encode(&dict.surfaces())?,
            fingerprint: dict.fingerprint(),
            dictionary: dict.clone(),
        })
    }

    pub fn dictionary(&self) -> &ConceptDictionary {
        &self.dictionary
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Writes the embeddings plus a stamp tying them to the dictionary text and parameters.
    pub fn persist(&self, dir: &Path, parameter_checksum: &str) -> Result<()> {
        self.embeddings
            .write_binary_exact(&dir.join(INDEX_EMBEDDINGS))?;
        let stamp = dir.join(INDEX_STAMP);
        std::fs::write(
            &stamp,
            format!("{}\t{}\n", self.fingerprint, parameter_checksum),
        )
        .map_err(|e| Error::io(&stamp, e))
    }

    /// Loads persisted embeddings when their stamp matches, otherwise re-embeds and persists.
    pub fn load_or_build(
        dir: &Path,
        dict: &ConceptDictionary,
        encoder: &EncoderHandle,
        parameter_checksum: &str,
    ) -> Result<Self> {
        let expected = format!("{}\t{}", dict.fingerprint(), parameter_checksum);
        let stamp = std::fs::read_to_string(dir.join(INDEX_STAMP)).unwrap_or_default();
        if stamp.trim_end() == expected {
            let embeddings = EmbeddingMatrix::read_binary_exact(&dir.join(INDEX_EMBEDDINGS))?;
            if embeddings.len() == dict.len() && embeddings.dim() == encoder.dim() {
                return Ok(Self {
                    dictionary: dict.clone(),
                    embeddings,
                    fingerprint: dict.fingerprint(),
                });
            }
        }
        log::info!(
            "dictionary embeddings missing or stale; re-embedding {} entries",
            dict.len()
        );
        let index = Self::build(dict, encoder)?;
        index.persist(dir, parameter_checksum)?;
        Ok(index)
    }

    fn rank(
        &self,
        query: &str,
        embedding: ndarray::ArrayView1<'_, f64>,
        k: usize,
    ) -> Result<Normalization> {
        let row = similarity_row(embedding, &self.embeddings)?;
        let ranked = top_k_indices(&row.weights, k)
            .into_iter()
            .map(|i| {
                let entry = &self.dictionary.entries()[i];
                RankedEntry {
                    dict_index: i,
                    surface: entry.surface.clone(),
                    concept_ids: entry.concept_ids.clone(),
                    weight: row.weights[i],
                }
            })
            .collect();
        Ok(Normalization {
            query: query.to_owned(),
            ranked,
        })
    }

    pub fn normalize(
        &self,
        query: &str,
        encoder: &EncoderHandle,
        k: usize,
    ) -> Result<Normalization> {
        Ok(self.normalize_batch(&[query], encoder, k)?.remove(0))
    }

    pub fn normalize_batch<S: AsRef<str> + Sync>(
        &self,
        queries: &[S],
        encoder: &EncoderHandle,
        k: usize,
    ) -> Result<Vec<Normalization>> {
        if k < 1 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        if let Some(i) = queries.iter().position(|q| q.as_ref().is_empty()) {
            return Err(Error::Argument(format!("query {i} is empty")));
        }
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let embeddings = encoder.encode(queries)?;
        (0..queries.len())
            .into_par_iter()
            .map(|i| self.rank(queries[i].as_ref(), embeddings.row(i), k))
            .collect()
    }
}

/// Ranked dictionary entries for one query; embeds the dictionary on every call.
pub fn normalize(
    query: &str,
    dict: &ConceptDictionary,
    encoder: &EncoderHandle,
    k: usize,
) -> Result<Normalization> {
    if query.is_empty() {
        return Err(Error::Argument("query is empty".into()));
    }
    DictionaryIndex::build(dict, encoder)?.normalize(query, encoder, k)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairScorer {
    /// Inner product over the geometric mean of self inner products.
    #[default]
    Cosine,
    /// Raw inner product.
    InnerProduct,
}

impl FromStr for PairScorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(PairScorer::Cosine),
            "inner-product" => Ok(PairScorer::InnerProduct),
            other => Err(Error::Argument(format!("unknown pair scorer {other:?}"))),
        }
    }
}

impl PairScorer {
    pub fn score(self, a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
        let dot = a.dot(&b);
        match self {
            PairScorer::InnerProduct => dot,
            PairScorer::Cosine => {
                let norms = (a.dot(&a) * b.dot(&b)).sqrt();
                if norms > 0.0 && a == b {
                    1.0
                } else if norms > 0.0 {
                    dot / norms
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDecision {
    pub entity_a: String,
    pub entity_b: String,
    pub score: f64,
    pub threshold: f64,
    pub matched: bool,
}

impl PairDecision {
    pub fn new(entity_a: String, entity_b: String, score: f64, threshold: f64) -> Self {
        Self {
            entity_a,
            entity_b,
            score,
            threshold,
            matched: score >= threshold,
        }
    }
}

/// `entity_a \t entity_b \t score \t matched(0|1)`.
pub fn decisions_to_tsv(decisions: &[PairDecision]) -> String {
    let mut out = String::new();
    for d in decisions {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            d.entity_a,
            d.entity_b,
            d.score,
            u8::from(d.matched)
        )
        .expect("write to string");
    }
    out
}

/// Scores each pair; identical surfaces are embedded once.
pub fn score_pairs(
    pairs: &[(&str, &str)],
    encoder: &EncoderHandle,
    scorer: PairScorer,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    if pairs.iter().any(|(a, b)| a.is_empty() || b.is_empty()) {
        return Err(Error::Argument("pair entity is empty".into()));
    }
    let mut surfaces: Vec<&str> = pairs.iter().flat_map(|(a, b)| [*a, *b]).collect();
    surfaces.sort_unstable();
    surfaces.dedup();
    let embeddings = encoder.encode(&surfaces)?;
    let row_of = |s: &str| surfaces.binary_search(&s).expect("surface embedded");
    Ok(pairs
        .iter()
        .map(|(a, b)| {
            let (ra, rb) = (embeddings.row(row_of(a)), embeddings.row(row_of(b)));
            // Order the operands so score(a, b) and score(b, a) are bit-identical.
            if a <= b {
                scorer.score(ra, rb)
            } else {
                scorer.score(rb, ra)
            }
        })
        .collect())
}

pub fn classify_pair_with(
    a: &str,
    b: &str,
    encoder: &EncoderHandle,
    threshold: f64,
    scorer: PairScorer,
) -> Result<PairDecision> {
    let score = score_pairs(&[(a, b)], encoder, scorer)?[0];
    Ok(PairDecision::new(
        a.to_owned(),
        b.to_owned(),
        score,
        threshold,
    ))
}

pub fn classify_pair(
    a: &str,
    b: &str,
    encoder: &EncoderHandle,
    threshold: f64,
) -> Result<PairDecision> {
    classify_pair_with(a, b, encoder, threshold, PairScorer::Cosine)
}

pub fn classify_pairs(
    pairs: &[PairRecord],
    encoder: &EncoderHandle,
    threshold: f64,
    scorer: PairScorer,
) -> Result<Vec<PairDecision>> {
    let refs: Vec<(&str, &str)> = pairs
        .iter()
        .map(|p| (p.entity_a.as_str(), p.entity_b.as_str()))
        .collect();
    let scores = score_pairs(&refs, encoder, scorer)?;
    Ok(pairs
        .iter()
        .zip(scores)
        .map(|(p, s)| PairDecision::new(p.entity_a.clone(), p.entity_b.clone(), s, threshold))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub f1: f64,
    /// Every score was identical, so no threshold separates anything.
    pub degenerate: bool,
}

/// F1 as an exact fraction `2tp / (2tp + fp + fn)`.
#[derive(Debug, Clone, Copy)]
struct F1Fraction {
    num: u128,
    den: u128,
}

impl F1Fraction {
    fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        let num = 2 * tp as u128;
        Self {
            num,
            den: num + fp as u128 + fn_ as u128,
        }
    }

    fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Denominators are positive whenever at least one positive label exists.
    fn greater_than(self, other: Self) -> bool {
        self.num * other.den > other.num * self.den
    }
}

/// Threshold among the observed scores that maximizes F1 for `score >= threshold`;
/// the smallest one wins ties.
pub fn calibrate_from_scores(scores: &[f64], labels: &[bool]) -> Result<Calibration> {
    if scores.len() != labels.len() {
        return Err(Error::Argument("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Calibration("non-finite score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Calibration("both labels must be present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut best: Option<(f64, F1Fraction)> = None;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = F1Fraction::new(tp, fp, positives - tp);
        // Thresholds descend, so ties resolve towards the later, smaller one.
        if best.is_none_or(|(_, b)| !b.greater_than(f1)) {
            best = Some((threshold, f1));
        }
    }
    let (threshold, f1) = best.expect("at least one score");
    let degenerate = scores.iter().all(|&s| s == scores[0]);
    if degenerate {
        log::warn!("all calibration scores equal {threshold}; threshold is uninformative");
    }
    Ok(Calibration {
        threshold,
        f1: f1.value(),
        degenerate,
    })
}

pub fn calibrate_threshold_with(
    pairs: &[PairRecord],
    encoder: &EncoderHandle,
    scorer: PairScorer,
) -> Result<Calibration> {
    if pairs.is_empty() {
        return Err(Error::Calibration("no pairs".into()));
    }
    let refs: Vec<(&str, &str)> = pairs
        .iter()
        .map(|p| (p.entity_a.as_str(), p.entity_b.as_str()))
        .collect();
    let scores = score_pairs(&refs, encoder, scorer)?;
    let labels: Vec<bool> = pairs.iter().map(|p| p.label).collect();
    calibrate_from_scores(&scores, &labels)
}

pub fn calibrate_threshold(pairs: &[PairRecord], encoder: &EncoderHandle) -> Result<Calibration> {
    calibrate_threshold_with(pairs, encoder, PairScorer::Cosine)
}
