//! Ground-truth and similarity entity graphs.
//!
//! The ground-truth graph links a query to every dictionary entry sharing at
//! least one concept ID, with unit weight. The similarity graph keeps, per
//! query, the K dictionary entries with the largest inner-product similarity
//! divided by that query's maximum similarity.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ConceptDictionary, EntityRecord};
use crate::encoder::{EmbeddingMatrix, EncoderHandle};
use crate::error::{Error, Result};

/// Query-to-dictionary adjacency stored as sorted dictionary indices per query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthGraph {
    query_surfaces: Vec<String>,
    rows: Vec<Vec<usize>>,
    dictionary_size: usize,
}

impl GroundTruthGraph {
    pub fn n_queries(&self) -> usize {
        self.rows.len()
    }

    pub fn dictionary_size(&self) -> usize {
        self.dictionary_size
    }

    pub fn query_surface(&self, query: usize) -> &str {
        &self.query_surfaces[query]
    }

    /// Dictionary indices linked to `query`, ascending.
    pub fn neighbors(&self, query: usize) -> &[usize] {
        &self.rows[query]
    }

    /// Edge weight: 1 if linked, else 0.
    pub fn weight(&self, query: usize, dict_index: usize) -> u8 {
        u8::from(self.rows[query].binary_search(&dict_index).is_ok())
    }

    pub fn has_edge(&self, query: usize, dict_index: usize) -> bool {
        self.weight(query, dict_index) == 1
    }

    pub fn n_edges(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

pub fn build_ground_truth(
    queries: &[EntityRecord],
    dict: &ConceptDictionary,
) -> Result<GroundTruthGraph> {
    let mut by_concept: HashMap<&str, Vec<usize>> = HashMap::new();
    for entry in dict.entries() {
        for id in &entry.concept_ids {
            by_concept.entry(id.as_str()).or_default().push(entry.index);
        }
    }
    let mut rows = Vec::with_capacity(queries.len());
    for (q, record) in queries.iter().enumerate() {
        if record.concept_ids.is_empty() {
            return Err(Error::Validation(format!(
                "query {q} ({:?}) has no concept ID",
                record.surface
            )));
        }
        let mut linked: Vec<usize> = record
            .concept_ids
            .iter()
            .filter_map(|id| by_concept.get(id.as_str()))
            .flatten()
            .copied()
            .collect();
        linked.sort_unstable();
        linked.dedup();
        rows.push(linked);
    }
    Ok(GroundTruthGraph {
        query_surfaces: queries.iter().map(|r| r.surface.clone()).collect(),
        rows,
        dictionary_size: dict.len(),
    })
}

/// One query's similarities against the whole dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub sims: Vec<f64>,
    pub max_sim: f64,
    /// `sims / max_sim` when `max_sim > 0`, otherwise the raw sims.
    pub weights: Vec<f64>,
    pub normalized: bool,
}

impl SimilarityRow {
    pub fn from_sims(sims: Vec<f64>) -> Self {
        let max_sim = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max_sim > 0.0 {
            let weights = sims.iter().map(|s| s / max_sim).collect();
            Self {
                sims,
                max_sim,
                weights,
                normalized: true,
            }
        } else {
            Self {
                weights: sims.clone(),
                sims,
                max_sim,
                normalized: false,
            }
        }
    }

    pub fn len(&self) -> usize {
        self.sims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sims.is_empty()
    }
}

pub fn similarity_row(query: ArrayView1<'_, f64>, dict: &EmbeddingMatrix) -> Result<SimilarityRow> {
    if query.len() != dict.dim() {
        return Err(Error::Argument(format!(
            "query dimension {} does not match dictionary dimension {}",
            query.len(),
            dict.dim()
        )));
    }
    if dict.is_empty() {
        return Err(Error::Argument("dictionary embeddings are empty".into()));
    }
    let sims = dict.vectors().dot(&query).to_vec();
    Ok(SimilarityRow::from_sims(sims))
}

/// Query's top-K dictionary neighbors and their edge weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query: usize,
    pub k: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Descending weight, then ascending index.
pub fn rank_order(weights: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b))
}

/// Indices of the `min(k, len)` largest weights in rank order.
pub fn top_k_indices(weights: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(weights.len());
    let mut order: Vec<usize> = (0..weights.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    let cmp = rank_order(weights);
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, &cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(&cmp);
    order
}

pub fn top_k(row: &SimilarityRow, k: usize) -> Result<CandidateSet> {
    top_k_for(0, row, k)
}

fn top_k_for(query: usize, row: &SimilarityRow, k: usize) -> Result<CandidateSet> {
    if k < 1 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let indices = top_k_indices(&row.weights, k);
    let weights = indices.iter().map(|&i| row.weights[i]).collect();
    Ok(CandidateSet {
        query,
        k,
        indices,
        weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGraph {
    pub rows: Vec<CandidateSet>,
    pub dictionary_fingerprint: String,
    pub dictionary_size: usize,
}

impl SimilarityGraph {
    /// `query_id \t dict_index \t weight`, K rows per query.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            for (index, weight) in row.indices.iter().zip(&row.weights) {
                writeln!(out, "{}\t{}\t{}", row.query, index, weight).expect("write to string");
            }
        }
        out
    }
}

/// Top-K rows for every query from precomputed embeddings.
pub fn similarity_graph_from_embeddings(
    queries: &EmbeddingMatrix,
    dict: &EmbeddingMatrix,
    k: usize,
    dictionary_fingerprint: String,
) -> Result<SimilarityGraph> {
    if k < 1 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if queries.dim() != dict.dim() {
        return Err(Error::Argument(format!(
            "query dimension {} does not match dictionary dimension {}",
            queries.dim(),
            dict.dim()
        )));
    }
    let rows: Vec<(CandidateSet, bool)> = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let row = similarity_row(queries.row(q), dict)?;
            let normalized = row.normalized;
            Ok((top_k_for(q, &row, k)?, normalized))
        })
        .collect::<Result<_>>()?;
    let degenerate = rows.iter().filter(|(_, normalized)| !normalized).count();
    if degenerate > 0 {
        log::warn!(
            "{degenerate} of {} queries have a non-positive maximum similarity; raw similarities used as weights",
            rows.len()
        );
    }
    Ok(SimilarityGraph {
        rows: rows.into_iter().map(|(c, _)| c).collect(),
        dictionary_fingerprint,
        dictionary_size: dict.len(),
    })
}

pub fn build_similarity_graph<S: AsRef<str>>(
    queries: &[S],
    dict: &ConceptDictionary,
    encoder: &EncoderHandle,
    k: usize,
) -> Result<SimilarityGraph> {
    if k < 1 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let dict_embeddings = encoder.encode(&dict.surfaces())?;
    let query_embeddings = encoder.encode(queries)?;
    similarity_graph_from_embeddings(&query_embeddings, &dict_embeddings, k, dict.fingerprint())
}
