//! Accuracy and pairwise metrics, the edit-distance comparator, and
//! qualitative reports (error lists and per-checkpoint recommendation snapshots).

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{join_concept_ids, ConceptDictionary, ConceptIds, EntityRecord, PairRecord};
use crate::encoder::EncoderHandle;
use crate::error::{Error, Result};
use crate::inference::{
    calibrate_from_scores, Calibration, DictionaryIndex, Normalization, PairDecision,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub counts: ConfusionCounts,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 from precision and recall; zero when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl PairMetrics {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let precision = ratio(counts.tp, counts.tp + counts.fp);
        let recall = ratio(counts.tp, counts.tp + counts.fn_);
        Self {
            precision,
            recall,
            f1: f1_score(precision, recall),
            accuracy: ratio(counts.tp + counts.tn, counts.total()),
            counts,
        }
    }
}

/// Fraction of predictions whose top-1 entry shares a concept with the gold record.
pub fn top1_accuracy(predictions: &[Normalization], gold: &[EntityRecord]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} gold records",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let correct = predictions
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.top1().is_some_and(|t| g.shares_concept(&t.concept_ids)))
        .count();
    Ok(correct as f64 / gold.len() as f64)
}

pub fn pair_metrics(decisions: &[PairDecision], gold: &[PairRecord]) -> Result<PairMetrics> {
    if decisions.len() != gold.len() {
        return Err(Error::Argument(format!(
            "{} decisions for {} gold pairs",
            decisions.len(),
            gold.len()
        )));
    }
    let mut counts = ConfusionCounts::default();
    for (d, g) in decisions.iter().zip(gold) {
        counts.record(d.matched, g.label);
    }
    Ok(PairMetrics::from_counts(counts))
}

/// Levenshtein distance over Unicode scalar values with unit costs.
pub fn edit_distance(a: &str, b: &str) -> usize {
    strsim::levenshtein(a, b)
}

/// `1 - distance / max(len)`, in `[0, 1]`; two empty strings score 1.
pub fn edit_similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        1.0
    } else {
        1.0 - edit_distance(a, b) as f64 / longest as f64
    }
}

/// Pair classifier that thresholds length-normalized edit similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditDistanceBaseline {
    pub calibration: Calibration,
}

impl EditDistanceBaseline {
    pub fn fit(train: &[PairRecord]) -> Result<Self> {
        let scores: Vec<f64> = train
            .iter()
            .map(|p| edit_similarity(&p.entity_a, &p.entity_b))
            .collect();
        let labels: Vec<bool> = train.iter().map(|p| p.label).collect();
        Ok(Self {
            calibration: calibrate_from_scores(&scores, &labels)?,
        })
    }

    pub fn classify(&self, pairs: &[PairRecord]) -> Vec<PairDecision> {
        pairs
            .iter()
            .map(|p| {
                PairDecision::new(
                    p.entity_a.clone(),
                    p.entity_b.clone(),
                    edit_similarity(&p.entity_a, &p.entity_b),
                    self.calibration.threshold,
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrongRetrieval {
    pub query: String,
    pub gold_concepts: ConceptIds,
    pub retrieved: String,
    pub retrieved_concepts: ConceptIds,
}

/// Up to `limit` queries whose top-1 entry does not share a concept with the gold record.
pub fn concept_errors(
    predictions: &[Normalization],
    gold: &[EntityRecord],
    limit: usize,
) -> Result<Vec<WrongRetrieval>> {
    if predictions.len() != gold.len() {
        return Err(Error::Argument(
            "predictions and gold differ in length".into(),
        ));
    }
    Ok(predictions
        .iter()
        .zip(gold)
        .filter_map(|(p, g)| {
            let top = p.top1()?;
            (!g.shares_concept(&top.concept_ids)).then(|| WrongRetrieval {
                query: p.query.clone(),
                gold_concepts: g.concept_ids.clone(),
                retrieved: top.surface.clone(),
                retrieved_concepts: top.concept_ids.clone(),
            })
        })
        .take(limit)
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairErrors {
    pub false_positives: Vec<(String, String)>,
    pub false_negatives: Vec<(String, String)>,
}

/// False positives and false negatives in input order, each list capped at `limit`.
pub fn pair_errors(
    decisions: &[PairDecision],
    gold: &[PairRecord],
    limit: usize,
) -> Result<PairErrors> {
    if decisions.len() != gold.len() {
        return Err(Error::Argument(
            "decisions and gold differ in length".into(),
        ));
    }
    let mut errors = PairErrors::default();
    for (d, g) in decisions.iter().zip(gold) {
        let pair = (d.entity_a.clone(), d.entity_b.clone());
        match (d.matched, g.label) {
            (true, false) if errors.false_positives.len() < limit => {
                errors.false_positives.push(pair)
            }
            (false, true) if errors.false_negatives.len() < limit => {
                errors.false_negatives.push(pair)
            }
            _ => {}
        }
    }
    Ok(errors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub surface: String,
    pub correct: bool,
}

/// Top-ranked dictionary surfaces for one query under one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub query: String,
    pub checkpoint: String,
    pub entries: Vec<SnapshotEntry>,
}

pub const SNAPSHOT_DEPTH: usize = 5;

/// Snapshot rows for encoders already in memory, ordered query-major.
pub fn snapshot_with_encoders(
    queries: &[EntityRecord],
    encoders: &[(String, &EncoderHandle)],
    dict: &ConceptDictionary,
    depth: usize,
) -> Result<Vec<SnapshotRow>> {
    let surfaces: Vec<&str> = queries.iter().map(|q| q.surface.as_str()).collect();
    let mut per_checkpoint = Vec::with_capacity(encoders.len());
    for (name, encoder) in encoders {
        let index = DictionaryIndex::build(dict, encoder)?;
        per_checkpoint.push((name, index.normalize_batch(&surfaces, encoder, depth)?));
    }
    let mut rows = Vec::with_capacity(queries.len() * encoders.len());
    for (qi, query) in queries.iter().enumerate() {
        for (name, results) in &per_checkpoint {
            rows.push(SnapshotRow {
                query: query.surface.clone(),
                checkpoint: (*name).clone(),
                entries: results[qi]
                    .ranked
                    .iter()
                    .map(|e| SnapshotEntry {
                        surface: e.surface.clone(),
                        correct: query.shares_concept(&e.concept_ids),
                    })
                    .collect(),
            });
        }
    }
    Ok(rows)
}

/// Restores each named checkpoint and lists its top-5 recommendations per query.
pub fn snapshot_recommendations(
    queries: &[EntityRecord],
    checkpoints: &[(String, PathBuf)],
    dict: &ConceptDictionary,
) -> Result<Vec<SnapshotRow>> {
    let mut restored = Vec::with_capacity(checkpoints.len());
    for (name, path) in checkpoints {
        if !path.is_dir() {
            return Err(Error::integrity(
                path,
                format!("checkpoint {name} is missing"),
            ));
        }
        restored.push((name.clone(), checkpoint::restore(path)?.encoder));
    }
    let borrowed: Vec<(String, &EncoderHandle)> =
        restored.iter().map(|(n, e)| (n.clone(), e)).collect();
    snapshot_with_encoders(queries, &borrowed, dict, SNAPSHOT_DEPTH)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scores {
    Concept {
        top1_accuracy: f64,
        n_queries: usize,
    },
    Pairs {
        metrics: PairMetrics,
        threshold: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub scores: Scores,
    pub wrong_retrievals: Vec<WrongRetrieval>,
    pub errors: PairErrors,
    pub snapshots: Vec<SnapshotRow>,
}

impl EvalReport {
    pub fn concept(
        dataset: &str,
        predictions: &[Normalization],
        gold: &[EntityRecord],
        limit: usize,
    ) -> Result<Self> {
        Ok(Self {
            dataset: dataset.to_owned(),
            scores: Scores::Concept {
                top1_accuracy: top1_accuracy(predictions, gold)?,
                n_queries: gold.len(),
            },
            wrong_retrievals: concept_errors(predictions, gold, limit)?,
            errors: PairErrors::default(),
            snapshots: Vec::new(),
        })
    }

    pub fn pairs(
        dataset: &str,
        decisions: &[PairDecision],
        gold: &[PairRecord],
        threshold: f64,
        limit: usize,
    ) -> Result<Self> {
        Ok(Self {
            dataset: dataset.to_owned(),
            scores: Scores::Pairs {
                metrics: pair_metrics(decisions, gold)?,
                threshold,
            },
            wrong_retrievals: Vec::new(),
            errors: pair_errors(decisions, gold, limit)?,
            snapshots: Vec::new(),
        })
    }

    /// Human-readable tables.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, "dataset: {}", self.dataset);
        match &self.scores {
            Scores::Concept {
                top1_accuracy,
                n_queries,
            } => {
                let _ = writeln!(
                    w,
                    "top-1 accuracy: {:.4} ({n_queries} queries)",
                    top1_accuracy
                );
            }
            Scores::Pairs { metrics, threshold } => {
                let c = metrics.counts;
                let _ = writeln!(w, "threshold: {threshold}");
                let _ = writeln!(
                    w,
                    "precision {:.4}  recall {:.4}  f1 {:.4}  accuracy {:.4}",
                    metrics.precision, metrics.recall, metrics.f1, metrics.accuracy
                );
                let _ = writeln!(w, "tp {}  fp {}  fn {}  tn {}", c.tp, c.fp, c.fn_, c.tn);
            }
        }
        if !self.wrong_retrievals.is_empty() {
            let _ = writeln!(w, "\nQuery Entity\tRetrieved Synonym Entity");
            for e in &self.wrong_retrievals {
                let _ = writeln!(w, "{}\t{}", e.query, e.retrieved);
            }
        }
        if matches!(self.scores, Scores::Pairs { .. }) {
            for (title, list) in [
                ("False Positive", &self.errors.false_positives),
                ("False Negative", &self.errors.false_negatives),
            ] {
                let _ = writeln!(w, "\n{title}\nEntity 1\tEntity 2");
                for (a, b) in list {
                    let _ = writeln!(w, "{a}\t{b}");
                }
            }
        }
        if !self.snapshots.is_empty() {
            let _ = writeln!(w, "\nQuery\tCheckpoint\tRecommendations (* = correct)");
            for row in &self.snapshots {
                let entries: Vec<String> = row
                    .entries
                    .iter()
                    .map(|e| format!("{}{}", if e.correct { "*" } else { "" }, e.surface))
                    .collect();
                let _ = writeln!(
                    w,
                    "{}\t{}\t{}",
                    row.query,
                    row.checkpoint,
                    entries.join(" | ")
                );
            }
        }
        out
    }

    /// One JSON record per line: a summary record, then one per exemplar.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let summary = serde_json::json!({
            "record": "summary",
            "dataset": self.dataset,
            "scores": self.scores,
        });
        out.push_str(&serde_json::to_string(&summary)?);
        out.push('\n');
        for e in &self.wrong_retrievals {
            let rec = serde_json::json!({
                "record": "wrong_retrieval",
                "query": e.query,
                "gold_concepts": join_concept_ids(&e.gold_concepts),
                "retrieved": e.retrieved,
                "retrieved_concepts": join_concept_ids(&e.retrieved_concepts),
            });
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        for (kind, list) in [
            ("false_positive", &self.errors.false_positives),
            ("false_negative", &self.errors.false_negatives),
        ] {
            for (a, b) in list {
                let rec = serde_json::json!({ "record": kind, "entity_a": a, "entity_b": b });
                out.push_str(&serde_json::to_string(&rec)?);
                out.push('\n');
            }
        }
        for row in &self.snapshots {
            let mut rec = serde_json::to_value(row)?;
            rec["record"] = "snapshot".into();
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }
}
