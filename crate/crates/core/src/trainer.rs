//! Encoder fine-tuning by edge-weight distribution matching.
//!
//! For each query the K candidate edges selected at the start of the epoch
//! give two vectors: ground-truth edge weights (1 when the candidate shares a
//! concept with the query, else 0) and similarity edge weights (inner products
//! divided by the largest among the candidates). Both are softmaxed and the
//! loss is `KL(softmax(gt) || softmax(sim))` in nats.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointInfo};
use crate::corpus::{ConceptDictionary, EntityRecord, SurfaceNormalization};
use crate::encoder::EncoderHandle;
use crate::error::{Error, Result};
use crate::graph::{
    build_ground_truth, similarity_graph_from_embeddings, CandidateSet, GroundTruthGraph,
};
use crate::inference::DictionaryIndex;
use crate::optim::AdamWConfig;

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = values.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    values.iter().map(|v| v - log_total).collect()
}

fn check_edge_vectors(gt_edges: &[f64], sim_edges: &[f64]) -> Result<()> {
    if gt_edges.len() != sim_edges.len() {
        return Err(Error::Argument(format!(
            "edge vectors differ in length: {} vs {}",
            gt_edges.len(),
            sim_edges.len()
        )));
    }
    if gt_edges.is_empty() {
        return Err(Error::Argument("edge vectors are empty".into()));
    }
    if gt_edges.iter().any(|&g| g != 0.0 && g != 1.0) {
        return Err(Error::Argument("ground-truth edges must be 0 or 1".into()));
    }
    Ok(())
}

/// `KL(softmax(gt_edges) || softmax(sim_edges))`, natural log.
pub fn kl_edge_loss(gt_edges: &[f64], sim_edges: &[f64]) -> Result<f64> {
    kl_edge_loss_with_grad(gt_edges, sim_edges).map(|(loss, _)| loss)
}

/// Loss and its gradient with respect to `sim_edges`, `softmax(sim) - softmax(gt)`.
pub fn kl_edge_loss_with_grad(gt_edges: &[f64], sim_edges: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_edge_vectors(gt_edges, sim_edges)?;
    let log_p = log_softmax(gt_edges);
    let log_q = log_softmax(sim_edges);
    let loss: f64 = log_p
        .iter()
        .zip(&log_q)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum();
    let grad = log_p
        .iter()
        .zip(&log_q)
        .map(|(lp, lq)| lq.exp() - lp.exp())
        .collect();
    // Rounding can leave a -1e-17 residue for identical distributions.
    Ok((loss.max(0.0), grad))
}

/// Aligned ground-truth and similarity edges for one query's candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDistributionPair {
    pub query: usize,
    pub gt_edges: Vec<u8>,
    pub sim_edges: Vec<f64>,
    pub p_gt: Vec<f64>,
    pub p_sim: Vec<f64>,
}

impl EdgeDistributionPair {
    pub fn gt_as_f64(&self) -> Vec<f64> {
        self.gt_edges.iter().map(|&g| f64::from(g)).collect()
    }

    pub fn loss(&self) -> f64 {
        kl_edge_loss(&self.gt_as_f64(), &self.sim_edges).expect("aligned by construction")
    }
}

pub fn assemble_edge_distributions(
    gt: &GroundTruthGraph,
    candidates: &CandidateSet,
) -> EdgeDistributionPair {
    let gt_edges: Vec<u8> = candidates
        .indices
        .iter()
        .map(|&d| gt.weight(candidates.query, d))
        .collect();
    let gt_f: Vec<f64> = gt_edges.iter().map(|&g| f64::from(g)).collect();
    EdgeDistributionPair {
        query: candidates.query,
        p_gt: softmax(&gt_f),
        p_sim: softmax(&candidates.weights),
        gt_edges,
        sim_edges: candidates.weights.clone(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateRefresh {
    #[default]
    PerEpoch,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionSplit {
    /// Select on the test split and train on train + dev.
    #[default]
    TestBest,
    /// Select on dev and train on train only.
    DevBest,
}

impl SelectionSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionSplit::TestBest => "test-best",
            SelectionSplit::DevBest => "dev-best",
        }
    }
}

impl FromStr for SelectionSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test-best" => Ok(SelectionSplit::TestBest),
            "dev-best" => Ok(SelectionSplit::DevBest),
            other => Err(Error::Argument(format!(
                "unknown selection split {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub candidate_refresh: CandidateRefresh,
    pub selection_split: SelectionSplit,
    /// Leave queries whose candidates hold no true synonym out of the loss.
    pub skip_all_zero_rows: bool,
    /// Keep a checkpoint for every epoch rather than only epoch-0, epoch-1, best and last.
    pub keep_all_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 30,
            batch_size: 16,
            epochs: 50,
            learning_rate: 1e-5,
            weight_decay: 0.01,
            seed: 0,
            candidate_refresh: CandidateRefresh::PerEpoch,
            selection_split: SelectionSplit::TestBest,
            skip_all_zero_rows: false,
            keep_all_checkpoints: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Argument("batch_size must be at least 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Argument("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Argument(
                "weight_decay must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Sets one field from its key-value representation.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Argument(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "k" => self.k = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "candidate_refresh" => match value {
                "per-epoch" => self.candidate_refresh = CandidateRefresh::PerEpoch,
                other => {
                    return Err(Error::Argument(format!(
                        "unknown candidate_refresh {other:?}"
                    )))
                }
            },
            "selection_split" => self.selection_split = value.parse()?,
            "skip_all_zero_rows" => self.skip_all_zero_rows = parse(key, value)?,
            "keep_all_checkpoints" => self.keep_all_checkpoints = parse(key, value)?,
            other => return Err(Error::Argument(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: "config".into(),
                line: i + 1,
                message: "expected key = value".into(),
            })?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "k = {}\nbatch_size = {}\nepochs = {}\nlearning_rate = {:e}\nweight_decay = {}\nseed = {}\n\
             candidate_refresh = per-epoch\nselection_split = {}\nskip_all_zero_rows = {}\nkeep_all_checkpoints = {}\n",
            self.k,
            self.batch_size,
            self.epochs,
            self.learning_rate,
            self.weight_decay,
            self.seed,
            self.selection_split.as_str(),
            self.skip_all_zero_rows,
            self.keep_all_checkpoints,
        )
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub top1_accuracy: f64,
    pub wall_time: f64,
}

impl EpochMetrics {
    /// Everything except wall-clock time, which is the only field allowed to differ between reruns.
    pub fn deterministic_fields(&self) -> (usize, u64, u64) {
        (
            self.epoch,
            self.mean_loss.to_bits(),
            self.top1_accuracy.to_bits(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPointer {
    pub epoch: usize,
    pub top1_accuracy: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub running_loss: f64,
    /// Accuracy of the untrained encoder on the selection split.
    pub initial_top1_accuracy: f64,
    pub history: Vec<EpochMetrics>,
    pub best: Option<BestPointer>,
    /// Named checkpoints written so far, such as `epoch-0` or `best`.
    pub checkpoints: Vec<(String, PathBuf)>,
}

impl TrainState {
    pub fn checkpoint(&self, name: &str) -> Option<&Path> {
        self.checkpoints
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_path())
    }
}

/// Where and how the training loop persists its artifacts.
#[derive(Debug, Clone)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
    pub normalization: SurfaceNormalization,
    pub corpus_fingerprint: String,
}

pub const METRICS_FILE: &str = "metrics.jsonl";

/// Per-query losses of one batch and the batch mean.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub per_query: Vec<f64>,
    pub mean: f64,
}

/// Similarity edge weights and `d(loss)/d(sims)` for one query.
fn edge_weights_and_sim_grad(sims: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut argmax = 0;
    for (i, s) in sims.iter().enumerate() {
        if *s > sims[argmax] {
            argmax = i;
        }
    }
    let max = sims[argmax];
    let weights: Vec<f64> = if max > 0.0 {
        sims.iter().map(|s| s / max).collect()
    } else {
        sims.to_vec()
    };
    let (loss, dw) = kl_edge_loss_with_grad(gt, &weights)?;
    let dsims = if max > 0.0 {
        // w_i = s_i / m with m = s_argmax.
        let through_max: f64 = dw.iter().zip(sims).map(|(g, s)| g * s).sum::<f64>() / (max * max);
        let mut ds: Vec<f64> = dw.iter().map(|g| g / max).collect();
        ds[argmax] -= through_max;
        ds
    } else {
        dw
    };
    Ok((loss, weights, dsims))
}

struct BatchObjective {
    losses: Vec<f64>,
    included: usize,
    tracked: crate::encoder::TrackedEmbeddings,
    upstream: Array2<f64>,
}

fn batch_objective(
    encoder: &EncoderHandle,
    dict: &ConceptDictionary,
    gt: &GroundTruthGraph,
    candidates: &[CandidateSet],
    batch: &[usize],
    skip_all_zero_rows: bool,
) -> Result<BatchObjective> {
    let mut surfaces: Vec<&str> = Vec::new();
    let mut offsets = Vec::with_capacity(batch.len());
    for &q in batch {
        offsets.push(surfaces.len());
        surfaces.push(gt.query_surface(q));
        for &d in &candidates[q].indices {
            surfaces.push(&dict.entries()[d].surface);
        }
    }
    let tracked = encoder.encode_trainable(&surfaces)?;
    let emb = tracked.value().vectors();
    let mut upstream = Array2::<f64>::zeros(emb.dim());

    let mut losses = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    for (&q, &base) in batch.iter().zip(&offsets) {
        let set = &candidates[q];
        let query_vec = emb.row(base);
        let sims: Vec<f64> = (0..set.indices.len())
            .map(|i| query_vec.dot(&emb.row(base + 1 + i)))
            .collect();
        let gt_edges: Vec<f64> = set
            .indices
            .iter()
            .map(|&d| f64::from(gt.weight(q, d)))
            .collect();
        let skip = skip_all_zero_rows && gt_edges.iter().all(|&g| g == 0.0);
        let (loss, _, dsims) = edge_weights_and_sim_grad(&sims, &gt_edges)?;
        losses.push(loss);
        grads.push((skip, dsims));
    }
    let included = grads.iter().filter(|(skip, _)| !skip).count();
    if included > 0 {
        let scale = 1.0 / included as f64;
        for ((skip, dsims), &base) in grads.iter().zip(&offsets) {
            if *skip {
                continue;
            }
            let query_vec = emb.row(base).to_owned();
            for (i, ds) in dsims.iter().enumerate() {
                let cand_row = emb.row(base + 1 + i).to_owned();
                let g = ds * scale;
                upstream.row_mut(base).scaled_add(g, &cand_row);
                upstream.row_mut(base + 1 + i).scaled_add(g, &query_vec);
            }
        }
    }
    Ok(BatchObjective {
        losses,
        included,
        tracked,
        upstream,
    })
}

/// Loss of a batch at the current parameters against fixed candidate sets.
pub fn batch_loss(
    encoder: &EncoderHandle,
    dict: &ConceptDictionary,
    gt: &GroundTruthGraph,
    candidates: &[CandidateSet],
    batch: &[usize],
) -> Result<BatchLoss> {
    let objective = batch_objective(encoder, dict, gt, candidates, batch, false)?;
    let mean = objective.losses.iter().sum::<f64>() / objective.losses.len() as f64;
    Ok(BatchLoss {
        per_query: objective.losses,
        mean,
    })
}

/// Accumulates the gradient of the batch's mean loss into the encoder without stepping.
pub fn accumulate_batch_gradient(
    encoder: &mut EncoderHandle,
    dict: &ConceptDictionary,
    gt: &GroundTruthGraph,
    candidates: &[CandidateSet],
    batch: &[usize],
) -> Result<BatchLoss> {
    let objective = batch_objective(encoder, dict, gt, candidates, batch, false)?;
    let mean = objective.losses.iter().sum::<f64>() / objective.losses.len() as f64;
    encoder.backward(objective.tracked, &objective.upstream)?;
    Ok(BatchLoss {
        per_query: objective.losses,
        mean,
    })
}

/// Top-K candidates of every query under the current parameters.
pub fn refresh_candidates(
    encoder: &EncoderHandle,
    queries: &[EntityRecord],
    dict: &ConceptDictionary,
    k: usize,
) -> Result<Vec<CandidateSet>> {
    let dict_embeddings = encoder.encode(&dict.surfaces())?;
    let surfaces: Vec<&str> = queries.iter().map(|r| r.surface.as_str()).collect();
    let query_embeddings = encoder.encode(&surfaces)?;
    Ok(similarity_graph_from_embeddings(
        &query_embeddings,
        &dict_embeddings,
        k,
        dict.fingerprint(),
    )?
    .rows)
}

/// Splits feeding a training run.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [EntityRecord],
    pub dev: &'a [EntityRecord],
    pub test: &'a [EntityRecord],
    pub dictionary: &'a ConceptDictionary,
}

impl TrainData<'_> {
    fn training_queries(&self, selection: SelectionSplit) -> Vec<EntityRecord> {
        match selection {
            SelectionSplit::TestBest => self.train.iter().chain(self.dev).cloned().collect(),
            SelectionSplit::DevBest => self.train.to_vec(),
        }
    }

    fn selection_queries(&self, selection: SelectionSplit) -> &[EntityRecord] {
        match selection {
            SelectionSplit::TestBest => self.test,
            SelectionSplit::DevBest => self.dev,
        }
    }
}

struct Diagnostic<'a> {
    gt: &'a GroundTruthGraph,
    batch: &'a [usize],
    losses: &'a [f64],
}

impl fmt::Display for Diagnostic<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "batch [")?;
        for (i, (&q, loss)) in self.batch.iter().zip(self.losses).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{:?}: {loss}", self.gt.query_surface(q))?;
        }
        write!(f, "]")
    }
}

fn append_metrics(path: &Path, metrics: &EpochMetrics) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(file, "{}", serde_json::to_string(metrics)?).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = crate::corpus::read_text(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Fine-tunes `encoder` in place.
///
/// Each epoch re-embeds the dictionary and training queries, freezes every
/// query's top-K candidates, then walks shuffled batches: the query and its
/// candidates are re-encoded under the current parameters, the mean KL edge
/// loss over the batch is backpropagated, and one AdamW step is taken. After
/// the epoch the selection split is scored by top-1 accuracy and, when a
/// checkpoint policy is given, checkpoints and the metric log are written.
pub fn train(
    data: TrainData<'_>,
    encoder: &mut EncoderHandle,
    config: &TrainConfig,
    policy: Option<&CheckpointPolicy>,
) -> Result<TrainState> {
    config.validate()?;
    let queries = data.training_queries(config.selection_split);
    if queries.is_empty() {
        return Err(Error::Validation("no training queries".into()));
    }
    let selection = data.selection_queries(config.selection_split);
    let dict = data.dictionary;
    let gt = build_ground_truth(&queries, dict)?;
    let optimizer = config.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = TrainState::default();

    let metrics_path = match policy {
        Some(p) => {
            std::fs::create_dir_all(&p.dir).map_err(|e| Error::io(&p.dir, e))?;
            let path = p.dir.join(METRICS_FILE);
            if path.exists() {
                std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
            Some(path)
        }
        None => None,
    };

    state.initial_top1_accuracy = selection_accuracy(encoder, dict, selection)?;
    if let Some(p) = policy {
        save_named(p, "epoch-0", encoder, &mut state)?;
    }

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let candidates = refresh_candidates(encoder, &queries, dict, config.k)?;
        let mut order: Vec<usize> = (0..queries.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in order.chunks(config.batch_size) {
            let objective = batch_objective(
                encoder,
                dict,
                &gt,
                &candidates,
                batch,
                config.skip_all_zero_rows,
            )?;
            if objective.losses.iter().any(|l| !l.is_finite()) {
                let diagnostic = Diagnostic {
                    gt: &gt,
                    batch,
                    losses: &objective.losses,
                }
                .to_string();
                if let Some(p) = policy {
                    let dump = p
                        .dir
                        .join(format!("nonfinite-epoch{epoch}-step{}.txt", state.step));
                    let _ = std::fs::write(&dump, &diagnostic);
                }
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: state.step,
                    diagnostic,
                });
            }
            loss_sum += objective.losses.iter().sum::<f64>();
            loss_count += objective.losses.len();
            if objective.included > 0 {
                encoder.backward(objective.tracked, &objective.upstream)?;
                encoder.step(&optimizer)?;
            }
            state.step += 1;
        }

        let mean_loss = loss_sum / loss_count as f64;
        let top1_accuracy = selection_accuracy(encoder, dict, selection)?;
        let metrics = EpochMetrics {
            epoch,
            mean_loss,
            top1_accuracy,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: mean loss {mean_loss:.6}, top-1 accuracy {top1_accuracy:.4}");
        state.epoch = epoch;
        state.running_loss = mean_loss;
        state.history.push(metrics.clone());
        if let Some(path) = &metrics_path {
            append_metrics(path, &metrics)?;
        }

        let improved = state
            .best
            .as_ref()
            .is_none_or(|b| top1_accuracy > b.top1_accuracy);
        if improved {
            state.best = Some(BestPointer {
                epoch,
                top1_accuracy,
                checkpoint: None,
            });
        }
        if let Some(p) = policy {
            if epoch == 1 {
                save_named(p, "epoch-1", encoder, &mut state)?;
            }
            if config.keep_all_checkpoints && epoch > 1 {
                save_named(p, &format!("epoch-{epoch}"), encoder, &mut state)?;
            }
            if improved {
                let path = save_named(p, "best", encoder, &mut state)?;
                if let Some(best) = state.best.as_mut() {
                    best.checkpoint = Some(path);
                }
            }
            save_named(p, "last", encoder, &mut state)?;
        }
    }
    if let Some(p) = policy {
        // Rewrite so the stored state carries the final history and best pointer.
        for name in ["best", "last"] {
            if let Some(path) = state.checkpoint(name).map(Path::to_path_buf) {
                checkpoint::write_state(&path, &state)?;
            }
        }
        checkpoint::write_state(&p.dir, &state)?;
    }
    Ok(state)
}

fn save_named(
    policy: &CheckpointPolicy,
    name: &str,
    encoder: &EncoderHandle,
    state: &mut TrainState,
) -> Result<PathBuf> {
    let dir = policy.dir.join(name);
    let info = CheckpointInfo {
        normalization: policy.normalization,
        corpus_fingerprint: policy.corpus_fingerprint.clone(),
        epoch: state.epoch,
    };
    if !state.checkpoints.iter().any(|(n, _)| n == name) {
        state.checkpoints.push((name.to_owned(), dir.clone()));
    }
    checkpoint::save(&dir, encoder, &info, Some(state))?;
    Ok(dir)
}

fn selection_accuracy(
    encoder: &EncoderHandle,
    dict: &ConceptDictionary,
    queries: &[EntityRecord],
) -> Result<f64> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let index = DictionaryIndex::build(dict, encoder)?;
    let surfaces: Vec<&str> = queries.iter().map(|q| q.surface.as_str()).collect();
    let predictions = index.normalize_batch(&surfaces, encoder, 1)?;
    crate::eval::top1_accuracy(&predictions, queries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_vectors_give_zero_loss() {
        let v = [1.0, 0.0, 1.0, 1.0];
        assert_eq!(kl_edge_loss(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn all_zero_truth_targets_uniform() {
        let d = softmax(&[0.0, 0.0, 0.0]);
        assert!(d.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        // Loss against a constant sim vector is then zero as well.
        assert!(kl_edge_loss(&[0.0, 0.0, 0.0], &[0.4, 0.4, 0.4]).unwrap() < 1e-15);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(
            kl_edge_loss(&[1.0, 0.0], &[0.3]),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            kl_edge_loss(&[0.5], &[0.3]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn config_defaults_and_invariants() {
        let config = TrainConfig::default();
        assert_eq!((config.k, config.batch_size, config.epochs), (30, 16, 50));
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            k: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let config = TrainConfig {
            k: 10,
            learning_rate: 0.003,
            selection_split: SelectionSplit::DevBest,
            ..TrainConfig::default()
        };
        let parsed = TrainConfig::from_kv_text(&config.to_kv_text()).unwrap();
        assert_eq!(parsed, config);
        assert!(TrainConfig::from_kv_text("bogus = 1").is_err());
        assert!(TrainConfig::from_kv_text("epochs = 0").is_err());
        let partial = TrainConfig::from_kv_text("# comment\nbatch_size = 4 # inline\n").unwrap();
        assert_eq!(partial.batch_size, 4);
        assert_eq!(partial.k, 30);
    }

    #[test]
    fn sim_grad_matches_finite_differences() {
        let sims = [2.0, 3.5, -1.0, 0.7, 3.4];
        let gt = [1.0, 0.0, 1.0, 0.0, 0.0];
        let (_, _, ds) = edge_weights_and_sim_grad(&sims, &gt).unwrap();
        let h = 1e-6;
        for i in 0..sims.len() {
            let mut up = sims;
            up[i] += h;
            let mut down = sims;
            down[i] -= h;
            let fd = (edge_weights_and_sim_grad(&up, &gt).unwrap().0
                - edge_weights_and_sim_grad(&down, &gt).unwrap().0)
                / (2.0 * h);
            assert!((fd - ds[i]).abs() < 1e-7, "coord {i}: fd {fd} vs {}", ds[i]);
        }
    }
}
