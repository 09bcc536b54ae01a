//! BERT-family encoder loaded from a local model directory.
//!
//! The directory must hold `config.json`, either `tokenizer.json` or
//! `vocab.txt`, and weights as `model.safetensors`, `params.safetensors` or
//! `pytorch_model.bin`. Weight names with or without the `bert.` prefix are
//! accepted. Surfaces are encoded in isolation, capped at
//! [`MAX_SEQUENCE_TOKENS`](super::MAX_SEQUENCE_TOKENS) subword tokens.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, IndexOp, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarBuilder, VarMap};
use ndarray::Array2;
use tokenizers::models::wordpiece::WordPiece;
use tokenizers::normalizers::bert::BertNormalizer;
use tokenizers::pre_tokenizers::bert::BertPreTokenizer;
use tokenizers::processors::bert::BertProcessing;
use tokenizers::{Model, PaddingParams, PaddingStrategy, Tokenizer, TruncationParams};

use super::bert::{BertConfig, BertModel};
use super::{Pooling, MAX_SEQUENCE_TOKENS};
use crate::error::{Error, Result};
use crate::optim::AdamWConfig;

pub const SAVED_WEIGHTS: &str = "params.safetensors";
const WEIGHT_CANDIDATES: [&str; 3] = [SAVED_WEIGHTS, "model.safetensors", "pytorch_model.bin"];

fn backend_err(e: impl std::fmt::Display) -> Error {
    Error::Backend(e.to_string())
}

pub struct ContextualEncoder {
    model: BertModel,
    varmap: VarMap,
    tokenizer: Tokenizer,
    config: BertConfig,
    config_json: String,
    device: Device,
    pending: Option<GradStore>,
    optimizer: Option<AdamW>,
}

struct Batch {
    ids: Tensor,
    type_ids: Tensor,
    mask: Tensor,
    truncated: usize,
}

impl ContextualEncoder {
    pub fn load(dir: &Path, lowercase: bool) -> Result<Self> {
        let config_path = dir.join("config.json");
        let config_json =
            std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        let config: BertConfig = serde_json::from_str(&config_json)?;
        let tokenizer = load_tokenizer(dir, lowercase)?;
        let device = Device::Cpu;

        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &device);
        let model = BertModel::load(vb, &config).map_err(backend_err)?;

        let weights_path = WEIGHT_CANDIDATES
            .iter()
            .map(|name| dir.join(name))
            .find(|p| p.exists())
            .ok_or_else(|| Error::integrity(dir, "no model weights found"))?;
        let tensors = read_weights(&weights_path, &device)?;
        {
            let vars = varmap.data().lock().expect("varmap lock poisoned");
            for (name, var) in vars.iter() {
                let tensor = stored_names(name)
                    .iter()
                    .find_map(|candidate| tensors.get(candidate))
                    .ok_or_else(|| {
                        Error::integrity(&weights_path, format!("missing tensor {name}"))
                    })?;
                let tensor = tensor.to_dtype(DType::F32).map_err(backend_err)?;
                var.set(&tensor)
                    .map_err(|e| Error::integrity(&weights_path, format!("tensor {name}: {e}")))?;
            }
        }

        Ok(Self {
            model,
            varmap,
            tokenizer,
            config,
            config_json,
            device,
            pending: None,
            optimizer: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.hidden_size
    }

    /// Writes config, tokenizer and current weights so [`ContextualEncoder::load`] can read them back.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let config_path = dir.join("config.json");
        std::fs::write(&config_path, &self.config_json).map_err(|e| Error::io(&config_path, e))?;
        let tokenizer_path = dir.join("tokenizer.json");
        self.tokenizer
            .save(&tokenizer_path, false)
            .map_err(backend_err)?;
        let weights_path = dir.join(SAVED_WEIGHTS);
        self.varmap.save(&weights_path).map_err(backend_err)?;
        Ok(vec![config_path, tokenizer_path, weights_path])
    }

    fn tokenize(&self, surfaces: &[&str]) -> Result<Batch> {
        let encodings = self
            .tokenizer
            .encode_batch(surfaces.to_vec(), true)
            .map_err(backend_err)?;
        let truncated = encodings
            .iter()
            .zip(surfaces)
            .filter(|(enc, surface)| {
                let cut = !enc.get_overflowing().is_empty();
                if cut {
                    log::warn!("surface {surface:?} truncated to {MAX_SEQUENCE_TOKENS} tokens");
                }
                cut
            })
            .count();
        let rows = encodings.len();
        let width = encodings.first().map(|e| e.get_ids().len()).unwrap_or(0);
        let gather = |f: fn(&tokenizers::Encoding) -> &[u32]| -> Result<Tensor> {
            let flat: Vec<u32> = encodings.iter().flat_map(|e| f(e).to_vec()).collect();
            Tensor::from_vec(flat, (rows, width), &self.device).map_err(backend_err)
        };
        Ok(Batch {
            ids: gather(|e| e.get_ids())?,
            type_ids: gather(|e| e.get_type_ids())?,
            mask: gather(|e| e.get_attention_mask())?,
            truncated,
        })
    }

    fn forward(&self, batch: &Batch, pooling: Pooling) -> Result<Tensor> {
        let hidden = self
            .model
            .forward(&batch.ids, &batch.type_ids, &batch.mask)
            .map_err(backend_err)?;
        let pooled = match pooling {
            Pooling::FirstToken => hidden.i((.., 0, ..)),
            Pooling::Mean => (|| {
                let mask = batch.mask.to_dtype(DType::F32)?.unsqueeze(2)?;
                let summed = hidden.broadcast_mul(&mask)?.sum(1)?;
                let counts = mask.sum(1)?;
                summed.broadcast_div(&counts)
            })(),
        };
        pooled.map_err(backend_err)
    }

    fn rows_of(tensor: &Tensor) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<Vec<f32>> = tensor.to_vec2().map_err(backend_err)?;
        Ok(rows
            .into_iter()
            .map(|r| r.into_iter().map(f64::from).collect())
            .collect())
    }

    /// Embeddings without gradient tracking, plus the number of truncated surfaces.
    pub fn embed(&self, surfaces: &[&str], pooling: Pooling) -> Result<(Vec<Vec<f64>>, usize)> {
        let batch = self.tokenize(surfaces)?;
        let pooled = self.forward(&batch, pooling)?.detach();
        Ok((Self::rows_of(&pooled)?, batch.truncated))
    }

    pub(crate) fn embed_tracked(
        &self,
        surfaces: &[&str],
        pooling: Pooling,
    ) -> Result<(Tensor, Vec<Vec<f64>>, usize)> {
        let batch = self.tokenize(surfaces)?;
        let pooled = self.forward(&batch, pooling)?;
        let rows = Self::rows_of(&pooled)?;
        Ok((pooled, rows, batch.truncated))
    }

    /// Backpropagates `sum(embeddings * upstream)`, whose parameter gradient is the
    /// vector-Jacobian product of the encoder with `upstream`.
    pub(crate) fn backward(&mut self, pooled: &Tensor, upstream: &Array2<f64>) -> Result<()> {
        let (n, d) = upstream.dim();
        let flat: Vec<f32> = upstream.iter().map(|&v| v as f32).collect();
        let upstream = Tensor::from_vec(flat, (n, d), &self.device).map_err(backend_err)?;
        let surrogate = (pooled * &upstream)
            .and_then(|t| t.sum_all())
            .map_err(backend_err)?;
        let grads = surrogate.backward().map_err(backend_err)?;
        match &mut self.pending {
            Some(existing) => existing.extend(grads).map_err(backend_err)?,
            None => self.pending = Some(grads),
        }
        Ok(())
    }

    pub(crate) fn zero_grad(&mut self) {
        self.pending = None;
    }

    pub(crate) fn step(&mut self, config: &AdamWConfig) -> Result<()> {
        let params = ParamsAdamW {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
        };
        let optimizer = match &mut self.optimizer {
            Some(opt) => {
                opt.set_params(params);
                opt
            }
            None => self
                .optimizer
                .insert(AdamW::new(self.varmap.all_vars(), params).map_err(backend_err)?),
        };
        if let Some(grads) = self.pending.take() {
            optimizer.step(&grads).map_err(backend_err)?;
        }
        Ok(())
    }

    /// All trainable variables keyed by name, for inspection in tests.
    pub fn variables(&self) -> HashMap<String, Var> {
        self.varmap
            .data()
            .lock()
            .expect("varmap lock poisoned")
            .clone()
    }
}

/// Names a parameter may carry in a checkpoint, including the legacy `gamma`/`beta` layer norm names.
fn stored_names(name: &str) -> Vec<String> {
    let legacy = name
        .strip_suffix("LayerNorm.weight")
        .map(|stem| format!("{stem}LayerNorm.gamma"))
        .or_else(|| {
            name.strip_suffix("LayerNorm.bias")
                .map(|stem| format!("{stem}LayerNorm.beta"))
        });
    [Some(name.to_owned()), legacy]
        .into_iter()
        .flatten()
        .flat_map(|n| [format!("bert.{n}"), n].into_iter().rev())
        .collect()
}

fn read_weights(path: &Path, device: &Device) -> Result<HashMap<String, Tensor>> {
    let is_pickle = path.extension().is_some_and(|ext| ext == "bin");
    if is_pickle {
        let entries = candle_core::pickle::read_all(path)
            .map_err(|e| Error::integrity(path, e.to_string()))?;
        Ok(entries.into_iter().collect())
    } else {
        candle_core::safetensors::load(path, device)
            .map_err(|e| Error::integrity(path, e.to_string()))
    }
}

fn load_tokenizer(dir: &Path, lowercase: bool) -> Result<Tokenizer> {
    let json = dir.join("tokenizer.json");
    let mut tokenizer = if json.exists() {
        Tokenizer::from_file(&json).map_err(backend_err)?
    } else {
        let vocab = dir.join("vocab.txt");
        let vocab_str = vocab
            .to_str()
            .ok_or_else(|| Error::Argument(format!("non UTF-8 path {}", vocab.display())))?;
        let wordpiece = WordPiece::from_file(vocab_str)
            .unk_token("[UNK]".into())
            .build()
            .map_err(backend_err)?;
        let lookup = |token: &str| {
            wordpiece
                .get_vocab()
                .get(token)
                .copied()
                .ok_or_else(|| Error::Backend(format!("vocabulary lacks {token}")))
        };
        let (cls, sep) = (lookup("[CLS]")?, lookup("[SEP]")?);
        let mut tokenizer = Tokenizer::new(wordpiece);
        tokenizer
            .with_normalizer(Some(BertNormalizer::new(true, true, None, lowercase)))
            .map_err(backend_err)?;
        tokenizer.with_pre_tokenizer(Some(BertPreTokenizer));
        tokenizer.with_post_processor(Some(BertProcessing::new(
            ("[SEP]".into(), sep),
            ("[CLS]".into(), cls),
        )));
        tokenizer
    };
    let pad_id = tokenizer.token_to_id("[PAD]").unwrap_or(0);
    tokenizer
        .with_truncation(Some(TruncationParams {
            max_length: MAX_SEQUENCE_TOKENS,
            ..Default::default()
        }))
        .map_err(backend_err)?;
    tokenizer.with_padding(Some(PaddingParams {
        strategy: PaddingStrategy::BatchLongest,
        pad_id,
        pad_token: "[PAD]".into(),
        ..Default::default()
    }));
    Ok(tokenizer)
}
