//! On-disk encoder checkpoints.
//!
//! A checkpoint directory holds `meta.txt` (one `key=value` per line), the
//! encoder parameters and, when written by the training loop, `state.json`.
//! The toy encoder stores `params.bin`: an 8-byte magic, a little-endian `u64`
//! parameter count, the weights as little-endian `f64`, then the optimizer
//! step count and both moment buffers. Contextual encoders store the model
//! directory layout read by [`ContextualEncoder::load`](crate::encoder::contextual::ContextualEncoder::load).
//! The SHA-256 of the parameter file is recorded in `meta.txt` and verified on restore.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::corpus::{read_text, write_text, SurfaceNormalization};
use crate::encoder::toy::{ToyConfig, ToyEncoder};
use crate::encoder::{EncoderHandle, EncoderKind, Pooling};
use crate::error::{Error, Result};
use crate::optim::AdamWState;
use crate::trainer::TrainState;

pub const META_FILE: &str = "meta.txt";
pub const STATE_FILE: &str = "state.json";
pub const TOY_PARAMS_FILE: &str = "params.bin";
const TOY_MAGIC: &[u8; 8] = b"EWUNTOY1";
const FORMAT_VERSION: &str = "1";

/// What the training loop records alongside the parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointInfo {
    pub normalization: SurfaceNormalization,
    pub corpus_fingerprint: String,
    pub epoch: usize,
}

/// Parsed `meta.txt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub kind: EncoderKind,
    pub dim: usize,
    pub pooling: Pooling,
    pub info: CheckpointInfo,
    pub parameter_file: String,
    pub parameter_sha256: String,
    pub toy: Option<ToyConfig>,
}

#[derive(Debug)]
pub struct Restored {
    pub encoder: EncoderHandle,
    pub state: Option<TrainState>,
    pub meta: CheckpointMeta,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digest of the encoder's current parameter values.
pub fn parameter_checksum(encoder: &EncoderHandle) -> Result<String> {
    let mut hasher = Sha256::new();
    if let Some(toy) = encoder.toy() {
        let c = toy.config();
        hasher.update(format!("toy:{}:{}:{}\n", c.dim, c.buckets, c.seed));
        for w in toy.weights() {
            hasher.update(w.to_le_bytes());
        }
        return Ok(hex::encode(hasher.finalize()));
    }
    #[cfg(feature = "contextual")]
    if let Some(model) = encoder.contextual() {
        let vars: BTreeMap<String, _> = model.variables().into_iter().collect();
        for (name, var) in vars {
            hasher.update(name.as_bytes());
            let flat = var
                .as_tensor()
                .flatten_all()
                .and_then(|t| t.to_dtype(candle_core::DType::F32))
                .and_then(|t| t.to_vec1::<f32>())
                .map_err(|e| Error::Backend(e.to_string()))?;
            for v in flat {
                hasher.update(v.to_le_bytes());
            }
        }
        return Ok(hex::encode(hasher.finalize()));
    }
    Err(Error::Argument(
        "encoder has no parameters to checksum".into(),
    ))
}

fn encode_toy(toy: &ToyEncoder) -> Vec<u8> {
    let weights = toy.weights();
    let opt = toy.optimizer_state();
    let mut out = Vec::with_capacity(24 + weights.len() * 24);
    out.extend_from_slice(TOY_MAGIC);
    out.extend_from_slice(&(weights.len() as u64).to_le_bytes());
    for w in weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.extend_from_slice(&opt.step.to_le_bytes());
    let moments = opt.m.len() == weights.len() && opt.v.len() == weights.len();
    out.push(u8::from(moments));
    if moments {
        for x in opt.m.iter().chain(&opt.v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct ByteReader<'a> {
    path: &'a Path,
    rest: &'a [u8],
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.rest.len() < n {
            return Err(Error::integrity(self.path, "truncated parameter file"));
        }
        let (head, rest) = self.rest.split_at(n);
        self.rest = rest;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn decode_toy(path: &Path, bytes: &[u8], config: ToyConfig) -> Result<ToyEncoder> {
    let bad = |message: &str| Error::integrity(path, message.to_owned());
    let mut reader = ByteReader { path, rest: bytes };
    if reader.take(8)? != TOY_MAGIC {
        return Err(bad("not a toy encoder parameter file"));
    }
    let count = reader.u64()? as usize;
    if count != config.dim * config.buckets {
        return Err(bad("parameter count does not match dim and buckets"));
    }
    let weights = reader.f64s(count)?;
    let step = reader.u64()?;
    let opt = if reader.take(1)?[0] == 1 {
        AdamWState {
            step,
            m: reader.f64s(count)?,
            v: reader.f64s(count)?,
        }
    } else {
        AdamWState::new(count)
    };
    if !reader.rest.is_empty() {
        return Err(bad("trailing bytes after parameters"));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(bad("non-finite parameter"));
    }
    let mut toy = ToyEncoder::from_weights(config, weights);
    toy.set_optimizer_state(opt);
    Ok(toy)
}

/// Writes parameters and metadata into `dir`, creating it if needed.
pub fn save(
    dir: &Path,
    encoder: &EncoderHandle,
    info: &CheckpointInfo,
    state: Option<&TrainState>,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut meta = vec![
        ("format", FORMAT_VERSION.to_owned()),
        ("kind", encoder.kind().as_str().to_owned()),
        ("dim", encoder.dim().to_string()),
        ("pooling", encoder.pooling().as_str().to_owned()),
        ("normalization", info.normalization.as_str().to_owned()),
        ("corpus_fingerprint", info.corpus_fingerprint.clone()),
        ("epoch", info.epoch.to_string()),
    ];
    let param_path = if let Some(toy) = encoder.toy() {
        let c = toy.config();
        meta.push(("buckets", c.buckets.to_string()));
        meta.push(("seed", c.seed.to_string()));
        let path = dir.join(TOY_PARAMS_FILE);
        std::fs::write(&path, encode_toy(toy)).map_err(|e| Error::io(&path, e))?;
        path
    } else {
        save_contextual(dir, encoder)?
    };
    let file_name = param_path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_owned();
    meta.push(("parameter_file", file_name));
    meta.push(("parameter_sha256", sha256_file(&param_path)?));
    let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    write_text(&dir.join(META_FILE), &text)?;
    if let Some(state) = state {
        write_state(dir, state)?;
    }
    Ok(dir.to_path_buf())
}

#[cfg(feature = "contextual")]
fn save_contextual(dir: &Path, encoder: &EncoderHandle) -> Result<PathBuf> {
    let model = encoder
        .contextual()
        .ok_or_else(|| Error::Argument("unsupported encoder backend".into()))?;
    model.save(dir)?;
    Ok(dir.join(crate::encoder::contextual::SAVED_WEIGHTS))
}

#[cfg(not(feature = "contextual"))]
fn save_contextual(_dir: &Path, _encoder: &EncoderHandle) -> Result<PathBuf> {
    Err(Error::Argument("unsupported encoder backend".into()))
}

/// Writes `state.json` into `dir`.
pub fn write_state(dir: &Path, state: &TrainState) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join(STATE_FILE), &serde_json::to_string_pretty(state)?)
}

pub fn read_state(dir: &Path) -> Result<Option<TrainState>> {
    let path = dir.join(STATE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    serde_json::from_str(&read_text(&path)?)
        .map(Some)
        .map_err(|e| Error::integrity(&path, e.to_string()))
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    if !path.exists() {
        return Err(Error::integrity(dir, "not a checkpoint directory"));
    }
    let text = read_text(&path)?;
    let fields: BTreeMap<&str, &str> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| l.split_once('='))
        .collect();
    let get = |key: &str| -> Result<&str> {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| Error::integrity(&path, format!("missing field {key}")))
    };
    let parse = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::integrity(&path, format!("invalid {key}")))
    };
    let invalid = |key: &str| Error::integrity(&path, format!("invalid {key}"));
    if get("format")? != FORMAT_VERSION {
        return Err(invalid("format"));
    }
    let kind: EncoderKind = get("kind")?.parse().map_err(|_| invalid("kind"))?;
    let dim = parse("dim")?;
    let toy = match kind {
        EncoderKind::ToyTrainable => Some(ToyConfig {
            dim,
            buckets: parse("buckets")?,
            seed: get("seed")?.parse().map_err(|_| invalid("seed"))?,
        }),
        EncoderKind::PretrainedContextual => None,
    };
    Ok(CheckpointMeta {
        kind,
        dim,
        pooling: get("pooling")?.parse().map_err(|_| invalid("pooling"))?,
        info: CheckpointInfo {
            normalization: get("normalization")?
                .parse()
                .map_err(|_| invalid("normalization"))?,
            corpus_fingerprint: get("corpus_fingerprint")?.to_owned(),
            epoch: parse("epoch")?,
        },
        parameter_file: get("parameter_file")?.to_owned(),
        parameter_sha256: get("parameter_sha256")?.to_owned(),
        toy,
    })
}

/// Loads a checkpoint written by [`save`], verifying the parameter checksum.
pub fn restore(dir: &Path) -> Result<Restored> {
    let meta = read_meta(dir)?;
    let param_path = dir.join(&meta.parameter_file);
    if !param_path.exists() {
        return Err(Error::integrity(&param_path, "parameter file is missing"));
    }
    if sha256_file(&param_path)? != meta.parameter_sha256 {
        return Err(Error::integrity(&param_path, "parameter checksum mismatch"));
    }
    let encoder = match meta.toy {
        Some(config) => {
            let bytes = std::fs::read(&param_path).map_err(|e| Error::io(&param_path, e))?;
            EncoderHandle::from_toy(decode_toy(&param_path, &bytes, config)?)
        }
        None => restore_contextual(dir, meta.pooling)?,
    };
    if encoder.dim() != meta.dim {
        return Err(Error::integrity(
            dir,
            "restored dimension differs from metadata",
        ));
    }
    Ok(Restored {
        encoder,
        state: read_state(dir)?,
        meta,
    })
}

#[cfg(feature = "contextual")]
fn restore_contextual(dir: &Path, pooling: Pooling) -> Result<EncoderHandle> {
    let model = crate::encoder::contextual::ContextualEncoder::load(dir, true)?;
    Ok(EncoderHandle::from_contextual(model, pooling))
}

#[cfg(not(feature = "contextual"))]
fn restore_contextual(dir: &Path, _pooling: Pooling) -> Result<EncoderHandle> {
    Err(Error::integrity(
        dir,
        "contextual checkpoints need the contextual feature",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::make_toy_encoder_with;
    use crate::optim::AdamWConfig;

    fn info() -> CheckpointInfo {
        CheckpointInfo {
            normalization: SurfaceNormalization::Minimal,
            corpus_fingerprint: "abc".into(),
            epoch: 3,
        }
    }

    fn small() -> EncoderHandle {
        make_toy_encoder_with(ToyConfig {
            dim: 4,
            buckets: 32,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn toy_round_trip_preserves_parameters_and_moments() {
        let dir = tempfile::tempdir().unwrap();
        let mut enc = small();
        let tracked = enc.encode_trainable(&["acme corp"]).unwrap();
        let upstream = ndarray::Array2::from_elem((1, 4), 0.5);
        enc.backward(tracked, &upstream).unwrap();
        enc.step(&AdamWConfig::default()).unwrap();

        save(dir.path(), &enc, &info(), None).unwrap();
        let restored = restore(dir.path()).unwrap();
        assert_eq!(restored.meta.info, info());
        assert!(restored.state.is_none());
        let (a, b) = (enc.toy().unwrap(), restored.encoder.toy().unwrap());
        assert_eq!(a.weights(), b.weights());
        assert_eq!(a.optimizer_state(), b.optimizer_state());
        assert_eq!(
            parameter_checksum(&enc).unwrap(),
            parameter_checksum(&restored.encoder).unwrap()
        );
    }

    #[test]
    fn corrupted_parameters_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &small(), &info(), None).unwrap();
        let path = dir.path().join(TOY_PARAMS_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[20] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(restore(dir.path()).unwrap_err().is_integrity_error());

        bytes.truncate(bytes.len() / 2);
        std::fs::write(&path, &bytes).unwrap();
        assert!(restore(dir.path()).unwrap_err().is_integrity_error());
    }

    #[test]
    fn truncated_file_with_matching_checksum_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &small(), &info(), None).unwrap();
        let path = dir.path().join(TOY_PARAMS_FILE);
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 8];
        assert!(decode_toy(&path, cut, small().toy().unwrap().config())
            .unwrap_err()
            .is_integrity_error());
    }

    #[test]
    fn missing_directory_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(restore(&dir.path().join("nope"))
            .unwrap_err()
            .is_integrity_error());
    }

    #[test]
    fn checksum_changes_with_parameters() {
        let mut enc = small();
        let before = parameter_checksum(&enc).unwrap();
        enc.toy_mut().unwrap().weights_mut()[0] += 1.0;
        assert_ne!(before, parameter_checksum(&enc).unwrap());
    }
}
