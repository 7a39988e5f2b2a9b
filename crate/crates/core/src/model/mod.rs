//! Compact transformer encoder with MLM and classification heads.
//! Forward and backward passes are written out explicitly so the
//! gradients can be verified against finite differences.

mod encoder;
pub mod ops;

pub use encoder::{
    forward_classify, forward_mlm, loss_and_grads, mlm_logits, predict_logits, Batch, Dropout,
    MaskedLogits,
};

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FORMAT: &str = "mathlm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocab_size {vocab_size}")]
    TokenIdOutOfRange { id: u32, vocab_size: usize },
    #[error("label {label} out of range for num_labels {num_labels}")]
    LabelOutOfRange { label: usize, num_labels: usize },
    #[error("batch contains no masked positions; MLM loss is undefined")]
    NoMaskedPositions,
    #[error("empty batch")]
    EmptyBatch,
    #[error("sequence length {found} does not match max_seq {expected}")]
    SequenceLength { found: usize, expected: usize },
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint format/version mismatch: found {found_format} v{found_version}, expected {expected_format} v{expected_version}")]
    VersionMismatch {
        found_format: String,
        found_version: u32,
        expected_format: String,
        expected_version: u32,
    },
    #[error("tensor {name}: header shape {found:?} does not match config shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("truncated payload: tensor {name} needs {needed} bytes, {available} available")]
    TruncatedPayload {
        name: String,
        needed: usize,
        available: usize,
    },
    #[error("checkpoint config does not match the expected config")]
    ConfigMismatch,
}

/// Architecture configuration. Desk-scale defaults; every dimension
/// is adjustable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_labels: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 30_522,
            max_seq: 128,
            hidden_dim: 128,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 512,
            num_labels: 2,
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut violations = Vec::new();
        if self.hidden_dim == 0 || self.hidden_dim % self.num_heads != 0 {
            violations.push(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.vocab_size < 5 {
            violations.push(format!("vocab_size {} must be >= 5", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            violations.push(format!(
                "dropout_rate {} must be in [0, 1)",
                self.dropout_rate
            ));
        }
        if self.max_seq < 2 {
            violations.push(format!("max_seq {} must be >= 2", self.max_seq));
        }
        if self.num_layers == 0 {
            violations.push("num_layers must be >= 1".into());
        }
        if self.ffn_dim == 0 {
            violations.push("ffn_dim must be >= 1".into());
        }
        if self.num_labels == 0 {
            violations.push("num_labels must be >= 1".into());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(violations.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub attn_norm: LayerNormParams<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
    pub ffn_norm: LayerNormParams<T>,
}

/// All trainable tensors. Also used for gradients and optimizer
/// moments, which share the shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTensors<T> {
    /// `[vocab_size, hidden]`; the MLM output layer is tied to this.
    pub token_embeddings: Tensor<T>,
    /// `[max_seq, hidden]` learned absolute positions.
    pub position_embeddings: Tensor<T>,
    pub embedding_norm: LayerNormParams<T>,
    pub layers: Vec<LayerParams<T>>,
    /// `[vocab_size]` bias of the tied MLM output layer.
    pub mlm_bias: Tensor<T>,
    /// `[hidden, num_labels]`.
    pub classifier_weight: Tensor<T>,
    pub classifier_bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: ParamTensors<T>,
}

impl<T: Scalar> ParamTensors<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden_dim;
        let zeros_ln = || LayerNormParams {
            gain: Tensor::zeros(&[h]),
            bias: Tensor::zeros(&[h]),
        };
        ParamTensors {
            token_embeddings: Tensor::zeros(&[config.vocab_size, h]),
            position_embeddings: Tensor::zeros(&[config.max_seq, h]),
            embedding_norm: zeros_ln(),
            layers: (0..config.num_layers)
                .map(|_| LayerParams {
                    wq: Tensor::zeros(&[h, h]),
                    bq: Tensor::zeros(&[h]),
                    wk: Tensor::zeros(&[h, h]),
                    bk: Tensor::zeros(&[h]),
                    wv: Tensor::zeros(&[h, h]),
                    bv: Tensor::zeros(&[h]),
                    wo: Tensor::zeros(&[h, h]),
                    bo: Tensor::zeros(&[h]),
                    attn_norm: zeros_ln(),
                    ffn_w1: Tensor::zeros(&[h, config.ffn_dim]),
                    ffn_b1: Tensor::zeros(&[config.ffn_dim]),
                    ffn_w2: Tensor::zeros(&[config.ffn_dim, h]),
                    ffn_b2: Tensor::zeros(&[h]),
                    ffn_norm: zeros_ln(),
                })
                .collect(),
            mlm_bias: Tensor::zeros(&[config.vocab_size]),
            classifier_weight: Tensor::zeros(&[h, config.num_labels]),
            classifier_bias: Tensor::zeros(&[config.num_labels]),
        }
    }

    /// Named tensors in a fixed, stable order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("token_embeddings".into(), &self.token_embeddings),
            ("position_embeddings".into(), &self.position_embeddings),
            ("embedding_norm.gain".into(), &self.embedding_norm.gain),
            ("embedding_norm.bias".into(), &self.embedding_norm.bias),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            let fields: [(&str, &Tensor<T>); 14] = [
                ("attention.query.weight", &layer.wq),
                ("attention.query.bias", &layer.bq),
                ("attention.key.weight", &layer.wk),
                ("attention.key.bias", &layer.bk),
                ("attention.value.weight", &layer.wv),
                ("attention.value.bias", &layer.bv),
                ("attention.output.weight", &layer.wo),
                ("attention.output.bias", &layer.bo),
                ("attention_norm.gain", &layer.attn_norm.gain),
                ("attention_norm.bias", &layer.attn_norm.bias),
                ("ffn.intermediate.weight", &layer.ffn_w1),
                ("ffn.intermediate.bias", &layer.ffn_b1),
                ("ffn.output.weight", &layer.ffn_w2),
                ("ffn.output.bias", &layer.ffn_b2),
            ];
            for (name, t) in fields {
                out.push((format!("layer.{i}.{name}"), t));
            }
            out.push((format!("layer.{i}.ffn_norm.gain"), &layer.ffn_norm.gain));
            out.push((format!("layer.{i}.ffn_norm.bias"), &layer.ffn_norm.bias));
        }
        out.push(("mlm_head.bias".into(), &self.mlm_bias));
        out.push(("classifier.weight".into(), &self.classifier_weight));
        out.push(("classifier.bias".into(), &self.classifier_bias));
        out
    }

    /// Mutable variant of [`Self::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("token_embeddings".into(), &mut self.token_embeddings),
            ("position_embeddings".into(), &mut self.position_embeddings),
            ("embedding_norm.gain".into(), &mut self.embedding_norm.gain),
            ("embedding_norm.bias".into(), &mut self.embedding_norm.bias),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let fields: [(&str, &mut Tensor<T>); 16] = [
                ("attention.query.weight", &mut layer.wq),
                ("attention.query.bias", &mut layer.bq),
                ("attention.key.weight", &mut layer.wk),
                ("attention.key.bias", &mut layer.bk),
                ("attention.value.weight", &mut layer.wv),
                ("attention.value.bias", &mut layer.bv),
                ("attention.output.weight", &mut layer.wo),
                ("attention.output.bias", &mut layer.bo),
                ("attention_norm.gain", &mut layer.attn_norm.gain),
                ("attention_norm.bias", &mut layer.attn_norm.bias),
                ("ffn.intermediate.weight", &mut layer.ffn_w1),
                ("ffn.intermediate.bias", &mut layer.ffn_b1),
                ("ffn.output.weight", &mut layer.ffn_w2),
                ("ffn.output.bias", &mut layer.ffn_b2),
                ("ffn_norm.gain", &mut layer.ffn_norm.gain),
                ("ffn_norm.bias", &mut layer.ffn_norm.bias),
            ];
            for (name, t) in fields {
                out.push((format!("layer.{i}.{name}"), t));
            }
        }
        out.push(("mlm_head.bias".into(), &mut self.mlm_bias));
        out.push(("classifier.weight".into(), &mut self.classifier_weight));
        out.push(("classifier.bias".into(), &mut self.classifier_bias));
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamTensors<U> {
        ParamTensors {
            token_embeddings: self.token_embeddings.cast(),
            position_embeddings: self.position_embeddings.cast(),
            embedding_norm: LayerNormParams {
                gain: self.embedding_norm.gain.cast(),
                bias: self.embedding_norm.bias.cast(),
            },
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: l.wq.cast(),
                    bq: l.bq.cast(),
                    wk: l.wk.cast(),
                    bk: l.bk.cast(),
                    wv: l.wv.cast(),
                    bv: l.bv.cast(),
                    wo: l.wo.cast(),
                    bo: l.bo.cast(),
                    attn_norm: LayerNormParams {
                        gain: l.attn_norm.gain.cast(),
                        bias: l.attn_norm.bias.cast(),
                    },
                    ffn_w1: l.ffn_w1.cast(),
                    ffn_b1: l.ffn_b1.cast(),
                    ffn_w2: l.ffn_w2.cast(),
                    ffn_b2: l.ffn_b2.cast(),
                    ffn_norm: LayerNormParams {
                        gain: l.ffn_norm.gain.cast(),
                        bias: l.ffn_norm.bias.cast(),
                    },
                })
                .collect(),
            mlm_bias: self.mlm_bias.cast(),
            classifier_weight: self.classifier_weight.cast(),
            classifier_bias: self.classifier_bias.cast(),
        }
    }
}

impl<T: Scalar> ModelState<T> {
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn has_non_finite(&self) -> bool {
        self.params
            .tensors()
            .iter()
            .any(|(_, t)| t.has_non_finite())
    }

    /// SHA-256 over config JSON plus all tensor payloads as f32
    /// little-endian bytes, stable across save/load.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(&self.config).expect("config serializes"));
        for (_, t) in self.params.tensors() {
            for v in t.iter() {
                hasher.update((v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Sample from a normal(0, std) truncated at two standard deviations.
fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        // Box-Muller from two uniforms; deterministic per rng stream.
        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.gen::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Weights from a truncated normal (std 0.02), layer-norm gains 1,
/// biases 0. Deterministic per seed.
pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelState<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamTensors::<T>::zeros(config);
    for (name, tensor) in params.tensors_mut() {
        if name.ends_with("norm.gain") {
            for v in tensor.data_mut() {
                *v = T::one();
            }
        } else if name.ends_with(".bias") || name.ends_with("norm.bias") {
            // zeros already
        } else {
            for v in tensor.data_mut() {
                *v = T::from_f64_lossy(truncated_normal(&mut rng, 0.02));
            }
        }
    }
    Ok(ModelState {
        config: config.clone(),
        params,
    })
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Versioned container: one-line JSON header, then raw little-endian
/// 32-bit float tensor payloads in header order.
pub fn save_checkpoint<T: Scalar>(
    state: &ModelState<T>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let tensors = state.params.tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: state.config.clone(),
        tensors: entries,
    };
    let io_err = |e: std::io::Error| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, &header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    w.write_all(b"\n").map_err(io_err)?;
    for (_, t) in &tensors {
        for v in t.iter() {
            w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())
                .map_err(io_err)?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState<f32>, CheckpointError> {
    let io_err = |e: std::io::Error| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut reader = std::io::BufReader::new(file);

    let mut header_bytes = Vec::new();
    {
        use std::io::BufRead;
        reader.read_until(b'\n', &mut header_bytes).map_err(io_err)?;
    }
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found_format: header.format,
            found_version: header.version,
            expected_format: CHECKPOINT_FORMAT.to_string(),
            expected_version: CHECKPOINT_VERSION,
        });
    }

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(io_err)?;

    let mut params = ParamTensors::<f32>::zeros(&header.config);
    let expected = params.tensors().len();
    if header.tensors.len() != expected {
        return Err(CheckpointError::Header(format!(
            "expected {expected} tensor entries, found {}",
            header.tensors.len()
        )));
    }
    for ((name, tensor), entry) in params.tensors_mut().into_iter().zip(header.tensors.iter()) {
        if entry.name != name || entry.shape != tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: entry.name.clone(),
                expected: tensor.shape().to_vec(),
                found: entry.shape.clone(),
            });
        }
        let start = entry.offset * 4;
        let end = start + entry.len * 4;
        if end > payload.len() {
            return Err(CheckpointError::TruncatedPayload {
                name: entry.name.clone(),
                needed: end,
                available: payload.len(),
            });
        }
        for (i, v) in tensor.data_mut().iter_mut().enumerate() {
            let b = &payload[start + i * 4..start + i * 4 + 4];
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    Ok(ModelState {
        config: header.config,
        params,
    })
}

/// Load and verify the checkpoint was produced by `expected` config.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &ModelConfig,
) -> Result<ModelState<f32>, CheckpointError> {
    let state = load_checkpoint(path)?;
    if &state.config != expected {
        return Err(CheckpointError::ConfigMismatch);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            max_seq: 8,
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            num_labels: 3,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let config = tiny_config();
        let a = init_model::<f32>(&config, 7).unwrap();
        let b = init_model::<f32>(&config, 7).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = init_model::<f32>(&config, 8).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn init_layer_norm_gains_are_one() {
        let state = init_model::<f32>(&tiny_config(), 1).unwrap();
        assert!(state
            .params
            .embedding_norm
            .gain
            .iter()
            .all(|&v| v == 1.0));
        for l in &state.params.layers {
            assert!(l.attn_norm.gain.iter().all(|&v| v == 1.0));
            assert!(l.ffn_norm.gain.iter().all(|&v| v == 1.0));
            assert!(l.bq.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_weight_mean_near_zero() {
        // >= 1e5 samples; mean within 3 standard errors of 0.
        // std of truncated normal(0.02, cut 2sigma) < 0.02.
        let config = ModelConfig {
            vocab_size: 2000,
            hidden_dim: 64,
            ..tiny_config()
        };
        let state = init_model::<f64>(&config, 3).unwrap();
        let emb = &state.params.token_embeddings;
        let n = emb.len() as f64;
        assert!(n >= 1e5);
        let mean: f64 = emb.iter().sum::<f64>() / n;
        let se = 0.02 / n.sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} exceeds 3 se {se}");
    }

    #[test]
    fn init_rejects_invalid_config() {
        let mut config = tiny_config();
        config.hidden_dim = 9; // not divisible by 2 heads
        let err = init_model::<f32>(&config, 0).unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let state = init_model::<f32>(&tiny_config(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(state.content_hash(), loaded.content_hash());
        assert_eq!(state, loaded);
    }

    #[test]
    fn checkpoint_wrong_shape_errors() {
        let state = init_model::<f32>(&tiny_config(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        // corrupt the header: change a shape
        let bytes = std::fs::read(&path).unwrap();
        let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header = String::from_utf8(bytes[..newline].to_vec()).unwrap();
        let bad = header.replace("\"shape\":[11,8]", "\"shape\":[12,8]");
        assert_ne!(header, bad);
        let mut out = bad.into_bytes();
        out.extend_from_slice(&bytes[newline..]);
        std::fs::write(&path, out).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            CheckpointError::ShapeMismatch { .. }
        ));
    }

    #[test]
    fn checkpoint_version_mismatch_errors() {
        let state = init_model::<f32>(&tiny_config(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes).replace("\"version\":1", "\"version\":9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            CheckpointError::VersionMismatch { .. }
        ));
    }

    #[test]
    fn checkpoint_truncated_payload_errors() {
        let state = init_model::<f32>(&tiny_config(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            CheckpointError::TruncatedPayload { .. }
        ));
    }

    #[test]
    fn checkpoint_config_mismatch_refused() {
        let state = init_model::<f32>(&tiny_config(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let mut other = tiny_config();
        other.num_labels = 7;
        assert!(matches!(
            load_checkpoint_expecting(&path, &other).unwrap_err(),
            CheckpointError::ConfigMismatch
        ));
        assert!(load_checkpoint_expecting(&path, &tiny_config()).is_ok());
    }

    #[test]
    fn tensors_and_tensors_mut_agree_on_order() {
        let mut state = init_model::<f32>(&tiny_config(), 5).unwrap();
        let names: Vec<String> = state.params.tensors().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<String> = state
            .params
            .tensors_mut()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(names, names_mut);
    }
}
