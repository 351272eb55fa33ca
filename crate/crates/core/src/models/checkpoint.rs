//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header,
//! zero padding to a 64-byte boundary, then the payload. Every tensor in the
//! payload starts on a 64-byte boundary (offsets are relative to the payload
//! start) and is stored as raw little-endian scalars.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::Model;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::optim::{Moments, Optimizer, OptimizerConfig};
use crate::{Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"KSNCKPT\0";
const ALIGN: usize = 64;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    len: usize,
    m_offset: u64,
    v_offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: OptimizerConfig,
    step: u64,
    moments: Vec<MomentEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    config: ModelConfig,
    info: CheckpointInfo,
    payload_len: u64,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
}

/// Training progress stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointInfo {
    /// Completed epochs.
    pub epoch: u64,
    /// Global seed of the run.
    pub seed: u64,
    /// Completed optimizer steps; the next step's random streams are keyed by it.
    pub step: u64,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<S: Scalar> {
    pub model: Model<S>,
    pub optimizer: Option<Optimizer<S>>,
    pub info: CheckpointInfo,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn pad_to(buf: &mut Vec<u8>, align: usize) {
    buf.resize(buf.len().div_ceil(align) * align, 0);
}

fn push_values<S: Scalar>(payload: &mut Vec<u8>, values: &[S]) -> u64 {
    pad_to(payload, ALIGN);
    let offset = payload.len() as u64;
    payload.reserve(values.len() * S::BYTES);
    values.iter().for_each(|v| v.write_le(payload));
    offset
}

/// Model values by checkpoint name: parameters then batch-norm buffers.
fn model_tensors<S: Scalar>(model: &Model<S>) -> Vec<(String, Vec<usize>, Vec<S>)> {
    let mut out: Vec<_> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.to_vec()))
        .collect();
    for (n, stats) in model.bn_stats() {
        let c = stats.channels();
        out.push((format!("{n}.running_mean"), vec![c], stats.running_mean()));
        out.push((format!("{n}.running_var"), vec![c], stats.running_var()));
    }
    out
}

/// Writes `model` (and optimizer state) to `path`, replacing any existing file.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &Model<S>,
    optimizer: Option<&Optimizer<S>>,
    info: &CheckpointInfo,
) -> Result<()> {
    let mut payload = Vec::new();
    let tensors = model_tensors(model)
        .into_iter()
        .map(|(name, shape, values)| TensorEntry {
            offset: push_values(&mut payload, &values),
            name,
            shape,
        })
        .collect();
    let optimizer = optimizer.map(|o| OptimizerHeader {
        config: o.config,
        step: o.step,
        moments: o
            .moments
            .iter()
            .map(|(name, st)| MomentEntry {
                name: name.clone(),
                len: st.m.len(),
                m_offset: push_values(&mut payload, &st.m),
                v_offset: push_values(&mut payload, &st.v),
            })
            .collect(),
    });
    let header = Header {
        version: CHECKPOINT_VERSION,
        dtype: S::DTYPE.into(),
        config: model.config,
        info: info.clone(),
        payload_len: payload.len() as u64,
        tensors,
        optimizer,
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(format!("header encoding: {e}")))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + ALIGN + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    pad_to(&mut bytes, ALIGN);
    bytes.extend_from_slice(&payload);

    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Payload<'a>(&'a [u8]);

impl Payload<'_> {
    fn values<S: Scalar>(&self, what: &str, offset: u64, len: usize) -> Result<Vec<S>> {
        let start =
            usize::try_from(offset).map_err(|_| corrupt(format!("{what}: offset overflow")))?;
        let end = len
            .checked_mul(S::BYTES)
            .and_then(|n| n.checked_add(start))
            .filter(|&e| e <= self.0.len())
            .ok_or_else(|| {
                corrupt(format!(
                    "{what}: data range past end of payload ({} bytes)",
                    self.0.len()
                ))
            })?;
        Ok(self.0[start..end]
            .chunks_exact(S::BYTES)
            .map(S::read_le)
            .collect())
    }
}

/// Reads a checkpoint written by [`save_checkpoint`] with the same scalar type.
pub fn read_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt(format!(
            "{}: missing checkpoint magic",
            path.display()
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let hend = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header extends past end of file"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..hend]).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "version {} (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    if header.dtype != S::DTYPE {
        return Err(corrupt(format!(
            "dtype {} (expected {})",
            header.dtype,
            S::DTYPE
        )));
    }
    let pstart = hend.div_ceil(ALIGN) * ALIGN;
    let plen = header.payload_len as usize;
    if pstart.checked_add(plen).is_none_or(|e| e != bytes.len()) {
        return Err(corrupt(format!(
            "payload is {} bytes, header declares {plen}",
            bytes.len().saturating_sub(pstart)
        )));
    }
    let payload = Payload(&bytes[pstart..]);

    let mut model =
        Model::<S>::build(header.config, 0).map_err(|e| corrupt(format!("config: {e}")))?;
    let mut stored: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    for e in &header.tensors {
        if stored.insert(&e.name, e).is_some() {
            return Err(corrupt(format!("duplicate tensor `{}`", e.name)));
        }
    }
    let expected: Vec<(String, Vec<usize>, Vec<S>)> = model_tensors(&model);
    let expected_names: BTreeSet<&str> = expected.iter().map(|(n, _, _)| n.as_str()).collect();
    if let Some(extra) = stored.keys().find(|n| !expected_names.contains(*n)) {
        return Err(corrupt(format!("unexpected tensor `{extra}`")));
    }
    let mut loaded: BTreeMap<String, Vec<S>> = BTreeMap::new();
    for (name, shape, _) in &expected {
        let e = stored
            .get(name.as_str())
            .ok_or_else(|| corrupt(format!("missing tensor `{name}`")))?;
        if &e.shape != shape {
            return Err(corrupt(format!(
                "tensor `{name}` has shape {:?}, model expects {shape:?}",
                e.shape
            )));
        }
        loaded.insert(
            name.clone(),
            payload.values(name, e.offset, shape.iter().product())?,
        );
    }
    for (name, t) in model.named_params_mut() {
        let values = loaded.remove(&name).expect("checked above");
        *t = Tensor::param(values, t.shape())?;
    }
    for (name, stats) in model.bn_stats() {
        let mean = loaded
            .remove(&format!("{name}.running_mean"))
            .expect("checked above");
        let var = loaded
            .remove(&format!("{name}.running_var"))
            .expect("checked above");
        stats.set(mean, var)?;
    }

    let optimizer = match header.optimizer {
        None => None,
        Some(h) => {
            let mut opt = Optimizer::new(h.config);
            opt.step = h.step;
            for m in h.moments {
                let st = Moments {
                    m: payload.values(&m.name, m.m_offset, m.len)?,
                    v: payload.values(&m.name, m.v_offset, m.len)?,
                };
                opt.moments.insert(m.name, st);
            }
            Some(opt)
        }
    };
    Ok(Checkpoint {
        model,
        optimizer,
        info: header.info,
    })
}

/// Loads only the model from a checkpoint.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Model<S>> {
    Ok(read_checkpoint(path)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{predict_posterior_mean, FactoryMode};
    use crate::RngStream;

    fn trained_ish() -> (Model<f32>, Optimizer<f32>) {
        let mut m = Model::<f32>::build(
            ModelConfig::small_cnn(3, 1, 8, FactoryMode::Ksn { delta: 0.5 }),
            4,
        )
        .unwrap();
        let x = Tensor::uniform(&[4, 1, 8, 8], 1.0, &mut RngStream::from_seed(1));
        let (y, _) = m
            .forward(&x, &mut super::super::ForwardCtx::posterior_mean())
            .unwrap();
        y.sum().backward().unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::adam_default());
        m.apply_optimizer(&mut opt).unwrap();
        (m, opt)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (m, opt) = trained_ish();
        let info = CheckpointInfo {
            epoch: 3,
            seed: 9,
            step: 12,
            meta: serde_json::json!({"note": "x"}),
        };
        save_checkpoint(&path, &m, Some(&opt), &info).unwrap();
        let ck = read_checkpoint::<f32>(&path).unwrap();
        assert_eq!(ck.info, info);
        let x = Tensor::uniform(&[3, 1, 8, 8], 1.0, &mut RngStream::from_seed(2));
        let a = predict_posterior_mean(&m, &x).unwrap();
        let b = predict_posterior_mean(&ck.model, &x).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(m.count_params().1, ck.model.count_params().1);
        let o = ck.optimizer.unwrap();
        assert_eq!(o.step, 1);
        assert_eq!(o.moments, opt.moments);
    }

    #[test]
    fn tensors_are_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (m, _) = trained_ish();
        save_checkpoint(&path, &m, None, &CheckpointInfo::default()).unwrap();
        let bytes = fs::read(&path).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        let pstart = (16 + hlen).div_ceil(64) * 64;
        assert_eq!(pstart % 64, 0);
        assert!(header.tensors.iter().all(|t| t.offset % 64 == 0));
        let first = &header.tensors[0];
        let v = f32::read_le(&bytes[pstart + first.offset as usize..]);
        assert_eq!(v, m.named_params()[0].1.data()[0]);
    }

    #[test]
    fn damaged_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (m, _) = trained_ish();
        save_checkpoint(&path, &m, None, &CheckpointInfo::default()).unwrap();
        let bytes = fs::read(&path).unwrap();

        let bad = dir.path().join("bad.ckpt");
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&bad, &bytes[..cut]).unwrap();
            assert!(
                matches!(
                    read_checkpoint::<f32>(&bad),
                    Err(Error::CorruptCheckpoint(_))
                ),
                "cut {cut}"
            );
        }
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        fs::write(&bad, &wrong).unwrap();
        assert!(matches!(
            read_checkpoint::<f32>(&bad),
            Err(Error::CorruptCheckpoint(_))
        ));
        assert!(matches!(
            read_checkpoint::<f64>(&path),
            Err(Error::CorruptCheckpoint(_))
        ));

        rewrite_header(&path, |h| h["version"] = serde_json::json!(7));
        let err = read_checkpoint::<f32>(&path).unwrap_err();
        assert!(
            matches!(err, Error::CorruptCheckpoint(ref m) if m.contains("version")),
            "{err}"
        );
    }

    fn rewrite_header(path: &Path, edit: impl FnOnce(&mut serde_json::Value)) {
        let bytes = fs::read(path).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        edit(&mut header);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        pad_to(&mut out, ALIGN);
        out.extend_from_slice(&bytes[(16 + hlen).div_ceil(64) * 64..]);
        fs::write(path, out).unwrap();
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (m, _) = trained_ish();
        save_checkpoint(&path, &m, None, &CheckpointInfo::default()).unwrap();
        rewrite_header(&path, |h| h["config"]["num_classes"] = serde_json::json!(4));
        let err = read_checkpoint::<f32>(&path).unwrap_err();
        assert!(
            matches!(err, Error::CorruptCheckpoint(ref m) if m.contains("shape")),
            "{err}"
        );
    }
}
