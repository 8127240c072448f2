//! Single-file checkpoint archive.
//!
//! Layout: 8-byte magic, a little-endian `u64` header length, a JSON header
//! (free-form `meta` plus an ordered array manifest of name/dtype/shape),
//! then the raw little-endian array payloads concatenated in manifest order.
//! Training state is written as `f8` so a resumed run is bit-identical; the
//! reader also accepts `f4` payloads.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use ndarray::IxDyn;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{init_model, ModelConfig, ModelError, ModelState};
use crate::autodiff::Tensor;

const MAGIC: &[u8; 8] = b"ENAETCP1";

#[derive(Debug, Clone)]
pub struct ArchiveEntry {
    pub name: String,
    pub data: Tensor,
}

#[derive(Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ArrayInfo>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_archive(
    path: &Path,
    meta: &serde_json::Value,
    entries: &[ArchiveEntry],
) -> Result<(), ModelError> {
    let header = Header {
        meta: meta.clone(),
        arrays: entries
            .iter()
            .map(|e| ArrayInfo {
                name: e.name.clone(),
                dtype: "f8".into(),
                shape: e.data.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| bad(format!("header encode: {e}")))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for entry in entries {
        for &v in entry.data.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<(serde_json::Value, Vec<ArchiveEntry>), ModelError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint archive (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16 + header_len;
    if bytes.len() < payload_start {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| bad(format!("header decode: {e}")))?;
    let mut offset = payload_start;
    let mut entries = Vec::with_capacity(header.arrays.len());
    for info in &header.arrays {
        let n: usize = info.shape.iter().product();
        let elem = match info.dtype.as_str() {
            "f8" => 8,
            "f4" => 4,
            other => return Err(bad(format!("array {}: unknown dtype {other:?}", info.name))),
        };
        let end = offset + n * elem;
        if bytes.len() < end {
            return Err(bad(format!("array {}: truncated payload", info.name)));
        }
        let raw = &bytes[offset..end];
        let data: Vec<f64> = match elem {
            8 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            _ => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        let data = Tensor::from_shape_vec(IxDyn(&info.shape), data)
            .map_err(|e| bad(format!("array {}: {e}", info.name)))?;
        entries.push(ArchiveEntry { name: info.name.clone(), data });
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes after payload", bytes.len() - offset)));
    }
    Ok((header.meta, entries))
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stable hash of the model configuration; a checkpoint refuses to load
/// into a model built from a different config.
pub fn config_hash(config: &ModelConfig) -> u64 {
    fnv1a64(serde_json::to_string(config).expect("config serializes").as_bytes())
}

impl ModelState {
    /// Writes the full training state: parameters, teacher copies, batchnorm
    /// buffers, optimizer slots, counters, plus caller metadata (the trainer
    /// stores its RNG streams and schedule position there).
    pub fn save_checkpoint(
        &self,
        path: &Path,
        extra: serde_json::Value,
    ) -> Result<(), ModelError> {
        let mut entries = Vec::new();
        let push = |entries: &mut Vec<ArchiveEntry>, name: String, data: &Tensor| {
            entries.push(ArchiveEntry { name, data: data.clone() });
        };
        for (name, value) in self.params.names.iter().zip(&self.params.values) {
            push(&mut entries, name.clone(), value);
        }
        for (name, value) in self.params.names.iter().zip(&self.teacher) {
            push(&mut entries, format!("teacher/{name}"), value);
        }
        for (name, value) in self.buffers.names.iter().zip(&self.buffers.values) {
            push(&mut entries, format!("buffer/{name}"), value);
        }
        for (slot, values) in [
            ("m", &self.opt.adam_m),
            ("v", &self.opt.adam_v),
            ("mom", &self.opt.momentum),
        ] {
            for (name, value) in self.params.names.iter().zip(values) {
                push(&mut entries, format!("opt/{slot}/{name}"), value);
            }
        }
        let meta = serde_json::json!({
            "config": self.config,
            "config_hash": config_hash(&self.config),
            "step_counter": self.step_counter,
            "adam_steps": self.opt.adam_steps,
            "extra": extra,
        });
        write_archive(path, &meta, &entries)
    }

    /// Restores a model saved by [`save_checkpoint`](Self::save_checkpoint),
    /// returning it with the caller metadata.
    pub fn load_checkpoint(path: &Path) -> Result<(ModelState, serde_json::Value), ModelError> {
        let (meta, entries) = read_archive(path)?;
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| bad(format!("config decode: {e}")))?;
        let stored_hash = meta["config_hash"]
            .as_u64()
            .ok_or_else(|| bad("missing config_hash"))?;
        if stored_hash != config_hash(&config) {
            return Err(bad("config_hash mismatch"));
        }
        // Rebuild the network skeleton for the layer indices, then overwrite
        // every tensor from the archive.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut state = init_model(&config, &mut rng)?;
        let mut by_name: HashMap<&str, &Tensor> =
            entries.iter().map(|e| (e.name.as_str(), &e.data)).collect();
        let mut take = |name: &str, expect: &[usize]| -> Result<Tensor, ModelError> {
            let data = by_name
                .remove(name)
                .ok_or_else(|| bad(format!("missing array {name}")))?;
            if data.shape() != expect {
                return Err(bad(format!(
                    "array {name}: shape {:?}, expected {expect:?}",
                    data.shape()
                )));
            }
            Ok(data.clone())
        };
        let names = state.params.names.clone();
        for (id, name) in names.iter().enumerate() {
            let expect = state.params.values[id].shape().to_vec();
            state.params.values[id] = Rc::new(take(name, &expect)?);
            if id < state.net.teacher_len {
                state.teacher[id] = Rc::new(take(&format!("teacher/{name}"), &expect)?);
            }
            state.opt.adam_m[id] = take(&format!("opt/m/{name}"), &expect)?;
            state.opt.adam_v[id] = take(&format!("opt/v/{name}"), &expect)?;
            state.opt.momentum[id] = take(&format!("opt/mom/{name}"), &expect)?;
        }
        let buffer_names = state.buffers.names.clone();
        for (id, name) in buffer_names.iter().enumerate() {
            let expect = state.buffers.values[id].shape().to_vec();
            state.buffers.values[id] = take(&format!("buffer/{name}"), &expect)?;
        }
        if let Some((name, _)) = by_name.iter().next() {
            return Err(bad(format!("unexpected array {name}")));
        }
        state.step_counter = meta["step_counter"]
            .as_u64()
            .ok_or_else(|| bad("missing step_counter"))?;
        state.opt.adam_steps =
            meta["adam_steps"].as_u64().ok_or_else(|| bad("missing adam_steps"))?;
        let extra = meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        Ok((state, extra))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_channels: 1,
            num_classes: 2,
            image_hw: (8, 8),
            stem_stride: 1,
            widths: [2, 2, 3, 4, 4],
        }
    }

    #[test]
    fn archive_roundtrip_preserves_meta_and_arrays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let meta = serde_json::json!({"k": [1, 2, 3], "s": "x"});
        let entries = vec![
            ArchiveEntry { name: "w".into(), data: array![[1.5, -2.25], [0.0, 3.125]].into_dyn() },
            ArchiveEntry { name: "b".into(), data: array![0.1, 0.2, 0.3].into_dyn() },
        ];
        write_archive(&path, &meta, &entries).unwrap();
        let (meta2, entries2) = read_archive(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(entries2.len(), 2);
        for (a, b) in entries.iter().zip(&entries2) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn reader_accepts_f4_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f4.ckpt");
        let header = serde_json::json!({
            "meta": null,
            "arrays": [{"name": "x", "dtype": "f4", "shape": [2]}],
        });
        let header_bytes = serde_json::to_vec(&header).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"ENAETCP1");
        bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_bytes);
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-0.25f32).to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let (_, entries) = read_archive(&path).unwrap();
        assert_eq!(entries[0].data, array![1.5, -0.25].into_dyn());
    }

    #[test]
    fn malformed_archives_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad_magic = dir.path().join("bad.ckpt");
        std::fs::write(&bad_magic, b"NOTANARCHIVE....").unwrap();
        assert!(read_archive(&bad_magic).is_err());

        let truncated = dir.path().join("trunc.ckpt");
        let meta = serde_json::json!(null);
        let entries =
            vec![ArchiveEntry { name: "w".into(), data: array![1.0, 2.0, 3.0].into_dyn() }];
        write_archive(&truncated, &meta, &entries).unwrap();
        let all = std::fs::read(&truncated).unwrap();
        std::fs::write(&truncated, &all[..all.len() - 5]).unwrap();
        assert!(read_archive(&truncated).is_err());
    }

    #[test]
    fn model_checkpoint_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut state = init_model(&tiny_config(), &mut rng).unwrap();
        // Make every slot distinguishable from a fresh init.
        state.step_counter = 17;
        state.opt.adam_steps = 9;
        for t in &mut state.opt.adam_m {
            t.fill(0.125);
        }
        for t in &mut state.buffers.values {
            t.mapv_inplace(|v| v + 0.0625);
        }
        *state.params.value_mut(0) += 1.0;
        let extra = serde_json::json!({"epoch": 3});
        state.save_checkpoint(&path, extra.clone()).unwrap();

        let (loaded, extra2) = ModelState::load_checkpoint(&path).unwrap();
        assert_eq!(extra, extra2);
        assert_eq!(loaded.step_counter, 17);
        assert_eq!(loaded.opt.adam_steps, 9);
        assert_eq!(loaded.config, state.config);
        for (a, b) in state.params.values.iter().zip(&loaded.params.values) {
            assert_eq!(a.as_ref(), b.as_ref());
        }
        for (a, b) in state.teacher.iter().zip(&loaded.teacher) {
            assert_eq!(a.as_ref(), b.as_ref());
        }
        assert_eq!(state.buffers.values, loaded.buffers.values);
        assert_eq!(state.opt.adam_m, loaded.opt.adam_m);
        assert_eq!(state.opt.adam_v, loaded.opt.adam_v);
        assert_eq!(state.opt.momentum, loaded.opt.momentum);
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let state = init_model(&tiny_config(), &mut rng).unwrap();
        state.save_checkpoint(&path, serde_json::Value::Null).unwrap();

        // Corrupt the stored hash; the loader must notice.
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value =
            serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        header["meta"]["config_hash"] = serde_json::json!(12345);
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..8]);
        out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[16 + header_len..]);
        std::fs::write(&path, out).unwrap();
        let err = ModelState::load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("config_hash"));
    }
}
