//! Checkpoint directories: `manifest.json` plus a flat little-endian f32 payload in `params.bin`.
//!
//! Method tensors are always stored. Backbone tensors are stored only for
//! fine-tuning; other checkpoints record a digest of the frozen backbone they
//! were trained against and must be loaded onto that same backbone.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ArchitectureDims, Seq2SeqModel};
use crate::peft::{AttachedModel, PeftConfig};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Backbone,
    Method,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: TensorGroup,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub dims: ArchitectureDims,
    pub peft: PeftConfig,
    pub vocab_hash: String,
    pub step: usize,
    pub dev_bleu: f64,
    pub backbone_digest: String,
    pub payload_sha256: String,
    pub payload_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointManifest {
    /// Load error unless this checkpoint was written for `dims` and `vocab_hash`.
    pub fn check_compatible(&self, dims: &ArchitectureDims, vocab_hash: &str) -> Result<()> {
        if &self.dims != dims {
            return Err(Error::Load(format!("checkpoint dims {:?} differ from model dims {:?}", self.dims, dims)));
        }
        if self.vocab_hash != vocab_hash {
            return Err(Error::Load("checkpoint was written with a different vocabulary".into()));
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Corruption(format!("unreadable manifest: {e}")))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_f32<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for v in t.data() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
}

/// SHA-256 over the names, shapes and f32 values of a store.
pub fn store_digest<T: Scalar>(store: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for (name, t) in store.iter() {
        h.update(name.as_bytes());
        h.update(format!("{:?}", t.shape()).as_bytes());
        buf.clear();
        push_f32(&mut buf, t);
        h.update(&buf);
    }
    hex(&h.finalize())
}

/// Writes `model` into `dir` (created if missing). Values are stored as f32.
pub fn save_checkpoint<T: Scalar>(model: &AttachedModel<T>, vocab_hash: &str, step: usize, dev_bleu: f64, dir: &Path) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut add = |group: TensorGroup, store: &ParamStore<T>| {
        for (name, t) in store.iter() {
            tensors.push(TensorEntry { name: name.to_string(), group, shape: t.shape().to_vec(), offset: payload.len() as u64 });
            push_f32(&mut payload, t);
        }
    };
    if *model.config() == PeftConfig::FineTune {
        add(TensorGroup::Backbone, model.backbone().params());
    }
    add(TensorGroup::Method, model.method_params());
    let manifest = CheckpointManifest {
        format: FORMAT_VERSION,
        dims: model.dims().clone(),
        peft: model.config().clone(),
        vocab_hash: vocab_hash.to_string(),
        step,
        dev_bleu,
        backbone_digest: store_digest(model.backbone().params()),
        payload_sha256: hex(&Sha256::digest(&payload)),
        payload_bytes: payload.len() as u64,
        tensors,
    };
    let bin = dir.join(PAYLOAD_FILE);
    std::fs::write(&bin, &payload).map_err(|e| Error::io(&bin, e))?;
    let man = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&man, text).map_err(|e| Error::io(&man, e))?;
    Ok(manifest)
}

/// Rebuilds the attached model stored in `dir`. Method-only checkpoints need
/// `base`, the backbone they were trained on; fine-tuning checkpoints ignore it.
pub fn load_checkpoint<T: Scalar>(dir: &Path, base: Option<Seq2SeqModel<T>>) -> Result<(AttachedModel<T>, CheckpointManifest)> {
    let manifest = CheckpointManifest::read(dir)?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Load(format!("unsupported checkpoint format {}", manifest.format)));
    }
    let bin = dir.join(PAYLOAD_FILE);
    let payload = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(Error::Corruption(format!("payload holds {} bytes, manifest says {}", payload.len(), manifest.payload_bytes)));
    }
    if hex(&Sha256::digest(&payload)) != manifest.payload_sha256 {
        return Err(Error::Corruption("payload checksum mismatch".into()));
    }
    let mut backbone_store = ParamStore::new();
    let mut method = ParamStore::new();
    let mut expected_offset = 0u64;
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.offset + 4 * n as u64 > payload.len() as u64 {
            return Err(Error::Corruption(format!("tensor {} lies outside the payload layout", e.name)));
        }
        let start = e.offset as usize;
        let data = payload[start..start + 4 * n]
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
            .collect();
        expected_offset += 4 * n as u64;
        let t = Tensor::new(&e.shape, data)?;
        match e.group {
            TensorGroup::Backbone => backbone_store.insert(e.name.clone(), t)?,
            TensorGroup::Method => method.insert(e.name.clone(), t)?,
        }
    }
    if expected_offset != payload.len() as u64 {
        return Err(Error::Corruption("payload has trailing bytes".into()));
    }
    let fine_tune = manifest.peft == PeftConfig::FineTune;
    let backbone = if fine_tune {
        Seq2SeqModel::from_params(manifest.dims.clone(), backbone_store).map_err(|e| Error::Load(e.to_string()))?
    } else {
        if !backbone_store.is_empty() {
            return Err(Error::Corruption("method-only checkpoint carries backbone tensors".into()));
        }
        let base = base.ok_or_else(|| Error::Load("checkpoint stores method tensors only; a backbone is required".into()))?;
        if base.dims() != &manifest.dims {
            return Err(Error::Load(format!("backbone dims {:?} differ from checkpoint dims {:?}", base.dims(), manifest.dims)));
        }
        if store_digest(base.params()) != manifest.backbone_digest {
            return Err(Error::Load("backbone weights differ from the ones the checkpoint was trained on".into()));
        }
        base
    };
    let model = AttachedModel::from_parts(backbone, manifest.peft.clone(), method).map_err(|e| Error::Load(e.to_string()))?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(config: PeftConfig) -> AttachedModel<f32> {
        let bb = Seq2SeqModel::new(ArchitectureDims::tiny(), 3).unwrap();
        AttachedModel::attach(bb, config, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn method_only_payload_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(PeftConfig::lora(2));
        let man = save_checkpoint(&m, "h", 7, 12.5, dir.path()).unwrap();
        let method_vals: usize = m.method_params().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(man.payload_bytes as usize, 4 * method_vals);
        assert!(load_checkpoint::<f32>(dir.path(), None).is_err());
        let (back, man2) = load_checkpoint(dir.path(), Some(m.backbone().clone())).unwrap();
        assert_eq!(man2, man);
        for (name, t) in m.method_params().iter() {
            assert!(t.bit_eq(back.method_params().get(name).unwrap()));
        }
        let other = Seq2SeqModel::new(ArchitectureDims::tiny(), 99).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path(), Some(other)), Err(Error::Load(_))));
    }

    #[test]
    fn fine_tune_stores_backbone_and_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(PeftConfig::FineTune);
        let man = save_checkpoint(&m, "h", 0, 0.0, dir.path()).unwrap();
        assert_eq!(man.payload_bytes as usize, 4 * m.backbone().params().total_numel());
        let (back, _) = load_checkpoint::<f32>(dir.path(), None).unwrap();
        assert_eq!(back.backbone().params(), m.backbone().params());
        let bin = dir.path().join(PAYLOAD_FILE);
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[10] ^= 1;
        std::fs::write(&bin, bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path(), None), Err(Error::Corruption(_))));
    }
}
