//! Checkpoints are a directory holding `manifest.json` (parameter name to
//! shape, in name order) and `params.bin`, the little-endian f64 payload of
//! every parameter concatenated in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_PAYLOAD: &str = "params.bin";

pub fn save_checkpoint(store: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest: BTreeMap<&str, &[usize]> = store.iter().map(|p| (p.name.as_str(), p.tensor.shape())).collect();
    let mut payload = Vec::with_capacity(store.element_count() * 8);
    for p in store.iter() {
        for v in p.tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest_path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))?;
    let payload_path = dir.join(CHECKPOINT_PAYLOAD);
    fs::write(&payload_path, payload).map_err(|e| Error::io(&payload_path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<ParamStore> {
    let manifest_path = dir.join(CHECKPOINT_MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(manifest_path));
    }
    let text = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: BTreeMap<String, Vec<usize>> = serde_json::from_slice(&text)?;
    let payload_path = dir.join(CHECKPOINT_PAYLOAD);
    let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected: usize = manifest.values().map(|s| s.iter().product::<usize>()).sum();
    if payload.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, manifest needs {}",
            payload.len(),
            expected * 8
        )));
    }
    let mut store = ParamStore::new();
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for (name, shape) in manifest {
        let n = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        store.insert(&name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bit_identical() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.insert_normal("b.w", &[3, 4], 0.5, &mut rng).unwrap();
        store.insert_normal("a.bias", &[4], 0.5, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&store, dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, store);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut store = ParamStore::new();
        store.insert_full("w", &[2, 2], 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&store, dir.path()).unwrap();
        fs::write(dir.path().join(CHECKPOINT_PAYLOAD), [0u8; 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }
}
