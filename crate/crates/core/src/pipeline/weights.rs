//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! `"HOIW"`, `u32` version, `u64` config length, config JSON,
//! `u32` block count, then per block `u32` name length, name, `u32` rank,
//! `u64` extents, `f32` values (row-major); finally a `u64` FNV-1a checksum
//! of every preceding byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{fnv1a, HoiModel, ModelConfig, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HOIW";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_weights(model: &HoiModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config).expect("config serialises");
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in &model.params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corruption(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Corruption("length overflows".into()))
    }
}

/// Decodes and verifies a checkpoint; nothing is returned unless the whole
/// file checks out.
pub fn decode_weights(bytes: &[u8]) -> Result<(ModelConfig, ParamSet)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Corruption("missing HOIW magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version(version));
    }
    if bytes.len() < 16 {
        return Err(Error::Corruption("truncated header".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a(payload) != stored {
        return Err(Error::Corruption("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: payload, at: 8 };
    let n = r.len()?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Corruption(format!("config: {e}")))?;
    let blocks = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..blocks {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Corruption("block name".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Corruption(format!("block {name} is too large")))?;
        let data = r
            .take(count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Corruption(format!("block {name}: {e}")))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::Corruption(format!("duplicate block {name}")));
        }
    }
    if r.at != payload.len() {
        return Err(Error::Corruption("trailing bytes after the last block".into()));
    }
    Ok((config, params))
}

pub fn save_weights(model: &HoiModel, path: &Path) -> Result<()> {
    fs::write(path, encode_weights(model)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and checks its parameters against its own config.
pub fn load_weights(path: &Path) -> Result<HoiModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, params) = decode_weights(&bytes)?;
    HoiModel::from_params(config, params)
}

/// Loads a checkpoint that must serve `expected` exactly.
pub fn load_weights_for(path: &Path, expected: &ModelConfig) -> Result<HoiModel> {
    let model = load_weights(path)?;
    if &model.config != expected {
        if model.config.horizons != expected.horizons {
            return Err(Error::Incompatible(format!(
                "checkpoint has heads for horizons {:?}, configuration asks for {:?}",
                model.config.horizons, expected.horizons
            )));
        }
        return Err(Error::Incompatible("checkpoint was trained with a different model configuration".into()));
    }
    Ok(model)
}

/// Loads a detection checkpoint for head training: backbone and τ=0 head
/// come from the file, heads for the other `horizons` start fresh.
pub fn load_for_hydra(path: &Path, horizons: &[u32], seed: u64) -> Result<HoiModel> {
    load_weights(path)?.with_horizons(horizons.to_vec(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params;

    fn model() -> HoiModel {
        HoiModel::new(
            ModelConfig {
                grid_l: 2,
                d_vis: 8,
                d_box: 8,
                depth: 1,
                heads: 2,
                horizons: vec![0],
                ..Default::default()
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let (cfg, p) = decode_weights(&encode_weights(&m)).unwrap();
        assert_eq!(cfg, m.config);
        for (name, t) in &m.params {
            assert!(p[name].bit_eq(t), "{name}");
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.hoiw");
        save_weights(&m, &path).unwrap();
        assert_eq!(load_weights(&path).unwrap().params, m.params);
    }

    #[test]
    fn damage_is_detected() {
        let bytes = encode_weights(&model());
        for cut in [0, 3, 7, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_weights(&bytes[..cut]), Err(Error::Corruption(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode_weights(&flipped), Err(Error::Corruption(_))));
        let mut v = bytes;
        v[4] = 9;
        assert!(matches!(decode_weights(&v), Err(Error::Version(9))));
    }

    #[test]
    fn stage_transition_and_mismatch() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.hoiw");
        save_weights(&m, &path).unwrap();
        let hydra_cfg = ModelConfig {
            horizons: vec![0, 1, 3, 5],
            ..m.config.clone()
        };
        match load_weights_for(&path, &hydra_cfg) {
            Err(Error::Incompatible(msg)) => assert!(msg.contains("horizons")),
            other => panic!("{:?}", other.map(|_| ())),
        }
        let h = load_for_hydra(&path, &[0, 1, 3, 5], 4).unwrap();
        assert_eq!(h.config, hydra_cfg);
        for (name, t) in &m.params {
            assert_eq!(&h.params[name], t);
        }
        for tau in [1, 3, 5] {
            assert!(h.params.contains_key(&params::head_weight(tau)));
        }
        load_weights_for(&path, &m.config).unwrap();
    }
}
