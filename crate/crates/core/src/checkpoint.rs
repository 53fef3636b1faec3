//! Checkpoint container: `u64` little-endian header length, a JSON header,
//! then every tensor as little-endian `f32`. See `docs/format.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vit::{BlockGeometry, BlockMasks, MaskSet, Vit, VitConfig};

pub const FORMAT_NAME: &str = "blockprune-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in `f32` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub config: VitConfig,
    pub geometry: Vec<BlockGeometry>,
    pub params: Vec<Entry>,
    /// `block{i}.{in,out,inner}` entries when masks were saved.
    pub masks: Vec<Entry>,
    /// Free-form provenance (phase, epoch, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Vit<f32>,
    pub masks: Option<MaskSet>,
    pub meta: serde_json::Value,
}

pub fn to_bytes(model: &Vit<f32>, masks: Option<&MaskSet>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut blob: Vec<f32> = Vec::with_capacity(model.store.numel());
    let mut params = Vec::with_capacity(model.store.len());
    for (name, t) in model.store.names().iter().zip(model.store.tensors()) {
        params.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        blob.extend_from_slice(t.data());
    }
    let mut mask_entries = Vec::new();
    if let Some(m) = masks {
        for (i, b) in m.blocks.iter().enumerate() {
            for (part, values) in ["in", "out", "inner"].iter().zip([&b.m_in, &b.m_out, &b.m_inner]) {
                mask_entries.push(Entry {
                    name: format!("block{i}.{part}"),
                    shape: vec![values.len()],
                    offset: blob.len(),
                });
                blob.extend(values.iter().map(|&v| v as f32));
            }
        }
    }
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        config: model.config.clone(),
        geometry: model.geometry.clone(),
        params,
        masks: mask_entries,
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * blob.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn save(path: &Path, model: &Vit<f32>, masks: Option<&MaskSet>, meta: serde_json::Value) -> Result<()> {
    Ok(fs::write(path, to_bytes(model, masks, meta)?)?)
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let len = bytes
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        .ok_or_else(|| Error::Format("checkpoint shorter than its length prefix".into()))?;
    let json = bytes
        .get(8..8 + len)
        .ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
    let header: Header = serde_json::from_slice(json)?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            header.format, header.version
        )));
    }
    let blob = &bytes[8 + len..];
    if !blob.len().is_multiple_of(4) {
        return Err(Error::Format("checkpoint blob is not whole f32 values".into()));
    }
    Ok((header, blob))
}

fn slice(blob: &[u8], e: &Entry) -> Result<Vec<f32>> {
    let n: usize = e.shape.iter().product();
    let bytes = blob
        .get(4 * e.offset..4 * (e.offset + n))
        .ok_or_else(|| Error::Format(format!("tensor {} runs past the blob", e.name)))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, blob) = read_header(bytes)?;
    // Rebuild the layout from the config, then overwrite every tensor; the
    // throwaway init needs some generator but its values never survive.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model = Vit::<f32>::new(header.config.clone(), &mut rng)?;
    if header.geometry.len() != model.num_blocks() || header.params.len() != model.store.len() {
        return Err(Error::Format("checkpoint does not match its model config".into()));
    }
    let mut store = ParamStore::new();
    for (e, name) in header.params.iter().zip(model.store.names()) {
        if &e.name != name {
            return Err(Error::Format(format!("expected tensor {name}, found {}", e.name)));
        }
        store.push(e.name.clone(), Tensor::new(&e.shape, slice(blob, e)?)?);
    }
    model.store = store;
    model.geometry = header.geometry.clone();
    let masks = if header.masks.is_empty() {
        None
    } else {
        let expect = MaskSet::ones(&header.config);
        if header.masks.len() != 3 * expect.len() {
            return Err(Error::Format("checkpoint mask count does not match the model".into()));
        }
        let read = |e: &Entry| -> Result<Vec<f64>> { Ok(slice(blob, e)?.into_iter().map(f64::from).collect()) };
        let blocks = expect
            .blocks
            .iter()
            .zip(header.masks.chunks_exact(3))
            .map(|(b, e)| {
                Ok(BlockMasks {
                    kind: b.kind,
                    m_in: read(&e[0])?,
                    m_out: read(&e[1])?,
                    m_inner: read(&e[2])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let set = MaskSet { blocks };
        set.check_against(&header.config)?;
        Some(set)
    };
    Ok(Checkpoint {
        model,
        masks,
        meta: header.meta,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> VitConfig {
        VitConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            heads: 2,
            depth: 1,
            mlp_ratio: 2,
            num_classes: 3,
        }
    }

    #[test]
    fn compact_model_with_masks_survives() {
        let model = Vit::<f32>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut masks = MaskSet::ones(&tiny());
        masks.blocks[1].m_inner[0] = 0.25;
        masks.blocks[0].m_out[3] = 0.125;
        let compact = model.compact(&masks).unwrap();
        let bytes = to_bytes(&compact, Some(&masks), serde_json::json!({"epoch": 3})).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.model.store.tensors(), compact.store.tensors());
        assert_eq!(back.model.geometry, compact.geometry);
        assert_eq!(back.masks.unwrap(), masks);
        assert_eq!(back.meta["epoch"], 3);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let model = Vit::<f32>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let bytes = to_bytes(&model, None, serde_json::Value::Null).unwrap();
        assert!(from_bytes(&bytes[..4]).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
