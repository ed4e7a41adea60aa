//! Binary weight files: magic `MLAB`, little-endian u32 version and tensor
//! count, then per tensor a u16 name length, the UTF-8 name, a u8 rank,
//! u32 dimensions and row-major f32 values.

use std::path::Path;

use mlab_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Model, ModelConfig, Network};

pub const MAGIC: &[u8; 4] = b"MLAB";
pub const VERSION: u32 = 1;
/// Name of the tensor that carries the model metadata as JSON bytes.
pub const META_TENSOR: &str = "meta.config";

pub fn encode_tensors(tensors: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut names = std::collections::BTreeSet::new();
    for (name, t) in tensors {
        if !names.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(
            u8::try_from(t.rank())
                .map_err(|_| Error::Format(format!("rank too large for {name}")))?,
        );
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension too large in {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(what.to_string()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("four bytes"),
        ))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "header").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a weight file (bad magic)".into()));
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let count = r.u32("header")?;
    let mut out = Vec::new();
    for i in 0..count {
        let what = format!("tensor #{i}");
        let len = u16::from_le_bytes(r.take(2, &what)?.try_into().expect("two bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, &what)?)
            .map_err(|_| Error::Format(format!("{what} has a non-UTF-8 name")))?
            .to_string();
        let rank = r.take(1, &name)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&name)? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Truncated(name.clone()))?,
            &name,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
            .collect();
        if out.iter().any(|(n, _): &(String, Tensor<f32>)| *n == name) {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Meta {
    id: String,
    config: ModelConfig,
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Meta {
        id: model.id.clone(),
        config: model.config(),
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    let meta = Tensor::from_vec(&[meta.len()], meta.into_iter().map(f32::from).collect())?;
    let mut tensors = vec![(META_TENSOR.to_string(), &meta)];
    tensors.extend(model.network.named_tensors());
    encode_tensors(&tensors)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut tensors = decode_tensors(bytes)?;
    let at = tensors
        .iter()
        .position(|(n, _)| n == META_TENSOR)
        .ok_or_else(|| Error::Format(format!("weight file lacks the {META_TENSOR} tensor")))?;
    let (_, meta) = tensors.remove(at);
    let meta: Vec<u8> = meta.data().iter().map(|&v| v as u8).collect();
    let meta: Meta =
        serde_json::from_slice(&meta).map_err(|e| Error::Format(format!("model metadata: {e}")))?;
    Ok(Model::new(
        meta.id,
        Network::from_named(&meta.config, tensors)?,
    ))
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, encode_model(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode_model(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{CnnConfig, VitConfig};

    fn small_vit() -> Model {
        let cfg = VitConfig {
            image_size: 16,
            token_size: 4,
            embed_dim: 8,
            num_heads: 2,
            num_layers: 1,
            mlp_ratio: 2,
            num_classes: 3,
        };
        Model::init("vit", &ModelConfig::Vit(cfg), 4).unwrap()
    }

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::from_vec(&[2], vec![1.0f32, -2.5]).unwrap();
        let bytes = encode_tensors(&[("ab".into(), &t)]).unwrap();
        let mut expected = b"MLAB".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u16.to_le_bytes());
        expected.extend(b"ab");
        expected.push(1);
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(decode_tensors(&bytes).unwrap(), vec![("ab".to_string(), t)]);
    }

    #[test]
    fn models_round_trip() {
        for model in [
            small_vit(),
            Model::init(
                "cnn",
                &ModelConfig::Cnn(CnnConfig {
                    image_size: 16,
                    ..CnnConfig::default()
                }),
                2,
            )
            .unwrap(),
        ] {
            let back = decode_model(&encode_model(&model).unwrap()).unwrap();
            assert_eq!(back, model);
        }
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode_model(&small_vit()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Format(_))));
        let mut old = bytes.clone();
        old[4] = 9;
        assert!(matches!(decode_model(&old), Err(Error::Version(9))));
        match decode_model(&bytes[..bytes.len() - 3]) {
            Err(Error::Truncated(name)) => assert_eq!(name, "head.head_b"),
            other => panic!("expected truncation, got {other:?}"),
        }
    }
}
