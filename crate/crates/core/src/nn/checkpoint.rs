//! Versioned binary checkpoint: `"TRCK" | version u16 | header_len u32 |
//! header JSON | f64 parameter blobs (little-endian, layer order)`.

use serde::{Deserialize, Serialize};

use super::layer::{Layer, LayerSpec};
use super::network::Network;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TRCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    seed: u64,
    input_shape: Vec<usize>,
    head_start: usize,
    layers: Vec<LayerSpec>,
    metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub seed: u64,
    /// Free-form owner data (the model configuration).
    pub metadata: serde_json::Value,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        seed: ckpt.seed,
        input_shape: ckpt.network.input_shape.clone(),
        head_start: ckpt.network.head_start,
        layers: ckpt.network.specs(),
        metadata: ckpt.metadata.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::with_capacity(10 + json.len() + ckpt.network.param_count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for layer in &ckpt.network.layers {
        for p in &layer.params {
            for v in p.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fmt(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = bytes.get(10..10 + hlen).ok_or_else(|| fmt("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| fmt(&e.to_string()))?;
    let mut pos = 10 + hlen;
    let mut layers = Vec::with_capacity(header.layers.len());
    for spec in header.layers {
        let mut params = Vec::new();
        for shape in spec.kind.param_shapes() {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(pos..pos + n * 8)
                .ok_or_else(|| fmt("truncated parameters"))?;
            pos += n * 8;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Tensor::new(shape, data)?);
        }
        layers.push(Layer::new(spec, params)?);
    }
    if pos != bytes.len() {
        return Err(fmt("trailing bytes"));
    }
    Ok(Checkpoint {
        network: Network::new(layers, header.input_shape, header.head_start)?,
        seed: header.seed,
        metadata: header.metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::LayerKind;
    use rand::SeedableRng;

    #[test]
    fn round_trip_and_truncation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut spec = LayerSpec::new("fc", LayerKind::Dense { inputs: 3, outputs: 2 });
        spec.trainable = false;
        let layers = vec![
            Layer::init(spec, &mut rng).unwrap(),
            Layer::init(LayerSpec::new("sm", LayerKind::Softmax), &mut rng).unwrap(),
        ];
        let ckpt = Checkpoint {
            network: Network::new(layers, vec![3], 0).unwrap(),
            seed: 42,
            metadata: serde_json::json!({"family": "test"}),
        };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint(b"TRIM0000000").is_err());
    }
}
