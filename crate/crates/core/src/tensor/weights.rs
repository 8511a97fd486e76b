//! Layer weight files.
//!
//! A layer is stored as a flat little-endian `f32` file holding the filters
//! in `(C_out, C_in, k, k)` order, followed by `C_out` bias values when the
//! JSON sidecar says `has_bias`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ConvSpec;
use crate::error::{MevcError, Result};
use crate::fsutil::write_atomic;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightSidecar {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl WeightSidecar {
    pub fn of(spec: &ConvSpec) -> Self {
        WeightSidecar {
            in_channels: spec.in_channels(),
            out_channels: spec.out_channels(),
            kernel_size: spec.kernel_size(),
            stride: spec.stride(),
            padding: spec.padding(),
            has_bias: spec.bias().is_some(),
        }
    }
}

pub fn encode(spec: &ConvSpec) -> Vec<u8> {
    let bias = spec.bias().unwrap_or(&[]);
    spec.weights()
        .iter()
        .chain(bias)
        .flat_map(|v| v.to_le_bytes())
        .collect()
}

pub fn decode(meta: &WeightSidecar, bytes: &[u8]) -> Result<ConvSpec> {
    let n_w = meta.out_channels * meta.in_channels * meta.kernel_size * meta.kernel_size;
    let n_b = if meta.has_bias { meta.out_channels } else { 0 };
    if bytes.len() != 4 * (n_w + n_b) {
        return Err(MevcError::shape(format!(
            "weight file holds {} bytes, sidecar implies {}",
            bytes.len(),
            4 * (n_w + n_b)
        )));
    }
    let mut values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let bias = meta.has_bias.then(|| values.split_off(n_w));
    ConvSpec::new(
        meta.in_channels,
        meta.out_channels,
        meta.kernel_size,
        meta.stride,
        meta.padding,
        values,
        bias,
    )
}

pub fn save(spec: &ConvSpec, weights_path: &Path, sidecar_path: &Path) -> Result<()> {
    write_atomic(weights_path, &encode(spec))?;
    let json = serde_json::to_vec_pretty(&WeightSidecar::of(spec))?;
    write_atomic(sidecar_path, &json)
}

pub fn load(weights_path: &Path, sidecar_path: &Path) -> Result<ConvSpec> {
    let meta_bytes = fs::read(sidecar_path).map_err(|e| MevcError::io(sidecar_path, e))?;
    let meta: WeightSidecar = serde_json::from_slice(&meta_bytes)?;
    let bytes = fs::read(weights_path).map_err(|e| MevcError::io(weights_path, e))?;
    decode(&meta, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let w: Vec<f32> = (0..2 * 3 * 9).map(|v| (v as f32).sin() * 1e-3).collect();
        let spec = ConvSpec::new(3, 2, 3, 2, 1, w, Some(vec![0.25, -7.5])).unwrap();
        let (wp, sp) = (dir.path().join("l0.bin"), dir.path().join("l0.json"));
        save(&spec, &wp, &sp).unwrap();
        assert_eq!(fs::metadata(&wp).unwrap().len(), 4 * (54 + 2));
        assert_eq!(load(&wp, &sp).unwrap(), spec);

        let sidecar: serde_json::Value = serde_json::from_slice(&fs::read(&sp).unwrap()).unwrap();
        assert_eq!(sidecar["has_bias"], true);
        assert_eq!(sidecar["stride"], 2);
    }

    #[test]
    fn layout_is_little_endian_out_in_k_k() {
        let spec = ConvSpec::new(1, 1, 1, 1, 0, vec![1.0], None).unwrap();
        assert_eq!(encode(&spec), 1.0f32.to_le_bytes());
    }

    #[test]
    fn size_mismatch_rejected() {
        let meta = WeightSidecar {
            in_channels: 1,
            out_channels: 1,
            kernel_size: 3,
            stride: 1,
            padding: 1,
            has_bias: true,
        };
        assert!(decode(&meta, &[0u8; 36]).is_err());
        assert!(decode(&meta, &[0u8; 40]).is_ok());
    }
}
