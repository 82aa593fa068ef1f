//! Binary weight and saliency grid files.
//!
//! Weights: `DXTW`, u32 version, then for every layer in file order a u32
//! value count followed by that many f32 values (kernel then bias).
//! Saliency grids: `DXTS`, u32 version, u32 height, u32 width, then the
//! row-major f32 grid. All integers and floats are little-endian.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{DetectorConfig, DetectorError, DetectorLayers, DetectorModel};
use crate::saliency::{DecisionTarget, Method, MethodParams, SaliencyMap};
use crate::tensor::{Conv2d, Tensor, TensorError};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"DXTW";
pub const SALIENCY_MAGIC: &[u8; 4] = b"DXTS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic, expected {0:?}")]
    BadMagic(&'static str),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("file truncated")]
    Truncated,
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("layer {layer} has {got} values, expected {expected}")]
    LayerSize { layer: usize, expected: usize, got: usize },
    #[error("sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated)?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let raw = self.take(n.checked_mul(4).ok_or(FormatError::Truncated)?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn header(&mut self, magic: &'static [u8; 4], name: &'static str) -> Result<(), FormatError> {
        if self.take(4)? != magic {
            return Err(FormatError::BadMagic(name));
        }
        match self.u32()? {
            FORMAT_VERSION => Ok(()),
            v => Err(FormatError::Version(v)),
        }
    }

    fn finish(&self) -> Result<(), FormatError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::Trailing(n)),
        }
    }
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_weights(layers: &DetectorLayers) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for layer in layers.iter() {
        let count = (layer.weight.len() + layer.bias.len()) as u32;
        out.extend_from_slice(&count.to_le_bytes());
        push_f32s(&mut out, layer.weight.data());
        push_f32s(&mut out, &layer.bias);
    }
    out
}

/// Loads weights for a detector of the given configuration. Layer shapes
/// come from the configuration; the file only carries values.
pub fn read_weights(config: DetectorConfig, bytes: &[u8]) -> Result<DetectorModel, FormatError> {
    let template = DetectorModel::seeded(config.clone(), 0)?;
    let mut r = Reader { bytes, pos: 0 };
    r.header(WEIGHTS_MAGIC, "DXTW")?;
    let mut loaded = Vec::new();
    for (i, layer) in template.layers().iter().enumerate() {
        let expected = layer.weight.len() + layer.bias.len();
        let got = r.u32()? as usize;
        if got != expected {
            return Err(FormatError::LayerSize { layer: i, expected, got });
        }
        let weight = Tensor::new(layer.weight.shape().to_vec(), r.f32s(layer.weight.len())?)?;
        let bias = r.f32s(layer.bias.len())?;
        loaded.push(Conv2d::new(weight, bias, layer.stride, layer.padding)?);
    }
    r.finish()?;
    let box_head = loaded.pop().expect("box head");
    let class_head = loaded.pop().expect("class head");
    Ok(DetectorModel::from_layers(config, DetectorLayers { backbone: loaded, class_head, box_head })?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencySidecar {
    pub target: DecisionTarget,
    pub method: Method,
    pub params: MethodParams,
    pub raw_range: (f32, f32),
}

pub fn write_saliency(map: &SaliencyMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * map.grid.len());
    out.extend_from_slice(SALIENCY_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    push_f32s(&mut out, &map.grid);
    out
}

pub fn sidecar_json(map: &SaliencyMap, params: &MethodParams) -> String {
    let sidecar = SaliencySidecar { target: map.target, method: map.method, params: *params, raw_range: map.raw_range };
    serde_json::to_string_pretty(&sidecar).expect("sidecar serializes")
}

/// Height, width and grid of a `DXTS` file.
pub fn read_saliency_grid(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>), FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(SALIENCY_MAGIC, "DXTS")?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let grid = r.f32s(h.checked_mul(w).ok_or(FormatError::Truncated)?)?;
    r.finish()?;
    Ok((h, w, grid))
}

pub fn read_saliency(bytes: &[u8], sidecar: &str) -> Result<(SaliencyMap, MethodParams), FormatError> {
    let (height, width, grid) = read_saliency_grid(bytes)?;
    let s: SaliencySidecar = serde_json::from_str(sidecar).map_err(|e| FormatError::Sidecar(e.to_string()))?;
    let map = SaliencyMap { height, width, grid, target: s.target, method: s.method, raw_range: s.raw_range };
    Ok((map, s.params))
}
