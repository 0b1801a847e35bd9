//! Datasets: IDX containers, a downsampled MNIST loader and toy images.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{RngState, Vector};

pub const IDX_LABELS: u32 = 0x0000_0801;
pub const IDX_IMAGES: u32 = 0x0000_0803;

/// An unsigned-byte IDX tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl IdxTensor {
    pub fn new(magic: u32, dims: Vec<usize>, payload: Vec<u8>) -> Result<Self> {
        let rank = match magic {
            IDX_LABELS => 1,
            IDX_IMAGES => 3,
            _ => return Err(Error::NotIdx),
        };
        if dims.len() != rank {
            return Err(Error::NotIdx);
        }
        let expected: usize = dims.iter().product();
        if payload.len() != expected {
            return Err(Error::SizeMismatch { expected, actual: payload.len() });
        }
        Ok(Self { magic, dims, payload })
    }

    /// Images as row-major vectors with bytes mapped linearly onto `[-1, 1]`.
    pub fn images(&self) -> Result<Vec<Vector>> {
        if self.magic != IDX_IMAGES {
            return Err(Error::InvalidArgument("IDX tensor does not hold images".into()));
        }
        let size = self.dims[1] * self.dims[2];
        Ok(self
            .payload
            .chunks_exact(size)
            .map(|px| Vector::from_iterator(size, px.iter().map(|&b| b as f64 / 127.5 - 1.0)))
            .collect())
    }
}

/// Parse a big-endian IDX container holding `u8` data.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(Error::SizeMismatch { expected: 4, actual: bytes.len() });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if magic != IDX_LABELS && magic != IDX_IMAGES {
        return Err(Error::NotIdx);
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::SizeMismatch { expected: header, actual: bytes.len() });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = dims.iter().product::<usize>();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::SizeMismatch { expected, actual: payload.len() });
    }
    IdxTensor::new(magic, dims, payload.to_vec())
}

pub fn write_idx(tensor: &IdxTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * tensor.dims.len() + tensor.payload.len());
    out.extend_from_slice(&tensor.magic.to_be_bytes());
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&tensor.payload);
    out
}

pub fn read_idx(path: &Path) -> Result<IdxTensor> {
    parse_idx(&std::fs::read(path)?)
}

/// Side of the downsampled MNIST images.
pub const MNIST_SIDE: usize = 8;
pub const MNIST_DEFAULT_SUBSAMPLE: usize = 2048;

/// Center-crop `side x side` images to `3 * out` and average-pool 3x3 blocks.
pub fn crop_and_pool(image: &Vector, side: usize, out: usize) -> Result<Vector> {
    let crop = 3 * out;
    if image.len() != side * side || side < crop {
        return Err(Error::InvalidArgument(format!("cannot pool a {side}x{side} image to {out}x{out}")));
    }
    let off = (side - crop) / 2;
    Ok(Vector::from_fn(out * out, |k, _| {
        let (r, c) = (k / out, k % out);
        let mut sum = 0.0;
        for dr in 0..3 {
            for dc in 0..3 {
                sum += image[(off + 3 * r + dr) * side + off + 3 * c + dc];
            }
        }
        sum / 9.0
    }))
}

/// The first `subsample` images of an IDX image file, reduced to 8x8.
pub fn load_mnist(path: &Path, subsample: usize) -> Result<Vec<Vector>> {
    if !path.exists() {
        return Err(Error::InvalidArgument(format!("MNIST file not found: {}", path.display())));
    }
    let tensor = read_idx(path)?;
    let side = tensor.dims.get(1).copied().unwrap_or(0);
    if tensor.magic != IDX_IMAGES || tensor.dims[2] != side {
        return Err(Error::InvalidArgument("expected square IDX images".into()));
    }
    tensor
        .images()?
        .iter()
        .take(subsample)
        .map(|img| crop_and_pool(img, side, MNIST_SIDE))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    /// A vertical bar of width `side / 2` whose left edge shifts by one
    /// column either way.
    Bars,
    /// A disc of radius `side / 4` with its center jittered by up to half a pixel.
    Blobs,
}

/// Images with a fixed interior and stochastic edges, values in `{-1, 1}`.
pub fn toy_image_dataset(kind: ToyKind, side: usize, n: usize, rng: RngState) -> Result<Vec<Vector>> {
    if !(4..=32).contains(&side) {
        return Err(Error::InvalidArgument(format!("toy image side must lie in [4, 32], got {side}")));
    }
    let mut g = rng.rng();
    let d = side * side;
    Ok((0..n)
        .map(|_| match kind {
            ToyKind::Bars => {
                let width = side / 2;
                let start = (side - width) / 2 + g.gen_range(0..3) - 1;
                Vector::from_fn(d, |k, _| if (start..start + width).contains(&(k % side)) { 1.0 } else { -1.0 })
            }
            ToyKind::Blobs => {
                let radius = side as f64 / 4.0;
                let cy = (side as f64 - 1.0) / 2.0 + g.gen_range(-0.5..0.5);
                let cx = (side as f64 - 1.0) / 2.0 + g.gen_range(-0.5..0.5);
                Vector::from_fn(d, |k, _| {
                    let (r, c) = ((k / side) as f64, (k % side) as f64);
                    if (r - cy).powi(2) + (c - cx).powi(2) <= radius * radius {
                        1.0
                    } else {
                        -1.0
                    }
                })
            }
        })
        .collect())
}
