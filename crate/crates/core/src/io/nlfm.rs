//! NLFM float maps: `"NLFM"`, version `u16`, then `H`, `W`, `C` as `u32`,
//! then `H * W * C` `f32` values, row-major with the channel fastest. All
//! little-endian.

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::grid::{AffinityField, ConfidenceMap, Field2D, Mask, NeighborField};

pub const MAGIC: [u8; 4] = *b"NLFM";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 3 * 4;

/// A multi-channel `H x W x C` map as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl FloatMap {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        let n = checked_len(height, width, channels).ok_or(FormatError::DimOverflow {
            height: height as u32,
            width: width as u32,
            channels: channels as u32,
        })?;
        if values.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} map needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    fn from_f64(height: usize, width: usize, channels: usize, values: impl Iterator<Item = f64>) -> Result<Self> {
        Self::new(height, width, channels, values.map(|v| v as f32).collect())
    }

    fn widened(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    fn expect_channels(&self, channels: usize) -> Result<()> {
        if self.channels != channels {
            return Err(Error::ShapeMismatch(format!(
                "expected {channels} channels, file has {}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(FormatError::TruncatedHeader.into());
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic).into());
        }
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::TruncatedHeader.into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("length checked"));
        let (height, width, channels) = (dim(0), dim(1), dim(2));
        let overflow = FormatError::DimOverflow {
            height,
            width,
            channels,
        };
        let n = checked_len(height as usize, width as usize, channels as usize).ok_or(overflow)?;
        let expected = n.checked_mul(4).ok_or(FormatError::DimOverflow {
            height,
            width,
            channels,
        })?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < expected {
            return Err(FormatError::TruncatedPayload {
                expected,
                found: payload.len(),
            }
            .into());
        }
        if payload.len() > expected {
            return Err(FormatError::TrailingBytes(payload.len() - expected).into());
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunks of 4")))
            .collect();
        Ok(Self {
            height: height as usize,
            width: width as usize,
            channels: channels as usize,
            values,
        })
    }

    pub fn from_field(field: &Field2D) -> Result<Self> {
        Self::from_f64(field.height(), field.width(), 1, field.values().iter().copied())
    }

    pub fn to_field(&self) -> Result<Field2D> {
        self.expect_channels(1)?;
        Field2D::new(self.height, self.width, self.widened())
    }

    pub fn from_mask(mask: &Mask) -> Result<Self> {
        Self::from_f64(
            mask.height(),
            mask.width(),
            1,
            mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }),
        )
    }

    /// Non-zero entries are set.
    pub fn to_mask(&self) -> Result<Mask> {
        self.expect_channels(1)?;
        Mask::new(self.height, self.width, self.values.iter().map(|&v| v != 0.0).collect())
    }

    pub fn from_confidence(conf: &ConfidenceMap) -> Result<Self> {
        Self::from_field(conf.field())
    }

    pub fn to_confidence(&self) -> Result<ConfidenceMap> {
        ConfidenceMap::new(self.to_field()?)
    }

    /// `C = 2K`: `(dr, dc)` pairs per neighbor.
    pub fn from_offsets(field: &NeighborField) -> Result<Self> {
        let (h, w) = field.shape();
        Self::from_f64(h, w, 2 * field.k(), field.offsets().iter().flatten().copied())
    }

    pub fn to_offsets(&self) -> Result<NeighborField> {
        if self.channels % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "offset maps need an even channel count, file has {}",
                self.channels
            )));
        }
        let offsets = self
            .values
            .chunks_exact(2)
            .map(|c| [c[0] as f64, c[1] as f64])
            .collect();
        NeighborField::new(self.height, self.width, self.channels / 2, offsets)
    }

    /// `C = K` raw affinities.
    pub fn from_affinities(field: &AffinityField) -> Result<Self> {
        let (h, w) = field.shape();
        Self::from_f64(h, w, field.k(), field.raw().iter().copied())
    }

    pub fn to_affinities(&self) -> Result<AffinityField> {
        AffinityField::new(self.height, self.width, self.channels, self.widened())
    }
}

fn checked_len(height: usize, width: usize, channels: usize) -> Option<usize> {
    if height == 0 || width == 0 || channels == 0 {
        return None;
    }
    if [height, width, channels].iter().any(|&d| d > u32::MAX as usize) {
        return None;
    }
    height.checked_mul(width)?.checked_mul(channels)
}

pub fn write_map(path: &Path, map: &FloatMap) -> Result<()> {
    std::fs::write(path, map.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_map(path: &Path) -> Result<FloatMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FloatMap::from_bytes(&bytes)
}
