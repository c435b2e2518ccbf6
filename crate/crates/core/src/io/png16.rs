//! Depth as 16-bit grayscale PNG: `depth = pixel / 256` meters, 0 marks an
//! invalid pixel.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::grid::{Field2D, Mask};

pub const PNG_DEPTH_SCALE: f64 = 256.0;

/// Quantizes to `round(depth * 256)`. Pixels outside `valid` (or all zero
/// depths) encode 0; valid depths must round into `1..=65535`.
pub fn encode_depth(depth: &Field2D, valid: Option<&Mask>) -> Result<Vec<u16>> {
    if let Some(m) = valid {
        if m.shape() != depth.shape() {
            return Err(Error::ShapeMismatch("depth and mask".into()));
        }
    }
    let w = depth.width();
    depth
        .values()
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if valid.is_some_and(|m| !m.bits()[i]) || d == 0.0 {
                return Ok(0);
            }
            let q = (d * PNG_DEPTH_SCALE).round();
            if !(1.0..=65535.0).contains(&q) {
                return Err(FormatError::DepthOutOfRange {
                    row: i / w,
                    col: i % w,
                    value: d,
                }
                .into());
            }
            Ok(q as u16)
        })
        .collect()
}

pub fn decode_depth(height: usize, width: usize, pixels: &[u16]) -> Result<(Field2D, Mask)> {
    let depth = pixels.iter().map(|&p| p as f64 / PNG_DEPTH_SCALE).collect();
    let valid = pixels.iter().map(|&p| p != 0).collect();
    Ok((Field2D::new(height, width, depth)?, Mask::new(height, width, valid)?))
}

pub fn write_depth_png16(path: &Path, depth: &Field2D, valid: Option<&Mask>) -> Result<()> {
    let pixels = encode_depth(depth, valid)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), depth.width() as u32, depth.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let png_err = |e: png::EncodingError| Error::from(FormatError::Png(e.to_string()));
    let mut writer = enc.write_header().map_err(png_err)?;
    // PNG stores 16-bit samples big-endian
    let bytes: Vec<u8> = pixels.iter().flat_map(|p| p.to_be_bytes()).collect();
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

pub fn read_depth_png16(path: &Path) -> Result<(Field2D, Mask)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let png_err = |e: png::DecodingError| Error::from(FormatError::Png(e.to_string()));
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(png_err)?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(FormatError::Png(format!(
            "expected 16-bit grayscale, found {:?} {:?}",
            info.color_type, info.bit_depth
        ))
        .into());
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| FormatError::Png("image too large".into()))?];
    let frame = reader.next_frame(&mut buf).map_err(png_err)?;
    let pixels: Vec<u16> = buf[..frame.buffer_size()]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    decode_depth(h, w, &pixels)
}
