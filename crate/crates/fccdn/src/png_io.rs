//! 8-bit PNG reading and writing for images, labels and predicted masks.
//!
//! Labels may be 1-bit or 8-bit grayscale or palette-indexed. Binary labels
//! stored as 0/255 are read back as 0/1.

use std::path::Path;

use fccdn_core::data::Image8;
use png::{BitDepth, ColorType, Decoder, Encoder, Transformations};

use crate::error::{read, write, Error, Result};

/// Colors of the class-index masks, by class: 0 black, then red, green,
/// blue, yellow, magenta, cyan, white. Classes beyond 7 reuse the cycle.
pub const CLASS_PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [255, 0, 0],
    [0, 128, 0],
    [0, 0, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
    [255, 255, 255],
];

struct Raw {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    data: Vec<u8>,
}

fn decode(path: &Path, transform: Transformations) -> Result<Raw> {
    let bytes = read(path)?;
    let mut dec = Decoder::new(bytes.as_slice());
    dec.set_transformations(transform);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok(Raw {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data: buf,
    })
}

/// Reads an RGB image; an alpha channel is dropped and grayscale is
/// replicated into three channels.
pub fn read_rgb(path: &Path) -> Result<Image8> {
    let raw = decode(path, Transformations::EXPAND | Transformations::STRIP_16)?;
    let channels = match raw.color {
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Indexed => return Err(Error::format(path, "unexpanded palette image")),
    };
    let data = raw
        .data
        .chunks_exact(channels)
        .flat_map(|px| match channels {
            1 | 2 => [px[0]; 3],
            _ => [px[0], px[1], px[2]],
        })
        .collect();
    Ok(Image8::new(raw.width, raw.height, 3, data)?)
}

fn unpack_bits(data: &[u8], width: usize, height: usize) -> Vec<u8> {
    let stride = width.div_ceil(8);
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            out.push((data[y * stride + x / 8] >> (7 - x % 8)) & 1);
        }
    }
    out
}

/// Reads a single-channel label map. 1-bit and palette images yield their
/// raw values; 8-bit grayscale containing only 0 and 255 yields 0/1, any
/// other 8-bit grayscale is returned unchanged.
pub fn read_label(path: &Path) -> Result<Image8> {
    let raw = decode(path, Transformations::IDENTITY)?;
    let data = match (raw.color, raw.depth) {
        (ColorType::Grayscale | ColorType::Indexed, BitDepth::One) => {
            unpack_bits(&raw.data, raw.width, raw.height)
        }
        (ColorType::Indexed, BitDepth::Eight) => raw.data,
        (ColorType::Grayscale, BitDepth::Eight) => {
            if raw.data.iter().all(|&v| v == 0 || v == 255) {
                raw.data.iter().map(|&v| (v == 255) as u8).collect()
            } else {
                raw.data
            }
        }
        (c, d) => {
            return Err(Error::format(
                path,
                format!("unsupported label format {c:?} at {d:?} depth; use 8-bit grayscale"),
            ))
        }
    };
    Ok(Image8::mask(raw.width, raw.height, data)?)
}

fn encode(
    path: &Path,
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<()> {
    let mut bytes = Vec::new();
    {
        let mut enc = Encoder::new(&mut bytes, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut w = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
        w.write_image_data(data)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    write(path, &bytes)
}

pub fn write_rgb(path: &Path, img: &Image8) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::format(path, "expected a 3-channel image"));
    }
    encode(path, img.width, img.height, ColorType::Rgb, BitDepth::Eight, None, &img.data)
}

/// 0/1 mask as 8-bit grayscale 0/255, the usual on-disk form of change
/// labels.
pub fn write_label(path: &Path, mask: &Image8) -> Result<()> {
    check_binary(path, mask)?;
    let data: Vec<u8> = mask.data.iter().map(|&v| v * 255).collect();
    encode(path, mask.width, mask.height, ColorType::Grayscale, BitDepth::Eight, None, &data)
}

/// 0/1 mask as a 1-bit grayscale PNG.
pub fn write_mask_1bit(path: &Path, mask: &Image8) -> Result<()> {
    check_binary(path, mask)?;
    let stride = mask.width.div_ceil(8);
    let mut data = vec![0u8; stride * mask.height];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.data[y * mask.width + x] == 1 {
                data[y * stride + x / 8] |= 1 << (7 - x % 8);
            }
        }
    }
    encode(path, mask.width, mask.height, ColorType::Grayscale, BitDepth::One, None, &data)
}

/// Class-index mask as a palette PNG colored with [`CLASS_PALETTE`]; the
/// pixel values are the class indices.
pub fn write_class_mask(path: &Path, mask: &Image8, classes: usize) -> Result<()> {
    if mask.channels != 1 || mask.data.iter().any(|&v| v as usize >= classes.max(1)) {
        return Err(Error::format(path, "class index outside the class count"));
    }
    let palette = (0..classes.clamp(1, 256))
        .flat_map(|c| CLASS_PALETTE[c % CLASS_PALETTE.len()])
        .collect();
    encode(
        path,
        mask.width,
        mask.height,
        ColorType::Indexed,
        BitDepth::Eight,
        Some(palette),
        &mask.data,
    )
}

fn check_binary(path: &Path, mask: &Image8) -> Result<()> {
    if mask.channels != 1 || mask.data.iter().any(|&v| v > 1) {
        return Err(Error::format(path, "mask must be single-channel 0/1"));
    }
    Ok(())
}
